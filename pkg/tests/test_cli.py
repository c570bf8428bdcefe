import json
import shutil

import pytest

from conftest import FIXTURES
from regdem import config
from regdem.cli import main
from regdem.isa import DEFAULT_LATENCY, parse_kernel
from regdem.occupancy import MAXWELL
from regdem.predictor import DEFAULT_CURVE


@pytest.fixture
def wide(tmp_path):
    path = tmp_path / "wide33.sass"
    shutil.copy(FIXTURES / "wide33.sass", path)
    return path


def test_shipped_defaults_match_builtins():
    arch, curve = config.load_profile()
    assert arch == MAXWELL
    assert curve.points() == DEFAULT_CURVE.points()
    assert config.load_latency_table() == DEFAULT_LATENCY
    assert config.load_curve() is DEFAULT_CURVE


def test_latency_table_overrides(tmp_path):
    p = tmp_path / "t.table"
    p.write_text("# slower memory\nglobal-memory.latency = 400\n")
    table = config.load_latency_table(p)
    assert table.gl_mem_stall == 400 and table.sh_mem_stall == 24
    p.write_text("bogus.latency = 1\n")
    with pytest.raises(ValueError):
        config.load_latency_table(p)


def test_demote(wide, capsys):
    assert main(["demote", "--input", str(wide), "--target-regs", "32", "--strategy", "cfg",
                 "--opt", "redundant,bank"]) == 0
    out = wide.with_name("wide33.demoted.sass")
    assert parse_kernel(out.read_text()).reg_count <= 32
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["opt"] == ["redundant", "bank"] and side["defects"] == []
    assert "-> " in capsys.readouterr().out


def test_demote_rejects_unknown_option(wide):
    with pytest.raises(SystemExit):
        main(["demote", "--input", str(wide), "--target-regs", "32", "--opt", "fast"])


def test_compact(tmp_path, capsys):
    path = tmp_path / "k.sass"
    path.write_text(".kernel k\n.blockdim 64\n.shared 0\n    B--:-:-:-:1 MOV R7, 0x1 ;\n"
                    "    B--:-:-:-:1 IADD R9, R7, 0x1 ;\n    B--:-:-:-:1 EXIT ;\n")
    assert main(["compact", "--input", str(path)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["reg_count_before"] == 10 and data["reg_count_after"] == 2
    assert parse_kernel((tmp_path / "k.compact.sass").read_text()).reg_count == 2


def test_predict(capsys):
    assert main(["predict", "--input", str(FIXTURES / "pred_loop.sass")]) == 0
    assert json.loads(capsys.readouterr().out)["stall_count"] == 2658


def test_select(tmp_path, capsys):
    out = tmp_path / "best.sass"
    args = ["select", "--inputs", str(FIXTURES / "pred_loop.sass"), str(FIXTURES / "pred_three.sass"),
            "--output", str(out)]
    assert main(args) == 0
    text = capsys.readouterr().out
    assert text.strip().endswith("pred_three.sass")
    assert out.read_text().startswith(".kernel")


def test_select_auto_variants(wide, tmp_path, capsys):
    assert main(["--json-out", str(tmp_path / "js"), "select", "--inputs", str(wide), "--auto-variants",
                 "--max-variants", "4"]) == 0
    data = json.loads((tmp_path / "js" / "select.json").read_text())
    assert len(data["ranking"]) == 5


def test_occupancy(capsys):
    assert main(["occupancy", "--regs", "64", "--block-dim", "256"]) == 0
    assert "occupancy 1/2" in capsys.readouterr().out
    assert main(["occupancy", "--input", str(FIXTURES / "pred_mixed.sass")]) == 0
    assert "occupancy 3/4" in capsys.readouterr().out


def test_run(capsys):
    assert main(["run", "--input", str(FIXTURES / "single_use.sass"), "--mem", "00" * 16]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["registers"]["R9"] == [0x2a] * 32


def test_check(capsys):
    assert main(["check", "--input", str(FIXTURES / "demoted_single.sass"), "--strict"]) == 0
    assert main(["check", "--input", str(FIXTURES / "corrupt_stride.sass")]) == 1
    assert "bank conflict" in capsys.readouterr().out


def test_pipeline(wide, tmp_path):
    dot = tmp_path / "cfg.dot"
    assert main(["--dump-cfg", str(dot), "pipeline", "--input", str(wide), "--max-variants", "4"]) == 0
    assert dot.read_text().startswith("digraph")
    best = wide.with_name("wide33.best.sass")
    ranking = json.loads((tmp_path / "wide33.best.variants" / "ranking.json").read_text())
    assert ranking["output"] == str(best) and len(ranking["ranking"]) == 5
    assert parse_kernel(best.read_text()).reg_count <= 33


def test_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.sass"
    bad.write_text(".kernel b\n    B--:-:-:-:1 FROB R1 ;\n")
    assert main(["predict", "--input", str(bad)]) == 2
    assert main(["predict", "--input", str(tmp_path / "missing.sass")]) == 2
    assert "error:" in capsys.readouterr().err
