"""Command-line driver: ``regdem <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config
from .analysis import build_cfg, to_dot
from .compact import apply_renaming, build_relocation_space, compact, compact_bank_aware
from .demote import STRATEGIES, DemotionError, normalize_strategy
from .isa import AsmError, parse_kernel, print_kernel
from .occupancy import OccupancyError, occupancy, resident_limits
from .oracle import ExecutionError, bank_conflict_check, execute, scoreboard_check
from .pipeline import DEFAULT_MAX_VARIANTS, VariantBuilder, check_variant, option_label, run_pipeline
from .postopt import OPTIONS
from .predictor import Candidate, program_stalls, rank_variants, score_variants

log = logging.getLogger("regdem")


class Settings:
    def __init__(self, args):
        self.arch, curve = config.load_profile(args.profile)
        self.table = config.load_latency_table(args.latency_table)
        self.curve = config.load_curve(args.curve, fallback=curve or config.DEFAULT_CURVE)
        self.json_out = Path(args.json_out) if args.json_out else None
        if self.json_out:
            self.json_out.mkdir(parents=True, exist_ok=True)


def _load(path):
    return parse_kernel(Path(path).read_text(encoding="utf-8"))


def _emit_json(data, settings, name, stream=None):
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if settings.json_out:
        (settings.json_out / name).write_text(text)
    else:
        (stream or sys.stdout).write(text)


def _options(text):
    if not text:
        return frozenset()
    opts = frozenset(o.strip() for o in text.split(",") if o.strip())
    bad = opts - set(OPTIONS)
    if bad:
        raise argparse.ArgumentTypeError(f"unknown options {sorted(bad)}; choose from {','.join(OPTIONS)}")
    return opts


def _output_path(args, suffix):
    if args.output:
        return Path(args.output)
    src = Path(args.input)
    return src.with_name(f"{src.stem}.{suffix}{src.suffix or '.sass'}")


# --------------------------------------------------------------------------
# subcommands


def cmd_demote(args, settings):
    kernel = _load(args.input)
    builder = VariantBuilder(kernel, settings.table, floor=args.floor, max_shared=args.max_shared)
    variant = builder.build(args.strategy, args.target_regs, args.opt)
    if variant is None:
        print(f"{args.input}: {kernel.reg_count} registers already meet target {args.target_regs}",
              file=sys.stderr)
        return 0
    out = _output_path(args, "demoted")
    out.write_text(print_kernel(variant.kernel))
    side = variant.sidecar()
    side["opt"] = sorted(args.opt, key=OPTIONS.index)
    side["defects"] = check_variant(variant, settings.arch, settings.table)
    sidecar = settings.json_out / f"{out.stem}.json" if settings.json_out else out.with_suffix(".json")
    sidecar.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    print(f"{out}: {kernel.reg_count} -> {variant.kernel.reg_count} registers, "
          f"{variant.demotion.demoted_count} slots, dynshared {variant.kernel.dynamic_shared} B")
    for d in variant.demotion.diagnostics:
        print(f"note: {d}", file=sys.stderr)
    return 0


def cmd_compact(args, settings):
    kernel = _load(args.input)
    space = build_relocation_space(kernel)
    mapping = compact_bank_aware(space, kernel) if args.bank_aware else compact(space)
    out_kernel = apply_renaming(kernel, mapping)
    out = _output_path(args, "compact")
    out.write_text(print_kernel(out_kernel))
    data = {"renaming": {f"R{a}": f"R{b}" for a, b in sorted(mapping.items())},
            "reg_count_before": kernel.reg_count, "reg_count_after": out_kernel.reg_count,
            "space_before": space.render()}
    _emit_json(data, settings, f"{out.stem}.json")
    return 0


def cmd_predict(args, settings):
    kernel = _load(args.input)
    report = program_stalls(kernel, settings.arch, settings.table)
    report.stall_program = report.stall_count
    _emit_json(report.to_json(), settings, f"{Path(args.input).stem}.predict.json")
    return 0


def cmd_select(args, settings):
    inputs = list(args.inputs)
    if args.auto_variants:
        first = _load(inputs[0])
        external = [(Path(p).stem, _load(p)) for p in inputs[1:]]
        result = run_pipeline(first, settings.arch, settings.table, settings.curve,
                              max_variants=args.max_variants, external=external)
        rows = [(v.name, v.options, v.report) for v in result.ranking]
        chosen_text = print_kernel(result.chosen.kernel)
        chosen_name = result.chosen.name
    else:
        cands = [Candidate(p, _load(p)) for p in inputs]
        score_variants(cands, settings.arch, settings.table, settings.curve)
        order = rank_variants(cands)
        rows = [(cands[i].name, cands[i].options, cands[i].report) for i in order]
        chosen_name = cands[order[0]].name
        chosen_text = print_kernel(cands[order[0]].kernel)
    print(f"{'rank':>4}  {'variant':<40} {'occ':>6} {'stall_count':>12} {'stall_program':>14}")
    for i, (name, opts, rep) in enumerate(rows):
        print(f"{i + 1:>4}  {name:<40} {float(rep.occupancy):>6.3f} {float(rep.stall_count):>12.2f} "
              f"{float(rep.stall_program):>14.2f}")
    print(f"chosen: {chosen_name}")
    if args.output:
        Path(args.output).write_text(chosen_text)
    if settings.json_out:
        data = [{"rank": i + 1, "name": n, "options": option_label(o), **r.to_json()}
                for i, (n, o, r) in enumerate(rows)]
        _emit_json({"chosen": chosen_name, "ranking": data}, settings, "select.json")
    return 0


def cmd_occupancy(args, settings):
    if args.input:
        k = _load(args.input)
        regs, shared, block = k.reg_count, k.static_shared + k.dynamic_shared, k.block_dim
    else:
        if args.regs is None or args.block_dim is None:
            raise SystemExit("occupancy: give --input or both --regs and --block-dim")
        regs, shared, block = args.regs, args.shared, args.block_dim
    limits = resident_limits(max(regs, 1), shared, block, settings.arch)
    occ = occupancy(max(regs, 1), shared, block, settings.arch)
    print(f"registers/thread {regs}, shared/block {shared} B, block {block} threads")
    for name, blocks in sorted(limits.items(), key=lambda kv: kv[1]):
        print(f"  {name:<10} {blocks:>4} blocks")
    print(f"occupancy {occ} = {float(occ):.4f}")
    return 0


def _memory(args):
    if args.mem:
        text = args.mem
        if Path(text).is_file():
            text = Path(text).read_text()
        raw = bytes.fromhex("".join(text.split()))
        words = np.frombuffer(raw.ljust(-(-len(raw) // 4) * 4, b"\0"), dtype="<u4").copy()
        if words.size < args.mem_words:
            words = np.concatenate([words, np.zeros(args.mem_words - words.size, dtype=np.uint32)])
        return words
    rng = np.random.default_rng(args.seed)
    return rng.integers(0, 2 ** 32, args.mem_words, dtype=np.uint64).astype(np.uint32)


def cmd_run(args, settings):
    kernel = _load(args.input)
    state = execute(kernel, _memory(args), tid_base=args.tid_base, table=settings.table, fuel=args.fuel)
    _emit_json(state.to_json(), settings, f"{Path(args.input).stem}.run.json")
    return 0


def cmd_check(args, settings):
    kernel = _load(args.input)
    hazards = scoreboard_check(kernel, settings.table, strict=args.strict)
    conflicts = bank_conflict_check(kernel)
    for h in hazards:
        print(f"hazard: {h}")
    for c in conflicts:
        print(f"bank conflict: {c}")
    if not hazards and not conflicts:
        print(f"{args.input}: clean")
    return 1 if hazards or conflicts else 0


def cmd_pipeline(args, settings):
    kernel = _load(args.input)
    external = [(Path(p).stem, _load(p)) for p in args.external or ()]
    result = run_pipeline(kernel, settings.arch, settings.table, settings.curve, target=args.target_regs,
                          max_variants=args.max_variants, external=external)
    for n in result.notices:
        print(f"notice: {n}", file=sys.stderr)
    out = _output_path(args, "best")
    out.write_text(print_kernel(result.chosen.kernel))
    report = result.report()
    report["input"] = str(args.input)
    report["output"] = str(out)
    json_dir = settings.json_out or out.parent / f"{out.stem}.variants"
    json_dir.mkdir(parents=True, exist_ok=True)
    (json_dir / "ranking.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for v in result.ranking + result.dropped:
        (json_dir / f"{v.name}.json").write_text(json.dumps(v.sidecar(), indent=2, sort_keys=True) + "\n")
    print(f"{out}: chose {result.chosen.name} ({len(result.ranking)} ranked, {len(result.dropped)} dropped)")
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="regdem", description="Register demotion toolkit for SASS-like kernels.")
    p.add_argument("--profile", help="architecture profile (key = value)")
    p.add_argument("--latency-table", help="instruction class latency/throughput table")
    p.add_argument("--curve", help="occupancy curve file (occupancy = relative time)")
    p.add_argument("--json-out", help="directory for JSON reports")
    p.add_argument("--dump-cfg", metavar="DOT", help="write the input's CFG in DOT format")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demote", help="demote registers into shared memory")
    d.add_argument("--input", required=True)
    d.add_argument("--target-regs", type=int, required=True)
    d.add_argument("--strategy", default="static", type=normalize_strategy,
                   help=f"one of {', '.join(STRATEGIES)}")
    d.add_argument("--max-shared", type=int, help="shared-memory budget for demoted slots (bytes)")
    d.add_argument("--opt", type=_options, default=frozenset(), help=f"comma list of {','.join(OPTIONS)}")
    d.add_argument("--floor", type=int, default=32, help="never demote below this register count")
    d.add_argument("--output")
    d.set_defaults(func=cmd_demote)

    c = sub.add_parser("compact", help="compact the register space")
    c.add_argument("--input", required=True)
    c.add_argument("--bank-aware", action="store_true")
    c.add_argument("--output")
    c.set_defaults(func=cmd_compact)

    pr = sub.add_parser("predict", help="static stall estimate")
    pr.add_argument("--input", required=True)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("select", help="rank variants and pick the best")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--auto-variants", action="store_true",
                   help="also generate demoted variants of the first input")
    s.add_argument("--max-variants", type=int, default=DEFAULT_MAX_VARIANTS)
    s.add_argument("--output", help="write the chosen kernel here")
    s.set_defaults(func=cmd_select)

    o = sub.add_parser("occupancy", help="occupancy and its resource limits")
    o.add_argument("--input")
    o.add_argument("--regs", type=int)
    o.add_argument("--shared", type=int, default=0)
    o.add_argument("--block-dim", type=int)
    o.set_defaults(func=cmd_occupancy)

    r = sub.add_parser("run", help="execute one warp in the interpreter")
    r.add_argument("--input", required=True)
    r.add_argument("--mem", help="global memory image as hex (or a file holding hex)")
    r.add_argument("--seed", type=int, default=0, help="random memory image when --mem is absent")
    r.add_argument("--mem-words", type=int, default=2048)
    r.add_argument("--tid-base", type=int, default=0)
    r.add_argument("--fuel", type=int, default=200_000)
    r.set_defaults(func=cmd_run)

    ch = sub.add_parser("check", help="scoreboard and bank-conflict checks")
    ch.add_argument("--input", required=True)
    ch.add_argument("--strict", action="store_true", help="also enforce barrier discipline")
    ch.set_defaults(func=cmd_check)

    pl = sub.add_parser("pipeline", help="full demotion pipeline")
    pl.add_argument("--input", required=True)
    pl.add_argument("--target-regs", type=int)
    pl.add_argument("--max-variants", type=int, default=DEFAULT_MAX_VARIANTS)
    pl.add_argument("--external", nargs="*", help="extra variants to compete")
    pl.add_argument("--output")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = Settings(args)
        if args.dump_cfg:
            src = getattr(args, "input", None) or (getattr(args, "inputs", None) or [None])[0]
            if src:
                Path(args.dump_cfg).write_text(to_dot(build_cfg(_load(src))))
        return args.func(args, settings)
    except AsmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DemotionError, OccupancyError, ExecutionError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
