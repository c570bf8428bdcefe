from conftest import load
from regdem.analysis import (
    BarrierTracker, TrackerEntry, access_counts, build_cfg, get_barrier, loop_depths, natural_loops,
    operand_conflicts, register_liveness, remaining_latency, to_dot, tracker_update,
)
from regdem.isa import iter_instructions, parse_instruction, parse_kernel


def test_straight_line_single_block():
    cfg = build_cfg(load("straight"))
    assert len(cfg.blocks) == 1
    assert cfg.edges == []


def test_loop_has_one_backward_edge():
    cfg = build_cfg(load("liveness"))
    assert len(cfg.blocks) >= 2
    assert len(cfg.backward_edges) == 1
    e = cfg.backward_edges[0]
    assert cfg.blocks[e.dst].label == "LOOP"


def test_diamond_cfg():
    cfg = build_cfg(load("diamond"))
    assert len(cfg.blocks) == 4
    assert sorted((e.src, e.dst) for e in cfg.edges) == [(0, 1), (0, 2), (1, 3), (2, 3)]
    assert not any(e.backward for e in cfg.edges)


def test_nested_loops_depth():
    cfg = build_cfg(load("nested"))
    by_label = {b.label: b.id for b in cfg.blocks}
    depth = loop_depths(cfg)
    assert depth[by_label["INNER"]] == 2
    assert depth[by_label["OUTER"]] == 1
    assert depth[0] == 0 and depth[-1] == 0
    assert set(natural_loops(cfg)) == {by_label["INNER"], by_label["OUTER"]}


# live sets worked out by hand, indexed by instruction order
LIVENESS_BEFORE = [
    set(), {0}, {0, 1}, {0, 1, 2},
    {0, 1, 2, 3}, {0, 1, 2, 3}, {0, 1, 2, 3, 4}, {0, 1, 2, 3},
    {0, 1, 2}, {0, 1, 2}, {1, 6}, set(),
]


def test_liveness_fixture_exact():
    k = load("liveness")
    live = register_liveness(build_cfg(k))
    positions = [p for p, _ in iter_instructions(k.body)]
    assert len(positions) == 12
    assert [set(live.before[p]) for p in positions] == LIVENESS_BEFORE


def test_dead_after_write_and_live_on_back_edge():
    k = load("liveness")
    cfg = build_cfg(k)
    live = register_liveness(cfg)
    positions = [p for p, _ in iter_instructions(k.body)]
    assert 5 not in live.after[positions[8]]  # MOV R5 is never read
    loop = cfg.blocks[cfg.backward_edges[0].src]
    assert 3 in live.live_out[loop.id]


def test_access_counts():
    cfg = build_cfg(load("liveness"))
    static = access_counts(cfg, "static")
    weighted = access_counts(cfg, "cfg")
    assert static[4] == 2 and weighted[4] == 20
    assert static[6] == 2 and weighted[6] == 2
    nested = build_cfg(load("nested"))
    assert access_counts(nested, "cfg")[5] == 1 + 2 * 100 + 1


def test_access_once_in_double_loop():
    src = """.kernel k
.blockdim 32
.shared 0
A:
B:
    B--:-:-:-:1 MOV R7, 0x1 ;
    B--:-:-:-:1 @P0 BRA B ;
    B--:-:-:-:1 @P1 BRA A ;
    B--:-:-:-:1 EXIT ;
"""
    cfg = build_cfg(parse_kernel(src))
    assert access_counts(cfg, "cfg")[7] == 100


def test_operand_conflicts():
    k = parse_kernel(".kernel k\n.blockdim 32\n    B--:-:-:-:1 FADD R1, R2, R3 ;\n"
                     "    B--:-:-:-:1 MOV R4, 0x1 ;\n    B--:-:-:-:1 MOV R5, 0x2 ;\n")
    g = operand_conflicts(k)
    assert g.edges == {frozenset(p) for p in [(1, 2), (1, 3), (2, 3)]}
    assert not g.has_edge(4, 5)


def test_fixture_conflict_graph_brute_force():
    k = load("straight")
    expected = set()
    for inst in k.instructions:
        regs = sorted({r.index for r in inst.registers()})
        expected |= {frozenset((a, b)) for i, a in enumerate(regs) for b in regs[i + 1:]}
    assert operand_conflicts(k).edges == expected


def test_tracker_update_ages_and_frees():
    nop6 = parse_instruction("B--:-:-:-:6 NOP ;")
    ldg = parse_instruction("B--:-:W2:-:1 LDG R2, [R1+0x0] ;")
    t = tracker_update(BarrierTracker(), ldg)
    assert t[2].elapsed == 1
    t = tracker_update(t, nop6)
    assert t[2].elapsed == 7
    t = tracker_update(t, parse_instruction("B2:-:-:-:1 NOP ;"))
    assert t.is_free(2)


def test_jump_resets_tracker():
    t = tracker_update(BarrierTracker(), parse_instruction("B--:-:W1:-:1 LDG R2, [R1+0x0] ;"))
    t = tracker_update(t, parse_instruction("B--:-:-:-:1 BRA L ;"))
    assert t.occupied() == set()
    assert get_barrier(t) == 1


def test_get_barrier():
    assert get_barrier(BarrierTracker()) == 1
    ldg = parse_instruction("B--:-:W1:-:1 LDG R2, [R1+0x0] ;")
    lds = parse_instruction("B--:-:W2:-:1 LDS R3, [R1+0x0] ;")
    entries = [TrackerEntry(ldg, 150), TrackerEntry(lds, 0)] + [TrackerEntry(ldg, 0)] * 4
    t = BarrierTracker(tuple(entries))
    assert remaining_latency(t[1]) == 50 and remaining_latency(t[2]) == 24
    assert get_barrier(t) == 2
    assert get_barrier(t, exclude={2}) == 1


def test_to_dot_marks_back_edges():
    dot = to_dot(build_cfg(load("liveness")))
    assert dot.startswith('digraph "liveness"') and "back" in dot
