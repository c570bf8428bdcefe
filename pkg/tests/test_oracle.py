from fractions import Fraction

import numpy as np
import pytest

from conftest import load
from kernelgen import generate_kernel, initial_memory
from mutants import wait_mutants
from regdem.demote import DemotionPlan, demote
from regdem.isa import DEFAULT_LATENCY, parse_kernel
from regdem.oracle import (
    FuelExhausted, MemoryFault, bank_conflict_check, execute, oracle_time, same_observable_state,
    scoreboard_check,
)


def kernel(*lines, shared=0, dynshared=0, blockdim=64):
    head = f".kernel t\n.blockdim {blockdim}\n.shared {shared}\n"
    if dynshared:
        head += f".dynshared {dynshared}\n"
    return parse_kernel(head + "".join(f"    {l}\n" for l in lines))


def test_mov_immediate():
    st = execute(kernel("B--:-:-:-:1 MOV R0, 0x7 ;", "B--:-:-:-:1 EXIT ;"))
    assert (st.regs[0] == 7).all()


def test_thread_ids():
    k = kernel("B--:-:-:-:1 S2R R0, SR_TID.X ;", "B--:-:-:-:1 EXIT ;")
    assert list(execute(k).regs[0]) == list(range(32))
    assert list(execute(k, tid_base=32).regs[0]) == list(range(32, 64))


def test_missing_wait_reads_stale_value():
    lines = ["B--:-:-:-:1 S2R R0, SR_TID.X ;", "B--:-:-:-:6 SHL R1, R0, 0x2 ;",
             "B--:-:W1:-:1 LDG R2, [R1+0x0] ;", "B{w}:-:-:-:6 IADD R3, R2, 0x0 ;",
             "B--:R2:-:-:1 STG [R1+0x200], R3 ;", "B2:-:-:-:1 EXIT ;"]
    mem = np.arange(256, dtype=np.uint32) + 100
    good = execute(kernel(*[l.format(w="1") for l in lines]), mem)
    bad = execute(kernel(*[l.format(w="--") for l in lines]), mem)
    assert list(good.global_mem[128:160]) == list(range(100, 132))
    assert not bad.global_mem[128:160].any()


def test_raw_hazard():
    k = kernel("B--:-:W1:-:1 LDG R2, [R1+0x0] ;", "B--:-:-:-:1 IADD R3, R2, 0x1 ;", "B1:-:-:-:1 EXIT ;")
    assert [h.kind for h in scoreboard_check(k)] == ["RAW"]


def test_war_hazard():
    k = kernel("B--:R1:-:-:1 STS [R1+0x0], R2 ;", "B--:-:-:-:1 MOV R2, 0x0 ;", "B1:-:-:-:1 EXIT ;", shared=256)
    assert [h.kind for h in scoreboard_check(k)] == ["WAR"]


def test_latency_covered_by_stalls():
    k = kernel("B--:-:-:-:15 LDS R2, [R1+0x0] ;", "B--:-:-:-:15 NOP ;", "B--:-:-:-:1 IADD R3, R2, 0x1 ;",
               "B--:-:-:-:1 EXIT ;", shared=256)
    assert scoreboard_check(k) == []


def test_strict_flags_unawaited_barrier():
    k = kernel("B--:-:W1:-:1 LDG R2, [R1+0x0] ;", "B--:-:-:-:1 EXIT ;")
    assert scoreboard_check(k) == []
    assert [h.kind for h in scoreboard_check(k, strict=True)] == ["unawaited"]


@pytest.mark.parametrize("name", ["straight", "diamond", "liveness", "nested", "pair", "demoted_single",
                                  "regs35_a", "regs35_c", "pred_loop", "pred_mixed"])
def test_fixtures_are_hazard_free(name):
    assert scoreboard_check(load(name), strict=True) == []


def test_every_removed_wait_is_caught():
    fixtures = [load("demoted_single"), demote(load("regs35_b"), DemotionPlan(30)).kernel]
    total = 0
    for k in fixtures:
        for pos, b, mutant in wait_mutants(k):
            total += 1
            assert scoreboard_check(mutant, strict=True), (k.name, pos, b)
    assert total > 20


def test_bank_check_clean_and_corrupt():
    assert bank_conflict_check(load("demoted_single")) == []
    conflicts = bank_conflict_check(load("corrupt_stride"))
    assert len(conflicts) == 64
    assert conflicts[0].lanes == (0, 16)


def test_bank_check_without_demotion():
    assert bank_conflict_check(load("straight")) == []


def test_determinism():
    k = load("regs35_d")
    mem = initial_memory(4)
    a, b = execute(k, mem), execute(k, mem)
    assert a.cycle == b.cycle and np.array_equal(a.global_mem, b.global_mem)
    assert np.array_equal(a.regs, b.regs)


@pytest.mark.parametrize("seed", range(10))
def test_results_do_not_depend_on_latency(seed):
    k = parse_kernel(generate_kernel(seed))
    mem = initial_memory(seed)
    a = execute(k, mem)
    b = execute(k, mem, table=DEFAULT_LATENCY.scaled(2))
    assert same_observable_state(a, b, k.static_shared)
    assert b.cycle >= a.cycle


def test_demotion_preserves_state():
    k = load("single_use")
    d = load("demoted_single")
    mem = initial_memory(1)
    assert same_observable_state(execute(k, mem), execute(d, mem))


def test_fuel():
    k = kernel("LOOP:", "B--:-:-:-:1 BRA LOOP ;", "B--:-:-:-:1 EXIT ;")
    with pytest.raises(FuelExhausted):
        execute(k, fuel=100)


def test_out_of_bounds():
    k = kernel("B--:-:-:-:1 MOV R1, 0x100000 ;", "B--:-:W1:-:1 LDG R2, [R1+0x0] ;", "B1:-:-:-:1 EXIT ;")
    with pytest.raises(MemoryFault):
        execute(k)
    k = kernel("B--:-:-:-:1 MOV R1, 0x400 ;", "B--:-:W1:-:1 LDS R2, [R1+0x0] ;", "B1:-:-:-:1 EXIT ;", shared=64)
    with pytest.raises(MemoryFault):
        execute(k)


def test_state_json():
    st = execute(kernel("B--:-:-:-:1 MOV R3, 0x1 ;", "B--:-:-:-:1 EXIT ;"))
    data = st.to_json()
    assert list(data["registers"]) == ["R3"] and data["executed"] == 2


def test_oracle_time_contention():
    # NOPs: 10 issue slots per warp, no latency to hide
    lines = ["B--:-:-:-:1 NOP ;"] * 9 + ["B--:-:-:-:1 EXIT ;"]
    k = kernel(*lines)
    assert oracle_time(k) == Fraction(10, 4)
    fp64 = kernel("B--:-:-:-:1 DADD R2, R4, R6 ;", "B--:-:-:-:1 EXIT ;")
    assert oracle_time(fp64) == Fraction(32 + 1, 4)


def test_oracle_time_latency_bound():
    k = kernel("B--:-:-:-:1 S2R R0, SR_TID.X ;", "B--:-:-:-:6 SHL R1, R0, 0x2 ;",
               "B--:-:W1:-:1 LDG R2, [R1+0x0] ;", "B1:-:-:-:1 EXIT ;")
    st = execute(k)
    assert st.cycle >= 200
    assert oracle_time(k, state=st) == Fraction(st.cycle, 64)
