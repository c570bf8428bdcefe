from conftest import load
from kernelgen import initial_memory
from regdem.demote import DemotionPlan, demote, is_demoted_access
from regdem.isa import parse_kernel
from regdem.oracle import execute, same_observable_state, scoreboard_check
from regdem.postopt import apply_options, eliminate_redundant, reschedule, substitute_value_registers

PROLOGUE = """    B--:-:-:-:1 S2R R10, SR_TID.X ;
    B--:-:-:-:1 SHL R10, R10, 0x2 ;
    B--:-:-:-:1 S2R R0, SR_TID.X ;
    B--:-:-:-:6 SHL R1, R0, 0x2 ;
"""


def demoted(body, slots=4, prologue=PROLOGUE):
    return parse_kernel(f".kernel d\n.blockdim 64\n.shared 0\n.dynshared {slots * 256}\n" + prologue + body)


def accesses(k, opcode, offset=None):
    return [i for i in k.instructions if i.opcode == opcode and is_demoted_access(i, k)
            and (offset is None or i.memory_operand.offset == offset)]


def sound(before, after):
    init = initial_memory(3)
    assert same_observable_state(execute(before, init), execute(after, init))
    assert scoreboard_check(after) == []
    assert after.reg_count <= before.reg_count


TWO_READS = """    B--:R2:W3:-:1 LDS R11, [R10+0x300] ;
    B23:-:-:-:6 IADD R2, R11, R0 ;
{between}    B--:R2:W3:-:1 LDS R11, [R10+0x300] ;
    B23:-:-:-:6 IADD R3, R11, R2 ;
    B--:R1:-:-:1 STG [R1+0x0], R3 ;
    B1:-:-:-:1 EXIT ;
"""


def test_second_load_removed():
    k = demoted(TWO_READS.format(between=""))
    out = eliminate_redundant(k)
    assert len(accesses(k, "LDS", 0x300)) == 2
    assert len(accesses(out, "LDS", 0x300)) == 1
    sound(k, out)


def test_redefined_value_keeps_load():
    k = demoted(TWO_READS.format(between="    B--:-:-:-:6 MOV R11, 0x5 ;\n"))
    out = eliminate_redundant(k)
    assert len(accesses(out, "LDS", 0x300)) == 2


def test_dead_store_removed():
    body = """    B--:-:-:-:6 MOV R11, 0x1 ;
    B--:R1:-:-:1 STS [R10+0x200], R11 ;
    B1:-:-:-:6 MOV R11, 0x2 ;
    B--:R1:-:-:1 STS [R10+0x200], R11 ;
    B1:-:-:-:6 MOV R11, RZ ;
    B--:R2:W3:-:1 LDS R11, [R10+0x200] ;
    B23:R1:-:-:1 STG [R1+0x0], R11 ;
    B1:-:-:-:1 EXIT ;
"""
    k = demoted(body)
    out = eliminate_redundant(k)
    assert len(accesses(out, "STS", 0x200)) == 1
    sound(k, out)


HOIST = """    B--:-:-:-:6 MOV R2, 0x1 ;
    B--:-:-:-:6 MOV R3, 0x2 ;
    B--:-:-:-:6 MOV R4, 0x3 ;
    B--:-:-:-:6 MOV R5, 0x4 ;
    B--:-:-:-:6 MOV R6, 0x5 ;
    B--:R2:W3:-:1 LDS R11, [R10+0x0] ;
    B23:-:-:-:6 IADD R7, R11, R2 ;
    B--:R1:-:-:1 STG [R1+0x0], R7 ;
    B1:-:-:-:1 EXIT ;
"""


def _index(k, pred):
    return next(n for n, i in enumerate(k.instructions) if pred(i))


def test_load_hoisted_past_independent_instructions():
    k = demoted(HOIST)
    out = reschedule(k)
    lds = _index(out, lambda i: i.opcode == "LDS")
    first_mov = _index(out, lambda i: i.opcode == "MOV")
    assert lds < first_mov
    sound(k, out)


def test_hoist_stops_below_demoted_store():
    body = """    B--:-:-:-:6 MOV R11, 0x4 ;
    B--:R1:-:-:1 STS [R10+0x100], R11 ;
    B1:-:-:-:6 MOV R2, 0x1 ;
    B--:-:-:-:6 MOV R3, 0x2 ;
    B--:R2:W3:-:1 LDS R11, [R10+0x0] ;
    B23:-:-:-:6 IADD R7, R11, R2 ;
    B--:R1:-:-:1 STG [R1+0x0], R7 ;
    B1:-:-:-:1 EXIT ;
"""
    k = demoted(body)
    out = reschedule(k)
    sts = _index(out, lambda i: i.opcode == "STS")
    assert out.instructions[sts + 1].opcode == "LDS"
    sound(k, out)


STORE_THEN = """    B--:-:-:-:6 MOV R11, 0x4 ;
    B--:R1:-:-:1 STS [R10+0x100], R11 ;
{gap}    B--:-:-:-:6 MOV R11, 0x9 ;
    B--:R1:-:-:1 STG [R1+0x0], R11 ;
    B1:-:-:-:1 EXIT ;
"""


def test_store_read_barrier_dropped_after_long_gap():
    gap = "    B1:-:-:-:6 MOV R2, 0x1 ;\n" + "    B--:-:-:-:6 MOV R2, 0x1 ;\n" * 3
    k = demoted(STORE_THEN.format(gap=gap))
    out = reschedule(k)
    assert accesses(out, "STS")[0].control.read_barrier is None
    sound(k, out)


def test_store_read_barrier_kept_after_short_gap():
    k = demoted(STORE_THEN.format(gap="    B1:-:-:-:6 MOV R2, 0x1 ;\n"))
    out = reschedule(k)
    assert accesses(out, "STS")[0].control.read_barrier is not None


SUBST_PROLOGUE = """    B--:-:-:-:1 S2R R6, SR_TID.X ;
    B--:-:-:-:1 SHL R6, R6, 0x2 ;
    B--:-:-:-:1 S2R R0, SR_TID.X ;
    B--:-:-:-:6 SHL R1, R0, 0x2 ;
"""


def test_substitution_uses_dead_register():
    body = """    B--:-:-:-:6 MOV R4, 0x9 ;
    B--:-:-:-:6 IADD R5, R4, R0 ;
    B--:R1:-:-:1 STG [R1+0x80], R5 ;
    B1:R2:W3:-:1 LDS R7, [R6+0x0] ;
    B23:-:-:-:6 IADD R2, R7, R0 ;
    B--:R2:W3:-:1 LDS R7, [R6+0x100] ;
    B23:-:-:-:6 IADD R3, R7, R2 ;
    B--:R1:-:-:1 STG [R1+0x0], R3 ;
    B--:R4:-:-:1 STG [R1+0x100], R0 ;
    B14:-:-:-:1 EXIT ;
"""
    k = demoted(body, slots=2, prologue=SUBST_PROLOGUE)
    out = substitute_value_registers(k)
    values = [i.operands[0].index for i in accesses(out, "LDS")]
    assert values == [3, 4]
    assert out.reg_count <= k.reg_count
    sound(k, out)
    # the loads no longer share a value register, so one can move past the other's user
    both = reschedule(out)
    sound(k, both)
    offsets = [i.memory_operand.offset for i in both.instructions if i.opcode == "LDS"]
    assert offsets == [0x100, 0x0]


def test_no_free_register_no_change():
    body = """    B--:R4:W5:-:1 LDS R3, [R2+0x0] ;
    B45:-:-:-:6 IADD R0, R3, R0 ;
    B--:R4:W5:-:1 LDS R3, [R2+0x100] ;
    B45:-:-:-:6 IADD R0, R3, R0 ;
    B--:R1:-:-:1 STG [R1+0x0], R0 ;
    B1:-:-:-:1 EXIT ;
"""
    prologue = """    B--:-:-:-:1 S2R R2, SR_TID.X ;
    B--:-:-:-:1 SHL R2, R2, 0x2 ;
    B--:-:-:-:1 S2R R0, SR_TID.X ;
    B--:-:-:-:6 SHL R1, R0, 0x2 ;
"""
    k = demoted(body, slots=2, prologue=prologue)
    # only RDA (R2) is dead after the last load, and it is reserved
    assert substitute_value_registers(k).body == k.body


def test_passes_on_generated_demotion():
    k = load("regs35_c")
    result = demote(k, DemotionPlan(32, "cfg"))
    for opts in [{"redundant"}, {"subst"}, {"resched"}, {"redundant", "subst", "resched"}]:
        sound(result.kernel, apply_options(result.kernel, opts))


def test_no_demotion_is_noop():
    k = load("straight")
    assert eliminate_redundant(k) == k
    assert reschedule(k) == k
    assert substitute_value_registers(k) == k
