"""Register demotion: spill registers into per-thread shared-memory slots.

Each demoted register is renamed to a single value register (RDV). A shared
store follows every definition and a shared load precedes every use; both
address the register's slot through a base-address register (RDA) that
holds ``tid * 4``. Barriers on the inserted accesses come from a barrier
tracker that prefers free barriers and otherwise the one closest to
completion.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

from .analysis import (
    BarrierTracker, access_counts, build_cfg, get_barrier, operand_conflicts,
    tracker_update,
)
from .compact import compacted_size
from .isa import (
    DEFAULT_LATENCY, ControlInfo, Immediate, Instruction, Label,
    MemoryRef, RegisterRef, SpecialRegister, is_variable_latency, register_groups,
)
from .occupancy import MIN_USEFUL_REGS

log = logging.getLogger(__name__)

STRATEGIES = ("static", "cfg", "conflict")
_STRATEGY_ALIASES = {"cfg-weighted": "cfg", "conflict-aware": "conflict"}

DEMOTED_STALL = 1


class DemotionError(ValueError):
    pass


def normalize_strategy(strategy):
    strategy = _STRATEGY_ALIASES.get(strategy, strategy)
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return strategy


@dataclass(frozen=True)
class SharedLayout:
    static_size: int  # static allocation rounded up to 4 bytes
    block_dim: int
    thread_stride: int = 4

    @classmethod
    def for_kernel(cls, kernel):
        return cls(-(-kernel.static_shared // 4) * 4, kernel.block_dim)

    @property
    def slot_stride(self):
        return self.block_dim * self.thread_stride

    def offset(self, slot):
        """Immediate offset of ``slot`` relative to the per-thread base."""
        return self.static_size + slot * self.slot_stride

    def location(self, tid, slot):
        return tid * self.thread_stride + self.offset(slot)

    def slot_of(self, offset):
        rel = offset - self.static_size
        if rel < 0 or rel % self.slot_stride:
            return None
        return rel // self.slot_stride


def shared_location(tid, slot, layout):
    """Byte address of demoted slot ``slot`` for thread ``tid``."""
    if not 0 <= tid < layout.block_dim:
        raise ValueError(f"thread id {tid} outside block of {layout.block_dim}")
    return layout.location(tid, slot)


@dataclass
class DemotionPlan:
    target_reg_count: int
    strategy: str = "static"
    rda: Optional[RegisterRef] = None
    rdv: Optional[RegisterRef] = None
    demoted: list = field(default_factory=list)  # (RegisterRef, [slot per word])
    floor: int = MIN_USEFUL_REGS
    max_shared: Optional[int] = None
    bank_aware: bool = False

    def __post_init__(self):
        self.strategy = normalize_strategy(self.strategy)


@dataclass
class DemotionResult:
    kernel: object
    plan: DemotionPlan
    layout: SharedLayout
    slots: list  # dicts: register, word, slot, offset
    log: list
    diagnostics: list
    original_reg_count: int

    @property
    def demoted_count(self):
        return len(self.slots)

    @property
    def rda(self):
        return self.plan.rda

    @property
    def rdv(self):
        return self.plan.rdv

    def sidecar(self):
        return {
            "strategy": self.plan.strategy,
            "target_reg_count": self.plan.target_reg_count,
            "rda": str(self.plan.rda) if self.plan.rda else None,
            "rdv": str(self.plan.rdv) if self.plan.rdv else None,
            "rdv_width": self.plan.rdv.width if self.plan.rdv else None,
            "dynamic_shared": self.kernel.dynamic_shared,
            "static_shared_rounded": self.layout.static_size,
            "block_dim": self.layout.block_dim,
            "slots": list(self.slots),
            "iterations": list(self.log),
            "diagnostics": list(self.diagnostics),
            "original_reg_count": self.original_reg_count,
        }


# --------------------------------------------------------------------------
# candidate selection


def select_candidates(kernel, strategy="static", exclude=()):
    """Registers ordered by ascending estimated demotion cost."""
    strategy = normalize_strategy(strategy)
    cfg = build_cfg(kernel)
    groups = register_groups(kernel)
    units = sorted({u for w, u in groups.items() if w not in exclude and u[0] not in exclude})
    static = access_counts(cfg, "static")
    if strategy == "static":
        key = lambda u: (static.get(u[0], 0), u[0])
    elif strategy == "cfg":
        weighted = access_counts(cfg, "cfg")
        key = lambda u: (weighted.get(u[0], 0), u[0])
    else:
        graph = operand_conflicts(kernel)
        degree = {n: 0 for n in graph.nodes}
        for e in graph.edges:
            for n in e:
                degree[n] += 1
        key = lambda u: (degree.get(u[0], 0), static.get(u[0], 0), u[0])
    return [RegisterRef(lead, width) for lead, width in sorted(units, key=key)]


# --------------------------------------------------------------------------
# barrier helpers


def _barriers_of(inst):
    return {b for b in (inst.control.read_barrier, inst.control.write_barrier) if b is not None}


def prune_waits(kernel):
    """Drop waits on barriers that no earlier instruction has armed.

    Barriers drain at every jump, so armed state resets there; labels reached
    by fall-through keep it.
    """
    armed = set()
    body = []
    for item in kernel.body:
        if isinstance(item, Instruction):
            waits = item.control.wait_set & armed
            if waits != item.control.wait_set:
                item = item.with_control(wait_set=frozenset(waits))
            armed -= waits
            armed |= _barriers_of(item)
            if item.is_jump:
                armed = set()
        body.append(item)
    return kernel.with_body(body)


def is_demoted_access(inst, kernel, rda=None):
    """True for the shared load/store of a demoted slot."""
    if inst.opcode not in ("LDS", "STS") or not kernel.dynamic_shared:
        return False
    mem = inst.memory_operand
    if rda is not None:
        return mem.base.index == rda.index
    return mem.offset >= SharedLayout.for_kernel(kernel).static_size


def demoted_base(kernel):
    """Base register of the demoted shared accesses, if any."""
    for inst in kernel.instructions:
        if is_demoted_access(inst, kernel):
            return inst.memory_operand.base
    return None


def demoted_value(inst):
    """Value register of a shared load or store."""
    return inst.operands[0] if inst.opcode == "LDS" else inst.operands[1]


# --------------------------------------------------------------------------
# the pass


class _NeedPair(Exception):
    pass


def _lds(value, rda, offset, predicate):
    return Instruction("LDS", (value, MemoryRef(rda, offset)), ControlInfo(stall=DEMOTED_STALL), predicate)


def _sts(value, rda, offset, predicate):
    return Instruction("STS", (MemoryRef(rda, offset), value), ControlInfo(stall=DEMOTED_STALL), predicate)


def _prologue(rda):
    return [
        Instruction("S2R", (rda, SpecialRegister("SR_TID.X")), ControlInfo(stall=1)),
        Instruction("SHL", (rda, rda, Immediate(2, True)), ControlInfo(stall=1)),
    ]


def _next_instruction(body, pos):
    for item in body[pos + 1:]:
        if isinstance(item, Label):
            return None
        return item
    return None


def _late_reads(inst, words):
    """Variable-latency instructions read their sources on completion."""
    return is_variable_latency(inst) and bool(inst.reads() & words)


def rdv_guards(tracker, rdv_words):
    """Armed barriers a new write of RDV must wait on: in-flight instructions
    still to read RDV (the demoted store case) or still writing it."""
    guards = set()
    for b in tracker.occupied():
        inst = tracker[b].inst
        if b == inst.control.read_barrier and _late_reads(inst, rdv_words):
            guards.add(b)
        if b == inst.control.write_barrier and is_variable_latency(inst) and inst.writes() & rdv_words:
            guards.add(b)
    return guards


def demote_register(kernel, unit, rda, rdv, offsets, table=DEFAULT_LATENCY):
    """Rewrite every access of ``unit`` through ``rdv`` with slot accesses.

    ``offsets`` maps each word of ``unit`` to its slot offset.
    """
    words = set(unit.words())
    rdv_word = {w: rdv.index + (w - unit.index) for w in words}
    rdv_words = set(rdv.words())

    def conv(ref):
        if ref.index in words:
            return RegisterRef(rdv_word[ref.index], ref.width)
        return ref

    out = []
    tracker = BarrierTracker()
    pending = set()

    def emit(inst):
        nonlocal tracker
        if pending:
            inst = inst.waiting(*pending)
            pending.clear()
        out.append(inst)
        tracker = tracker_update(tracker, inst, None)
        return inst

    def pick(exclude):
        return get_barrier(tracker, exclude=exclude, table=table)

    body = kernel.body
    for pos, item in enumerate(body):
        if isinstance(item, Label):
            if pending:
                emit(Instruction("NOP", (), ControlInfo(stall=1)))
            tracker = BarrierTracker()
            out.append(item)
            continue
        reads = item.reads() & words
        writes = item.writes() & words
        if not reads and not writes:
            emit(item)
            continue
        nxt = _next_instruction(body, pos)
        next_barriers = _barriers_of(nxt) if nxt is not None else set()
        inst = item.map_registers(conv)
        own = _barriers_of(inst)

        lds_barriers = set()
        for w in sorted(reads):
            load = _lds(RegisterRef(rdv_word[w]), rda, offsets[w], inst.predicate)
            waits = set(pending) | rdv_guards(tracker, rdv_words)
            exclude = waits | own | lds_barriers | inst.control.wait_set
            rb = pick(exclude)
            wb = pick(exclude | {rb})
            load = replace(load, control=replace(load.control, read_barrier=rb, write_barrier=wb,
                                                 wait_set=frozenset(waits)))
            pending.clear()
            emit(load)
            lds_barriers |= {rb, wb}
        if lds_barriers:
            inst = inst.waiting(*lds_barriers)

        if _late_reads(inst, rdv_words):
            rb = inst.control.read_barrier
            if rb is None or rb in next_barriers:
                exclude = inst.control.wait_set | pending | next_barriers | {inst.control.write_barrier}
                inst = inst.with_control(read_barrier=pick(exclude - {None}))

        if writes and inst.is_load and inst.control.write_barrier is None:
            exclude = inst.control.wait_set | pending | {inst.control.read_barrier}
            inst = inst.with_control(write_barrier=pick(exclude - {None}))

        inst = emit(inst)
        if _late_reads(inst, rdv_words):
            pending.add(inst.control.read_barrier)

        first = True
        for w in sorted(writes):
            store = _sts(RegisterRef(rdv_word[w]), rda, offsets[w], inst.predicate)
            waits = set()
            if first and is_variable_latency(inst) and inst.control.write_barrier is not None:
                waits.add(inst.control.write_barrier)
            first = False
            exclude = waits | pending | next_barriers
            rb = pick(exclude)
            store = replace(store, control=replace(store.control, read_barrier=rb, wait_set=frozenset(waits)))
            saved = set(pending)
            pending.clear()
            emit(store)
            pending.update(saved)
            pending.add(rb)
    if pending:
        emit(Instruction("NOP", (), ControlInfo(stall=1)))
    return kernel.with_body(out)


def _allocate_reserved(kernel, rdv_width):
    top = kernel.reg_count
    rda = RegisterRef(top)
    rdv_index = top + 1
    if rdv_width == 2 and rdv_index % 2:
        rdv_index += 1  # padding keeps the pair aligned
    return rda, RegisterRef(rdv_index, rdv_width)


def rdv_bank_conflicts(kernel, rdv):
    """Instructions where RDV shares a register bank with another operand,
    counted for each bank RDV could be placed in.

    The count for bank ``b`` assumes RDV's leading word sits in bank ``b``.
    """
    rdv_words = set(rdv.words())
    counts = {b: 0 for b in range(4)}
    for inst in kernel.instructions:
        words = {w for ref in inst.registers() for w in ref.words()}
        if not words & rdv_words:
            continue
        others = {w % 4 for w in words - rdv_words}
        for b in range(4):
            banks = {(b + k) % 4 for k in range(rdv.width)}
            if banks & others:
                counts[b] += 1
    return counts


def choose_rdv_bank(kernel, rdv, candidates):
    """Pick the RDV index among ``candidates`` with the fewest bank conflicts;
    ties go to the lowest index."""
    counts = rdv_bank_conflicts(kernel, rdv)
    feasible = [c for c in candidates if rdv.width == 1 or c % 2 == 0]
    if not feasible:
        return rdv
    best = min(feasible, key=lambda c: (counts[c % 4], c))
    return RegisterRef(best, rdv.width)


def _move_rdv(kernel, old, new):
    if old == new:
        return kernel
    mapping = {old.index + k: new.index + k for k in range(old.width)}

    def conv(ref):
        return RegisterRef(mapping.get(ref.index, ref.index), ref.width)

    body = [item.map_registers(conv) if isinstance(item, Instruction) else item for item in kernel.body]
    return kernel.with_body(body)


def _run(kernel, plan, rdv_width, table):
    rda, rdv = _allocate_reserved(kernel, rdv_width)
    layout = SharedLayout.for_kernel(kernel)
    target = max(plan.target_reg_count, plan.floor)
    diagnostics = []
    if target != plan.target_reg_count:
        diagnostics.append(f"target {plan.target_reg_count} raised to floor {plan.floor}")
    candidates = select_candidates(kernel, plan.strategy)
    if not candidates:
        raise DemotionError("no demotable registers")
    graph = operand_conflicts(kernel)
    demoted, slots, history = [], [], []
    k = kernel.copy()
    size = compacted_size(k)
    while size > target and size > plan.floor:
        if not candidates:
            diagnostics.append(f"candidates exhausted at {size} registers (target {target})")
            break
        unit = candidates.pop(0)
        if unit.width == 2 and rdv.width == 1:
            raise _NeedPair()
        needed = (len(slots) + unit.width) * layout.slot_stride
        if plan.max_shared is not None and needed > plan.max_shared:
            if not demoted:
                raise DemotionError(f"shared budget {plan.max_shared} B cannot host one slot")
            diagnostics.append(f"shared budget {plan.max_shared} B reached after {len(slots)} slots")
            break
        if not demoted:
            k = k.with_body(_prologue(rda) + k.body)
        offsets = {}
        for w in unit.words():
            slot = len(slots)
            offsets[w] = layout.offset(slot)
            slots.append({"register": str(unit), "word": w, "slot": slot, "offset": offsets[w]})
        k = demote_register(k, unit, rda, rdv, offsets, table)
        demoted.append((unit, [s["slot"] for s in slots[-unit.width:]]))
        candidates = [c for c in candidates if not graph.has_edge(c.index, unit.index)]
        size = compacted_size(k)
        history.append({"register": str(unit), "width": unit.width, "reg_count_compacted": size,
                        "remaining_candidates": len(candidates)})
        log.debug("demoted %s, compacted count now %d", unit, size)
    if not demoted:
        return k, rda, rdv, [], [], history, diagnostics, layout
    if plan.bank_aware:
        chosen = choose_rdv_bank(k, rdv, range(rda.index + 1, rda.index + 5))
        k = _move_rdv(k, rdv, chosen)
        rdv = chosen
    k = prune_waits(k)
    k = replace(k, dynamic_shared=len(slots) * layout.slot_stride)
    return k, rda, rdv, demoted, slots, history, diagnostics, layout


def demote(kernel, plan, table=DEFAULT_LATENCY):
    """Demote registers until the compacted register count reaches the plan's
    target (never below its floor). Returns the uncompacted kernel."""
    if kernel.dynamic_shared:
        raise DemotionError("kernel already uses dynamic shared memory")
    try:
        out = _run(kernel, plan, 1, table)
    except _NeedPair:
        out = _run(kernel, plan, 2, table)
    k, rda, rdv, demoted, slots, history, diagnostics, layout = out
    plan = replace(plan, rda=rda if demoted else None, rdv=rdv if demoted else None, demoted=demoted)
    for d in diagnostics:
        log.info("%s: %s", kernel.name, d)
    return DemotionResult(k, plan, layout, slots, history, diagnostics, kernel.reg_count)


def demote_multiword(kernel, plan, table=DEFAULT_LATENCY):
    """Same pass; a 64-bit candidate switches RDV to an aligned pair."""
    return demote(kernel, plan, table)
