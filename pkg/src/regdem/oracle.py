"""Single-warp interpreter plus static hazard and bank-conflict checks.

The interpreter executes 32 lanes in lockstep with per-lane predication and
a reconvergence stack. Memory instructions complete ``latency`` cycles after
issue: they read their source registers and write their destination at
completion, so a consumer that skips the barrier wait observes the stale
value.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .analysis import build_cfg
from .demote import demoted_base, is_demoted_access
from .isa import (
    DEFAULT_LATENCY, RZ, GLOBAL_MEMORY, Immediate, Instruction, Label,
    RegisterRef, SpecialRegister, is_variable_latency,
)
from .occupancy import MAXWELL, kernel_occupancy

WARP = 32
LANES = np.arange(WARP, dtype=np.uint32)
DEFAULT_FUEL = 200_000
U32 = np.uint32


class ExecutionError(RuntimeError):
    pass


class FuelExhausted(ExecutionError):
    pass


class MemoryFault(ExecutionError):
    pass


@dataclass
class WarpState:
    regs: np.ndarray
    preds: np.ndarray
    shared: np.ndarray
    global_mem: np.ndarray
    pc: int = 0
    cycle: int = 0
    executed: int = 0
    contention: Fraction = Fraction(0)  # issue slots, set when the run ends
    issued: Counter = field(default_factory=Counter)  # class -> instructions

    def to_json(self, registers=None):
        regs = range(RZ) if registers is None else registers
        return {
            "cycles": int(self.cycle),
            "executed": int(self.executed),
            "registers": {f"R{r}": [int(v) for v in self.regs[r]] for r in regs if self.regs[r].any()},
            "global": self.global_mem.tobytes().hex(),
            "shared": self.shared.tobytes().hex(),
        }


@dataclass(order=True)
class _Pending:
    done_at: int
    seq: int
    inst: Instruction = field(compare=False)
    mask: np.ndarray = field(compare=False)
    finished: bool = field(default=False, compare=False)


def _ipdom_positions(kernel):
    """Reconvergence body position for each block's terminating branch."""
    cfg = build_cfg(kernel)
    n = len(cfg.blocks)
    exit_node = n
    succs = [list(b.succs) or [exit_node] for b in cfg.blocks]
    everything = set(range(n + 1))
    pdom = [set(everything) for _ in range(n)] + [{exit_node}]
    changed = True
    while changed:
        changed = False
        for b in reversed(range(n)):
            new = set.intersection(*(pdom[s] for s in succs[b])) | {b}
            if new != pdom[b]:
                pdom[b] = new
                changed = True
    result = {}
    for b in cfg.blocks:
        if not b.positions:
            continue
        strict = pdom[b.id] - {b.id}
        # the immediate post-dominator is the strict one post-dominated by all others
        ipdom = None
        for c in strict:
            if all(o in pdom[c] for o in strict):
                ipdom = c
                break
        pos = None if ipdom in (None, exit_node) else cfg.blocks[ipdom].start
        result[b.positions[-1]] = pos
    return result


class WarpInterpreter:
    def __init__(self, kernel, table=DEFAULT_LATENCY, fuel=DEFAULT_FUEL):
        self.kernel = kernel
        self.table = table
        self.fuel = fuel
        self.body = kernel.body
        self.labels = {item.name: pos for pos, item in enumerate(self.body) if isinstance(item, Label)}
        self.reconverge = _ipdom_positions(kernel)

    # -- helpers ---------------------------------------------------------

    def _value(self, st, op, tid):
        if isinstance(op, RegisterRef):
            return st.regs[op.index]
        if isinstance(op, Immediate):
            return np.full(WARP, op.value & 0xFFFFFFFF, dtype=U32)
        if isinstance(op, SpecialRegister):
            if op.name == "SR_TID.X":
                return tid
            return np.zeros(WARP, dtype=U32)
        raise ExecutionError(f"cannot read operand {op}")

    def _write(self, st, ref, values, mask):
        if ref.is_zero:
            return
        st.regs[ref.index][mask] = values[mask]

    def _pair(self, st, ref):
        lo = st.regs[ref.index].astype(np.uint64)
        hi = st.regs[ref.index + 1].astype(np.uint64)
        return (lo | (hi << np.uint64(32))).view(np.float64)

    def _write_pair(self, st, ref, values, mask):
        bits = values.view(np.uint64)
        st.regs[ref.index][mask] = (bits & np.uint64(0xFFFFFFFF)).astype(U32)[mask]
        st.regs[ref.index + 1][mask] = (bits >> np.uint64(32)).astype(U32)[mask]

    def _addresses(self, st, mem, mask, space):
        addr = st.regs[mem.base.index].astype(np.int64) + mem.offset
        active = addr[mask]
        if (active % 4).any():
            raise MemoryFault(f"misaligned {space} access")
        limit = (st.shared if space == "shared" else st.global_mem).size * 4
        if ((active < 0) | (active >= limit)).any():
            raise MemoryFault(f"{space} access out of bounds ({int(active.min())}..{int(active.max())}, size {limit})")
        return (addr // 4).astype(np.int64)

    def _complete(self, st, op):
        inst, mask = op.inst, op.mask
        op.finished = True
        if not mask.any():
            return
        mem = inst.memory_operand
        space = "global" if inst.klass == GLOBAL_MEMORY else "shared"
        array = st.global_mem if space == "global" else st.shared
        idx = self._addresses(st, mem, mask, space)
        if inst.is_load:
            dest = inst.operands[0]
            values = np.zeros(WARP, dtype=U32)
            values[mask] = array[idx[mask]]
            self._write(st, dest, values, mask)
        else:
            values = st.regs[inst.operands[1].index]
            for lane in np.flatnonzero(mask):
                array[idx[lane]] = values[lane]

    def _drain_until(self, st, cycle):
        while self.pending and self.pending[0].done_at <= cycle:
            op = heapq.heappop(self.pending)
            if not op.finished:
                self._complete(st, op)

    def _drain_all(self, st):
        if self.pending:
            st.cycle = max(st.cycle, max(op.done_at for op in self.pending))
        self._drain_until(st, st.cycle)
        self.barriers = {}

    # -- main loop -------------------------------------------------------

    def run(self, global_mem, tid_base=0, shared_words=None):
        k = self.kernel
        if shared_words is None:
            shared_words = max(1, -(-(k.static_shared + k.dynamic_shared) // 4))
        st = WarpState(
            regs=np.zeros((RZ + 1, WARP), dtype=U32),
            preds=np.zeros((8, WARP), dtype=bool),
            shared=np.zeros(shared_words, dtype=U32),
            global_mem=np.array(global_mem, dtype=U32).copy(),
        )
        tid = (LANES + np.uint32(tid_base)).astype(U32)
        self.pending = []
        self.barriers = {}
        self.seq = 0
        exited = np.zeros(WARP, dtype=bool)
        stack = [[0, np.ones(WARP, dtype=bool), None]]
        body = self.body
        with np.errstate(all="ignore"):
            while stack:
                entry = stack[-1]
                pc, mask, rpc = entry
                mask = mask & ~exited
                if not mask.any():
                    stack.pop()
                    continue
                if pc is not None and pc == rpc:
                    stack.pop()
                    continue
                if pc is None:
                    raise ExecutionError("active lanes lost their reconvergence point")
                if pc >= len(body):
                    exited |= mask
                    stack.pop()
                    continue
                item = body[pc]
                if isinstance(item, Label):
                    entry[0] = pc + 1
                    continue
                st.executed += 1
                if st.executed > self.fuel:
                    raise FuelExhausted(f"fuel of {self.fuel} instructions exhausted")
                st.pc = pc
                self._issue(st, item)
                active = mask
                if item.predicate is not None:
                    p = st.preds[item.predicate.index]
                    active = mask & (~p if item.predicate.negated else p)
                if item.opcode == "BRA":
                    self._drain_all(st)
                    taken = active
                    rest = mask & ~taken
                    target = self.labels[item.target]
                    if not rest.any():
                        entry[0] = target
                    elif not taken.any():
                        entry[0] = pc + 1
                    else:
                        r = self.reconverge.get(pc)
                        entry[0] = r
                        entry[1] = mask
                        stack.append([pc + 1, rest, r])
                        stack.append([target, taken, r])
                elif item.opcode == "EXIT":
                    self._drain_all(st)
                    exited |= active
                    entry[0] = pc + 1
                else:
                    self._execute(st, item, active, tid)
                    entry[0] = pc + 1
                st.cycle += item.control.stall
                st.regs[RZ] = 0
            self._drain_all(st)
        st.contention = sum((n * self.table.contention(k) for k, n in st.issued.items()), Fraction(0))
        return st

    def _issue(self, st, inst):
        ctl = inst.control
        if ctl.wait_set:
            deadline = st.cycle
            for b in ctl.wait_set:
                for op in self.barriers.get(b, ()):
                    if not op.finished:
                        deadline = max(deadline, op.done_at)
                self.barriers.pop(b, None)
            st.cycle = deadline
        self._drain_until(st, st.cycle)
        st.issued[inst.klass] += 1

    def _execute(self, st, inst, m, tid):
        op = inst.opcode
        ops = inst.operands
        if op == "NOP":
            return
        if is_variable_latency(inst):
            self.seq += 1
            pend = _Pending(st.cycle + self.table.latency(inst.klass), self.seq, inst, m.copy())
            heapq.heappush(self.pending, pend)
            for b in (inst.control.read_barrier, inst.control.write_barrier):
                if b is not None:
                    self.barriers.setdefault(b, []).append(pend)
            return
        if op == "MOV":
            self._write(st, ops[0], self._value(st, ops[1], tid).astype(U32), m)
        elif op == "S2R":
            self._write(st, ops[0], self._value(st, ops[1], tid).astype(U32), m)
        elif op in ("IADD", "IMUL", "SHL"):
            a = self._value(st, ops[1], tid)
            b = self._value(st, ops[2], tid)
            if op == "IADD":
                r = a + b
            elif op == "IMUL":
                r = a * b
            else:
                r = a << (b & U32(31))
            self._write(st, ops[0], r.astype(U32), m)
        elif op == "ISETP":
            a = self._value(st, ops[1], tid).view(np.int32)
            b = self._value(st, ops[2], tid).view(np.int32)
            cmp = {"LT": a < b, "LE": a <= b, "GT": a > b, "GE": a >= b, "EQ": a == b, "NE": a != b}
            st.preds[ops[0].index][m] = cmp[inst.modifier][m]
        elif op in ("FADD", "FMUL", "FFMA"):
            vals = [self._value(st, o, tid).view(np.float32) for o in ops[1:]]
            if op == "FADD":
                r = vals[0] + vals[1]
            elif op == "FMUL":
                r = vals[0] * vals[1]
            else:
                r = vals[0] * vals[1] + vals[2]
            self._write(st, ops[0], r.astype(np.float32).view(U32), m)
        elif op in ("DADD", "DMUL"):
            a = self._pair(st, ops[1])
            b = self._pair(st, ops[2])
            r = a + b if op == "DADD" else a * b
            if not ops[0].is_zero:
                self._write_pair(st, ops[0], r, m)
        else:
            raise ExecutionError(f"no semantics for {op}")


def execute(kernel, init=None, tid_base=0, table=DEFAULT_LATENCY, fuel=DEFAULT_FUEL, global_words=None,
            shared_words=None):
    """Run one warp of ``kernel`` over the global memory image ``init``.

    ``init`` is a sequence of 32-bit words (or bytes). Returns the final
    :class:`WarpState`.
    """
    if init is None:
        init = np.zeros(global_words or 1024, dtype=U32)
    elif isinstance(init, (bytes, bytearray)):
        init = np.frombuffer(bytes(init).ljust(-(-len(init) // 4) * 4, b"\0"), dtype="<u4")
    return WarpInterpreter(kernel, table, fuel).run(init, tid_base, shared_words)


def same_observable_state(a, b, static_shared=0):
    """Global memory and the user's static shared region match bit for bit."""
    if not np.array_equal(a.global_mem, b.global_mem):
        return False
    words = -(-static_shared // 4)
    return np.array_equal(a.shared[:words], b.shared[:words])


# --------------------------------------------------------------------------
# static scoreboard


@dataclass(frozen=True)
class Hazard:
    kind: str  # RAW, WAR, WAW, unawaited, reuse
    position: int
    detail: str
    setter: Optional[int] = None

    def __str__(self):
        return f"{self.kind} at body[{self.position}]: {self.detail}"


@dataclass
class _InFlight:
    pos: int
    reads: set
    writes: set
    rb: Optional[int]
    wb: Optional[int]
    ready: int


def scoreboard_check(kernel, table=DEFAULT_LATENCY, strict=False):
    """Statically find barrier hazards.

    Reports reads of registers still being written by an unawaited memory
    instruction (RAW), writes to registers an in-flight instruction has yet
    to read (WAR) or write (WAW). With ``strict`` the barrier discipline is
    checked too: a barrier re-armed while still pending (``reuse``) or left
    pending at a label, jump or the end of the kernel (``unawaited``).
    An in-flight instruction without the relevant barrier is considered
    complete once the accumulated stall count covers its latency.
    """
    hazards = []
    flights = []
    armed = {}
    cycle = 0

    def boundary(pos, what):
        if strict:
            for b, setter in sorted(armed.items()):
                hazards.append(Hazard("unawaited", pos, f"barrier {b} still pending at {what}", setter))
        armed.clear()

    for pos, item in enumerate(kernel.body):
        if isinstance(item, Label):
            boundary(pos, f"label {item.name}")
            continue
        ctl = item.control
        for w in ctl.wait_set:
            armed.pop(w, None)
            for f in flights:
                if f.rb == w:
                    f.reads = set()
                if f.wb == w:
                    f.reads = set()
                    f.writes = set()
        for f in flights:
            if f.ready <= cycle:
                f.reads, f.writes = set(), set()
        flights = [f for f in flights if f.reads or f.writes]
        reads, writes = item.reads(), item.writes()
        for f in flights:
            for w in sorted(reads & f.writes):
                hazards.append(Hazard("RAW", pos, f"R{w} read before its load at body[{f.pos}] completes", f.pos))
            for w in sorted(writes & f.reads):
                hazards.append(Hazard("WAR", pos, f"R{w} overwritten before body[{f.pos}] reads it", f.pos))
            for w in sorted(writes & f.writes):
                hazards.append(Hazard("WAW", pos, f"R{w} written while body[{f.pos}] still writes it", f.pos))
        for b in (ctl.read_barrier, ctl.write_barrier):
            if b is None:
                continue
            if strict and b in armed:
                hazards.append(Hazard("reuse", pos, f"barrier {b} re-armed while pending", armed[b]))
            armed[b] = pos
        if is_variable_latency(item):
            flights.append(_InFlight(pos, set(reads), set(writes), ctl.read_barrier, ctl.write_barrier,
                                     cycle + table.latency(item.klass)))
        cycle += ctl.stall
        if item.is_jump:
            boundary(pos, item.opcode)
            flights = []
    boundary(len(kernel.body), "end of kernel")
    return hazards


# --------------------------------------------------------------------------
# shared-memory bank conflicts


@dataclass(frozen=True)
class BankConflict:
    position: int
    bank: int
    lanes: tuple
    addresses: tuple

    def __str__(self):
        return f"body[{self.position}]: lanes {self.lanes} hit bank {self.bank} at {self.addresses}"


def _lane_values(kernel, reg, block_dim, tid_base=0):
    """Per-lane value of ``reg`` from its straight-line definitions."""
    tid = (LANES + np.uint32(tid_base)).astype(U32)
    vals = {}

    def get(op):
        if isinstance(op, Immediate):
            return np.full(WARP, op.value & 0xFFFFFFFF, dtype=U32)
        if isinstance(op, SpecialRegister):
            return tid if op.name == "SR_TID.X" else np.zeros(WARP, dtype=U32)
        if isinstance(op, RegisterRef):
            if op.is_zero:
                return np.zeros(WARP, dtype=U32)
            if op.index in vals:
                return vals[op.index]
        raise ValueError(f"cannot evaluate {op} statically")

    with np.errstate(all="ignore"):
        for inst in kernel.instructions:
            if reg.index not in inst.writes():
                continue
            ops = inst.operands
            if inst.opcode in ("MOV", "S2R"):
                vals[reg.index] = get(ops[1]).astype(U32)
            elif inst.opcode == "IADD":
                vals[reg.index] = (get(ops[1]) + get(ops[2])).astype(U32)
            elif inst.opcode == "IMUL":
                vals[reg.index] = (get(ops[1]) * get(ops[2])).astype(U32)
            elif inst.opcode == "SHL":
                vals[reg.index] = (get(ops[1]) << (get(ops[2]) & U32(31))).astype(U32)
            else:
                raise ValueError(f"{inst.opcode} defines the base register; cannot evaluate")
    if reg.index not in vals:
        raise ValueError(f"R{reg.index} is never defined")
    return vals[reg.index]


def bank_conflict_check(kernel, block_dim=None, rda=None, banks=32):
    """Report demoted shared accesses whose 32 lanes collide in a bank."""
    rda = rda or demoted_base(kernel)
    if rda is None:
        return []
    base = _lane_values(kernel, rda, block_dim or kernel.block_dim)
    out = []
    for pos, item in enumerate(kernel.body):
        if not isinstance(item, Instruction) or not is_demoted_access(item, kernel, rda):
            continue
        addr = base.astype(np.int64) + item.memory_operand.offset
        words = addr // 4
        bank = words % banks
        seen = {}
        for lane in range(WARP):
            seen.setdefault(int(bank[lane]), set()).add((lane, int(words[lane])))
        for b, entries in sorted(seen.items()):
            if len({w for _, w in entries}) > 1:
                lanes = tuple(sorted(l for l, _ in entries))
                out.append(BankConflict(pos, b, lanes, tuple(int(addr[l]) for l in lanes)))
    return out


# --------------------------------------------------------------------------
# timing oracle


def oracle_time(kernel, init=None, arch=MAXWELL, table=DEFAULT_LATENCY, schedulers=4, state=None):
    """Cycles per warp on a fully loaded SM.

    Resident warps overlap each other's latency, so a warp costs the larger
    of its dynamic latency spread over the resident warps and its own share
    of issue bandwidth.
    """
    st = state if state is not None else execute(kernel, init, table=table)
    warps = kernel_occupancy(kernel, arch) * (arch.max_threads_per_sm // arch.warp_size)
    return max(Fraction(st.cycle) / warps, st.contention / schedulers)
