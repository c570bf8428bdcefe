"""Clean-ups applied to demoted code, each confined to a basic block.

* eliminate_redundant: drop reloads of a slot a register still holds and
  stores that are overwritten before the slot is read again.
* reschedule: hoist demoted loads away from their users and drop read
  barriers on stores whose value register is not rewritten in time to matter.
* substitute_value_registers: serve a demoted value from a dead register so
  several demoted values can be live at once.
"""

from __future__ import annotations

from .analysis import BarrierTracker, build_cfg, get_barrier, register_liveness, tracker_update
from .demote import (
    _barriers_of, demoted_base, demoted_value, is_demoted_access, prune_waits, rdv_guards,
)
from .isa import DEFAULT_LATENCY, ControlInfo, Instruction, RegisterRef, register_groups

OPTIONS = ("redundant", "subst", "resched", "bank")


def _nop(stall, waits):
    return Instruction("NOP", (), ControlInfo(stall=stall, wait_set=frozenset(waits)))


def _blocks(kernel):
    return build_cfg(kernel).blocks


# --------------------------------------------------------------------------
# redundant loads and stores


def _redundant_loads(kernel, block, rda):
    body = kernel.body
    holds = {}  # register word -> slot offset it currently mirrors
    dead = set()
    for p in block.positions:
        inst = body[p]
        if is_demoted_access(inst, kernel, rda):
            slot = inst.memory_operand.offset
            v = demoted_value(inst).index
            if inst.is_load:
                if inst.predicate is None and holds.get(v) == slot:
                    dead.add(p)
                    continue
                holds.pop(v, None)
                if inst.predicate is None:
                    holds[v] = slot
            else:
                for w in [w for w, s in holds.items() if s == slot]:
                    del holds[w]
                if inst.predicate is None:
                    holds[v] = slot
            continue
        if rda.index in inst.writes():
            holds.clear()
        for w in inst.writes():
            holds.pop(w, None)
    return dead


def _dead_stores(kernel, block, rda, skip):
    body = kernel.body
    dead = set()
    positions = [p for p in block.positions if p not in skip]
    for i, p in enumerate(positions):
        inst = body[p]
        if not (is_demoted_access(inst, kernel, rda) and inst.is_store):
            continue
        slot = inst.memory_operand.offset
        for q in positions[i + 1:]:
            later = body[q]
            if rda.index in later.writes():
                break
            if is_demoted_access(later, kernel, rda) and later.memory_operand.offset == slot:
                if later.is_store and later.predicate is None:
                    dead.add(p)
                break
    return dead


def _remove(kernel, dead):
    """Delete instructions at ``dead`` positions, handing their waits on."""
    body = list(kernel.body)
    carry = set()
    for p in range(len(body)):
        item = body[p]
        if p in dead:
            carry |= item.control.wait_set
            body[p] = None
            continue
        if not carry:
            continue
        if isinstance(item, Instruction) and not carry & _barriers_of(item):
            body[p] = item.waiting(*carry)
        else:
            # a label or a conflicting setter: keep a NOP in the removed slot
            prev = max(q for q in dead if q < p)
            body[prev] = _nop(kernel.body[prev].control.stall, carry)
        carry = set()
    if carry:
        last = max(dead)
        body[last] = _nop(kernel.body[last].control.stall, carry)
    return kernel.with_body([item for item in body if item is not None])


def eliminate_redundant(kernel, rda=None):
    rda = rda or demoted_base(kernel)
    if rda is None:
        return kernel.copy()
    dead = set()
    for block in _blocks(kernel):
        loads = _redundant_loads(kernel, block, rda)
        dead |= loads | _dead_stores(kernel, block, rda, loads)
    if not dead:
        return kernel.copy()
    return prune_waits(_remove(kernel, dead))


# --------------------------------------------------------------------------
# rescheduling


def _replay(seq):
    tracker = BarrierTracker()
    for inst in seq:
        tracker = tracker_update(tracker, inst)
    return tracker


def _hoist_limit(seq, i, kernel, rda):
    load = seq[i]
    vw = load.writes()
    slot = load.memory_operand.offset
    j = i
    while j > 0:
        above = seq[j - 1]
        if above.is_jump or (above.reads() | above.writes()) & vw:
            break
        if rda.index in above.writes():
            break
        if load.predicate is not None and load.predicate.index in above.predicate_writes():
            break
        if above.opcode in ("LDS", "STS"):
            if not is_demoted_access(above, kernel, rda):
                break
            if above.is_store and above.memory_operand.offset == slot:
                break
        if _barriers_of(above) & load.control.wait_set:
            break
        j -= 1
    return j


def _hoist(seq, i, kernel, rda, table):
    load = seq[i]
    j = _hoist_limit(seq, i, kernel, rda)
    if j == i:
        return False
    old = _barriers_of(load)
    user = next((u for u in range(i + 1, len(seq)) if seq[u].control.wait_set & old), None)
    if user is None:
        return False
    tracker = _replay(seq[:j])
    waits = set(load.control.wait_set) | rdv_guards(tracker, load.writes())
    exclude = set(waits) | _barriers_of(seq[user])
    for inst in seq[j:i] + seq[i + 1:user + 1]:
        if inst is seq[user]:
            continue
        exclude |= _barriers_of(inst) | inst.control.wait_set
    try:
        rb = get_barrier(tracker, exclude, table)
        wb = get_barrier(tracker, exclude | {rb}, table)
    except ValueError:
        return False
    moved = load.with_control(read_barrier=rb, write_barrier=wb, wait_set=frozenset(waits))
    seq[user] = seq[user].waiting(rb, wb)
    del seq[i]
    seq.insert(j, moved)
    return True


def _drop_store_barriers(seq, kernel, rda, table):
    limit = table.latency("shared-memory")
    ends_in_jump = bool(seq) and seq[-1].is_jump
    for i, inst in enumerate(seq):
        if not (is_demoted_access(inst, kernel, rda) and inst.is_store):
            continue
        if inst.control.read_barrier is None:
            continue
        vw = set(demoted_value(inst).words())
        distance = 0
        rewritten = False
        for later in seq[i:]:
            if later is not inst and later.writes() & vw:
                rewritten = True
                break
            distance += later.control.stall
        if (rewritten and distance >= limit) or (not rewritten and ends_in_jump):
            seq[i] = inst.with_control(read_barrier=None)


def reschedule(kernel, rda=None, table=DEFAULT_LATENCY):
    rda = rda or demoted_base(kernel)
    if rda is None:
        return kernel.copy()
    body = list(kernel.body)
    for block in _blocks(kernel):
        if not block.positions:
            continue
        seq = [body[p] for p in block.positions]
        # a hoist only reorders seq[:i + 1], so later loads keep their index
        for i in range(len(seq)):
            if is_demoted_access(seq[i], kernel, rda) and seq[i].is_load:
                _hoist(seq, i, kernel, rda, table)
        _drop_store_barriers(seq, kernel, rda, table)
        for p, inst in zip(block.positions, seq):
            body[p] = inst
    return prune_waits(kernel.with_body(body))


# --------------------------------------------------------------------------
# value-register substitution


def _chain(seq, start, v):
    """Positions served by the value defined at ``seq[start]``; None when the
    chain cannot be renamed on its own."""
    out = [start]
    for k in range(start + 1, len(seq)):
        inst = seq[k]
        touches = v in inst.reads() or v in inst.writes()
        if v in inst.writes():
            if v in inst.reads() or inst.predicate is not None:
                return None, None
            return out, k
        if touches:
            if inst.is_memory and v in inst.reads():
                # a late reader must be drained right away, or the substitute
                # could be overwritten under it once the chain ends
                rb = inst.control.read_barrier
                if rb is None or k + 1 >= len(seq) or rb not in seq[k + 1].control.wait_set:
                    return None, None
            out.append(k)
    return out, None


def _chain_start(inst, v, kernel, rda):
    if inst.predicate is not None or v not in inst.writes():
        return False
    if is_demoted_access(inst, kernel, rda):
        return True
    return v not in inst.reads()


def _rename_word(inst, old, new):
    return inst.map_registers(lambda r: RegisterRef(new, 1) if r.index == old and r.width == 1 else r)


def _substitute_once(kernel, rda, values, tried):
    cfg = build_cfg(kernel)
    live = register_liveness(cfg)
    groups = register_groups(kernel)
    body = kernel.body
    reserved = {rda.index} | values
    paired = {w for w, (lead, width) in groups.items() if width > 1}
    top = kernel.reg_count
    for block in cfg.blocks:
        seq = [body[p] for p in block.positions]
        for s, inst in enumerate(seq):
            p = block.positions[s]
            for v in sorted(values & inst.writes()):
                if (p, v) in tried or v in paired:
                    continue
                tried.add((p, v))
                if not _chain_start(inst, v, kernel, rda):
                    continue
                members, end = _chain(seq, s, v)
                if members is None or len(members) < 2:
                    continue
                last = block.positions[members[-1]]
                if end is None and v in live.after[last]:
                    continue
                span = [block.positions[k] for k in range(s, members[-1] + 1)]
                busy = set()
                for q in span:
                    busy |= live.before[q] | live.after[q] | body[q].reads() | body[q].writes()
                for earlier in seq[:s]:
                    if earlier.is_memory:
                        busy |= earlier.reads() | earlier.writes()
                free = [f for f in range(top)
                        if f not in busy and f not in reserved and f not in paired and f not in groups]
                free = free or [f for f in range(top)
                                if f not in busy and f not in reserved and f not in paired]
                if not free:
                    continue
                f = free[0]
                new = list(body)
                for k in members:
                    q = block.positions[k]
                    new[q] = _rename_word(body[q], v, f)
                return kernel.with_body(new)
    return None


def substitute_value_registers(kernel, rda=None):
    """Rename demoted-value chains onto registers that are dead across them."""
    rda = rda or demoted_base(kernel)
    if rda is None:
        return kernel.copy()
    # only the original value registers are replaced, never their substitutes
    values = {demoted_value(i).index for i in kernel.instructions if is_demoted_access(i, kernel, rda)}
    tried = set()
    out = kernel
    while True:
        nxt = _substitute_once(out, rda, values, tried)
        if nxt is None:
            return out if out is not kernel else kernel.copy()
        out = nxt


def apply_options(kernel, options, rda=None, table=DEFAULT_LATENCY):
    """Run the enabled passes in pipeline order."""
    rda = rda or demoted_base(kernel)
    if "redundant" in options:
        kernel = eliminate_redundant(kernel, rda)
    if "subst" in options:
        kernel = substitute_value_registers(kernel, rda)
    if "resched" in options:
        kernel = reschedule(kernel, rda, table)
    return kernel
