"""Control flow, liveness, access counting, operand conflicts, barrier tracking."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from .isa import (
    DEFAULT_LATENCY, NUM_BARRIERS, AsmError, Instruction, Label, register_groups,
)

LOOP_FACTOR = 10


@dataclass
class BasicBlock:
    id: int
    start: int  # body position of first item
    end: int  # one past the last item
    label: Optional[str] = None
    positions: list = field(default_factory=list)  # body positions of instructions
    succs: list = field(default_factory=list)
    preds: list = field(default_factory=list)


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    backward: bool


@dataclass
class Cfg:
    kernel: object
    blocks: list
    edges: list
    entry: int = 0

    def block_of(self, pos):
        return self._owner[pos]

    def instructions(self, block):
        body = self.kernel.body
        return [(p, body[p]) for p in block.positions]

    @property
    def backward_edges(self):
        return [e for e in self.edges if e.backward]

    def __post_init__(self):
        self._owner = {}
        for b in self.blocks:
            for p in range(b.start, b.end):
                self._owner[p] = b.id


class CfgError(AsmError):
    pass


def build_cfg(kernel):
    """Split the body into basic blocks and connect them."""
    body = kernel.body
    leaders = {0}
    for pos, item in enumerate(body):
        if isinstance(item, Label):
            leaders.add(pos)
        elif item.is_jump and pos + 1 < len(body):
            leaders.add(pos + 1)
    starts = sorted(p for p in leaders if p < len(body))
    blocks = []
    label_block = {}
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else len(body)
        b = BasicBlock(len(blocks), start, end)
        if isinstance(body[start], Label):
            b.label = body[start].name
            label_block[b.label] = b.id
        b.positions = [p for p in range(start, end) if isinstance(body[p], Instruction)]
        blocks.append(b)
    if not blocks:
        blocks.append(BasicBlock(0, 0, 0))

    edges = []

    def link(src, dst):
        e = Edge(src, dst, backward=blocks[dst].start <= blocks[src].start)
        if e not in edges:
            edges.append(e)
            blocks[src].succs.append(dst)
            blocks[dst].preds.append(src)

    for b in blocks:
        last = body[b.positions[-1]] if b.positions else None
        falls = True
        if last is not None and last.opcode == "BRA":
            if last.target not in label_block:
                raise CfgError(f"unresolved branch target {last.target}", last.line)
            link(b.id, label_block[last.target])
            falls = last.predicate is not None
        elif last is not None and last.opcode == "EXIT":
            falls = last.predicate is not None
        if falls and b.id + 1 < len(blocks):
            link(b.id, b.id + 1)
    return Cfg(kernel, blocks, edges)


# --------------------------------------------------------------------------
# loops


def natural_loops(cfg):
    """Natural loop bodies keyed by header block, merged across back edges."""
    loops = defaultdict(set)
    for e in cfg.backward_edges:
        body = loops[e.dst]
        body.add(e.dst)
        stack = [e.src]
        while stack:
            n = stack.pop()
            if n in body:
                continue
            body.add(n)
            stack.extend(cfg.blocks[n].preds)
    return dict(loops)


def loop_depths(cfg):
    depth = [0] * len(cfg.blocks)
    for body in natural_loops(cfg).values():
        for b in body:
            depth[b] += 1
    return depth


# --------------------------------------------------------------------------
# liveness


@dataclass
class Liveness:
    live_in: list
    live_out: list
    before: dict  # body position -> words live before the instruction
    after: dict  # body position -> words live after the instruction

    def live_at_block_entry(self, block_id):
        return self.live_in[block_id]


def _transfer(inst, live):
    live = set(live)
    if inst.predicate is None:
        live -= inst.writes()
    return live | inst.reads()


def register_liveness(cfg):
    """Backward dataflow over register words; predicated writes do not kill."""
    n = len(cfg.blocks)
    live_in = [set() for _ in range(n)]
    live_out = [set() for _ in range(n)]
    body = cfg.kernel.body
    changed = True
    while changed:
        changed = False
        for b in reversed(cfg.blocks):
            out = set()
            for s in b.succs:
                out |= live_in[s]
            live = out
            for p in reversed(b.positions):
                live = _transfer(body[p], live)
            if out != live_out[b.id] or live != live_in[b.id]:
                live_out[b.id], live_in[b.id] = out, live
                changed = True
    before, after = {}, {}
    for b in cfg.blocks:
        live = set(live_out[b.id])
        for p in reversed(b.positions):
            after[p] = frozenset(live)
            live = _transfer(body[p], live)
            before[p] = frozenset(live)
    return Liveness(live_in, live_out, before, after)


# --------------------------------------------------------------------------
# access counts and operand conflicts


def _unit_refs(inst, groups):
    return [groups[ref.index] for ref in inst.registers()]


def access_counts(cfg, strategy="static"):
    """Estimated access count per register unit, keyed by the unit's lead word.

    ``static`` counts operand occurrences; ``cfg`` weights each block's
    occurrences by LOOP_FACTOR per enclosing loop.
    """
    if strategy not in ("static", "cfg", "cfg-weighted"):
        raise ValueError(f"unknown counting strategy {strategy!r}")
    groups = register_groups(cfg.kernel)
    depth = loop_depths(cfg) if strategy != "static" else [0] * len(cfg.blocks)
    counts = defaultdict(int)
    body = cfg.kernel.body
    for b in cfg.blocks:
        weight = LOOP_FACTOR ** depth[b.id]
        for p in b.positions:
            for unit in _unit_refs(body[p], groups):
                counts[unit[0]] += weight
    return dict(counts)


@dataclass
class ConflictGraph:
    nodes: set
    edges: set  # frozenset pairs

    def degree(self, node):
        return sum(1 for e in self.edges if node in e)

    def neighbours(self, node):
        return {m for e in self.edges if node in e for m in e if m != node}

    def has_edge(self, a, b):
        return frozenset((a, b)) in self.edges


def operand_conflicts(kernel):
    groups = register_groups(kernel)
    nodes, edges = set(), set()
    for inst in kernel.instructions:
        units = sorted({u[0] for u in _unit_refs(inst, groups)})
        nodes.update(units)
        for i, a in enumerate(units):
            for b in units[i + 1:]:
                edges.add(frozenset((a, b)))
    return ConflictGraph(nodes, edges)


# --------------------------------------------------------------------------
# barrier tracker


@dataclass(frozen=True)
class TrackerEntry:
    inst: Instruction
    elapsed: object = 0


@dataclass(frozen=True)
class BarrierTracker:
    entries: tuple = (None,) * NUM_BARRIERS

    def __getitem__(self, barrier):
        return self.entries[barrier - 1]

    def is_free(self, barrier):
        return self.entries[barrier - 1] is None

    def occupied(self):
        return {b for b in range(1, NUM_BARRIERS + 1) if not self.is_free(b)}

    @classmethod
    def empty(cls):
        return cls()


def reset_tracker(tracker=None):
    return BarrierTracker()


def tracker_update(tracker, inst, stall=None):
    """Register ``inst``'s barriers, age every entry, free the waited ones.

    ``stall`` overrides the annotated stall count (the predictor passes its
    throughput-scaled value). Jumps leave the tracker empty.
    """
    if inst.is_jump:
        return BarrierTracker()
    stall = inst.control.stall if stall is None else stall
    entries = list(tracker.entries)
    for b in (inst.control.read_barrier, inst.control.write_barrier):
        if b is not None:
            entries[b - 1] = TrackerEntry(inst, 0)
    entries = [None if e is None else TrackerEntry(e.inst, e.elapsed + stall) for e in entries]
    for b in inst.control.wait_set:
        entries[b - 1] = None
    return BarrierTracker(tuple(entries))


def remaining_latency(entry, table=DEFAULT_LATENCY):
    return max(0, table.latency(entry.inst.klass) - entry.elapsed)


def get_barrier(tracker, exclude=(), table=DEFAULT_LATENCY):
    """Free barrier with the lowest index, else the one closest to completing."""
    best, best_stall = None, None
    for b in range(1, NUM_BARRIERS + 1):
        if b in exclude:
            continue
        entry = tracker[b]
        if entry is None:
            return b
        stall = remaining_latency(entry, table)
        if best_stall is None or stall < best_stall:
            best, best_stall = b, stall
    if best is None:
        raise ValueError("every barrier is excluded")
    return best


def to_dot(cfg):
    lines = [f'digraph "{cfg.kernel.name}" {{']
    for b in cfg.blocks:
        name = b.label or f"B{b.id}"
        lines.append(f'  b{b.id} [label="{name} ({len(b.positions)} inst)"];')
    for e in cfg.edges:
        style = ' [style=dashed, label="back"]' if e.backward else ""
        lines.append(f"  b{e.src} -> b{e.dst}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"
