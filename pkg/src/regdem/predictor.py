"""Static stall-cycle estimate and variant ranking.

Per block, each instruction's annotated stall is scaled by occupancy and by
the contention of its functional units; waits on memory barriers add
whatever latency the elapsed stalls have not yet covered. Blocks inside
loops are weighted, everything is summed, and the total is finally scaled by
a relative execution-time curve over occupancy so variants with different
occupancy can be compared.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .analysis import LOOP_FACTOR, BarrierTracker, TrackerEntry, build_cfg, loop_depths
from .isa import DEFAULT_LATENCY, GLOBAL_MEMORY, SHARED_MEMORY
from .occupancy import MAXWELL, kernel_occupancy


def _frac(x):
    return x if isinstance(x, Fraction) else Fraction(str(x))


class OccupancyCurve:
    """Piecewise-linear relative execution time f(x) over occupancy x.

    Values are normalised so f(1) = 1. Below the smallest tabulated point
    the first segment is extended.
    """

    def __init__(self, points):
        pts = sorted((_frac(x), _frac(y)) for x, y in dict(points).items())
        if len(pts) < 2:
            raise ValueError("curve needs at least two points")
        if pts[-1][0] != 1:
            raise ValueError("curve must define f(1.0)")
        if any(x <= 0 or x > 1 for x, _ in pts):
            raise ValueError("curve points must lie in (0, 1]")
        if any(b[1] > a[1] for a, b in zip(pts, pts[1:])):
            raise ValueError("curve must be non-increasing in occupancy")
        top = pts[-1][1]
        if top <= 0:
            raise ValueError("f(1.0) must be positive")
        self.xs = [x for x, _ in pts]
        self.ys = [y / top for _, y in pts]

    def __call__(self, x):
        x = _frac(x)
        if not 0 < x <= 1:
            raise ValueError(f"occupancy {x} outside (0, 1]")
        i = bisect_left(self.xs, x)
        if i < len(self.xs) and self.xs[i] == x:
            return self.ys[i]
        i = max(1, min(i, len(self.xs) - 1))
        x0, x1 = self.xs[i - 1], self.xs[i]
        y0, y1 = self.ys[i - 1], self.ys[i]
        return y0 + (y1 - y0) * (x - x0) / (x1 - x0)

    def points(self):
        return list(zip(self.xs, self.ys))

    def __repr__(self):
        return f"OccupancyCurve({', '.join(f'{x}: {y}' for x, y in self.points())})"


# declared default, not measured data
DEFAULT_CURVE = OccupancyCurve({"1.0": "1.0", "0.75": "1.15", "0.5": "1.6", "0.25": "2.8"})


@dataclass
class StallReport:
    per_block: dict  # block id -> loop-weighted stall cycles
    raw_block: dict  # block id -> stall cycles before loop weighting
    stall_count: Fraction
    occupancy: Fraction
    stall_program: Optional[Fraction] = None

    def to_json(self):
        return {
            "per_block": {str(b): float(v) for b, v in self.per_block.items()},
            "per_block_exact": {str(b): str(v) for b, v in self.per_block.items()},
            "stall_count": float(self.stall_count),
            "stall_count_exact": str(self.stall_count),
            "occupancy": float(self.occupancy),
            "stall_program": None if self.stall_program is None else float(self.stall_program),
        }


def instruction_stall(inst, occupancy, table=DEFAULT_LATENCY):
    """Annotated stall scaled by occupancy and unit contention."""
    return Fraction(inst.control.stall) * _frac(occupancy) * table.contention(inst.klass)


def _memory_penalty(entry, table):
    if entry is None:
        return 0
    klass = entry.inst.klass
    if klass not in (GLOBAL_MEMORY, SHARED_MEMORY):
        return 0
    latency = table.latency(klass)
    return latency - entry.elapsed if entry.elapsed < latency else 0


def _set_barriers(tracker, inst):
    entries = list(tracker.entries)
    for b in (inst.control.read_barrier, inst.control.write_barrier):
        if b is not None:
            entries[b - 1] = TrackerEntry(inst, 0)
    return BarrierTracker(tuple(entries))


def _age(tracker, stall):
    return BarrierTracker(tuple(None if e is None else TrackerEntry(e.inst, e.elapsed + stall)
                                for e in tracker.entries))


def block_stall(instructions, occupancy, table=DEFAULT_LATENCY):
    """Stall cycles of one straight-line block (tracker starts empty)."""
    tracker = BarrierTracker()
    total = Fraction(0)
    for inst in instructions:
        stall = instruction_stall(inst, occupancy, table)
        tracker = _set_barriers(tracker, inst)
        for w in sorted(inst.control.wait_set):
            total += _memory_penalty(tracker[w], table)
        tracker = _age(tracker, stall)
        total += stall
    return total


def block_stalls(cfg, occupancy, table=DEFAULT_LATENCY):
    return {b.id: block_stall([inst for _, inst in cfg.instructions(b)], occupancy, table) for b in cfg.blocks}


def weight_loops(cfg, per_block, factor=LOOP_FACTOR):
    depth = loop_depths(cfg)
    return {b: v * factor ** depth[b] for b, v in per_block.items()}


def program_stalls(kernel, arch=MAXWELL, table=DEFAULT_LATENCY, occupancy=None):
    cfg = build_cfg(kernel)
    occ = kernel_occupancy(kernel, arch) if occupancy is None else _frac(occupancy)
    raw = block_stalls(cfg, occ, table)
    weighted = weight_loops(cfg, raw)
    return StallReport(weighted, raw, sum(weighted.values(), Fraction(0)), occ)


def adjust_occupancy(report, occ_max, curve=DEFAULT_CURVE):
    occ_max = _frac(occ_max)
    if not 0 < report.occupancy <= 1 or not 0 < occ_max <= 1:
        raise ValueError("occupancy outside (0, 1]")
    return curve(report.occupancy) / curve(occ_max) * report.stall_count


@dataclass
class Candidate:
    """A kernel competing in variant selection."""
    name: str
    kernel: object
    options: frozenset = field(default_factory=frozenset)
    report: Optional[StallReport] = None

    @property
    def score(self):
        return self.report.stall_program


def score_variants(candidates, arch=MAXWELL, table=DEFAULT_LATENCY, curve=DEFAULT_CURVE):
    for c in candidates:
        if c.report is None:
            c.report = program_stalls(c.kernel, arch, table)
    occ_max = max(c.report.occupancy for c in candidates)
    for c in candidates:
        c.report.stall_program = adjust_occupancy(c.report, occ_max, curve)
    return candidates


def rank_variants(candidates):
    """Indices ordered best first: lowest score, then most options, then input order."""
    return sorted(range(len(candidates)),
                  key=lambda i: (candidates[i].score, -len(candidates[i].options), i))


def select_variant(candidates, arch=MAXWELL, table=DEFAULT_LATENCY, curve=DEFAULT_CURVE):
    """Best candidate among ``candidates`` (Candidate objects or (kernel, options) pairs)."""
    if not candidates:
        raise ValueError("no variants to select from")
    cands = [c if isinstance(c, Candidate) else Candidate(f"v{i}", c[0], frozenset(c[1]))
             for i, c in enumerate(candidates)]
    score_variants(cands, arch, table, curve)
    return cands[rank_variants(cands)[0]]
