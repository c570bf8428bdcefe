"""Variant generation, checking and selection for one kernel."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

from .compact import apply_renaming, build_relocation_space, compact, compact_bank_aware
from .demote import STRATEGIES, DemotionError, DemotionPlan, demote
from .isa import DEFAULT_LATENCY, print_kernel
from .occupancy import (
    MAXWELL, MIN_USEFUL_REGS, OccupancyError, demotion_shared_cost, kernel_occupancy, occupancy,
    occupancy_cliff_targets,
)
from .oracle import bank_conflict_check, scoreboard_check
from .postopt import OPTIONS, eliminate_redundant, reschedule, substitute_value_registers
from .predictor import DEFAULT_CURVE, Candidate, rank_variants, score_variants

log = logging.getLogger(__name__)

DEFAULT_MAX_VARIANTS = 64
PASS_ORDER = ("redundant", "subst", "resched")

OPTION_SUBSETS = sorted(
    (frozenset(c) for r in range(len(OPTIONS) + 1) for c in itertools.combinations(OPTIONS, r)),
    key=lambda s: (len(s), [OPTIONS.index(o) for o in sorted(s, key=OPTIONS.index)]),
)


def option_label(options):
    return "+".join(o for o in OPTIONS if o in options) or "none"


@dataclass
class Variant:
    name: str
    kernel: object
    strategy: Optional[str] = None
    target: Optional[int] = None
    options: frozenset = frozenset()
    demotion: Optional[object] = None
    source: str = "regdem"
    defects: list = field(default_factory=list)
    report: Optional[object] = None

    def sidecar(self):
        out = {
            "name": self.name,
            "source": self.source,
            "strategy": self.strategy,
            "target_reg_count": self.target,
            "options": sorted(self.options, key=OPTIONS.index),
            "reg_count": self.kernel.reg_count,
            "dynamic_shared": self.kernel.dynamic_shared,
            "defects": list(self.defects),
        }
        if self.demotion is not None:
            out["demotion"] = self.demotion.sidecar()
        if self.report is not None:
            out["prediction"] = self.report.to_json()
        return out


class VariantBuilder:
    """Builds demoted variants, sharing work between option sets with a
    common prefix of passes."""

    def __init__(self, kernel, table=DEFAULT_LATENCY, floor=MIN_USEFUL_REGS, max_shared=None):
        self.kernel = kernel
        self.table = table
        self.floor = floor
        self.max_shared = max_shared
        self._cache = {}

    def _demoted(self, strategy, target, bank):
        key = (strategy, target, bank)
        if key not in self._cache:
            plan = DemotionPlan(target, strategy, floor=self.floor, max_shared=self.max_shared, bank_aware=bank)
            result = demote(self.kernel, plan, self.table)
            k = result.kernel
            if result.demoted_count:
                space = build_relocation_space(k)
                k = apply_renaming(k, compact_bank_aware(space, k) if bank else compact(space))
            self._cache[key] = (result, k)
        return self._cache[key]

    def build(self, strategy, target, options=frozenset()):
        options = frozenset(options)
        unknown = options - set(OPTIONS)
        if unknown:
            raise ValueError(f"unknown options {sorted(unknown)}")
        bank = "bank" in options
        result, k = self._demoted(strategy, target, bank)
        if not result.demoted_count:
            return None
        key = (strategy, target, bank)
        passes = {"redundant": eliminate_redundant, "subst": substitute_value_registers,
                  "resched": lambda kern: reschedule(kern, table=self.table)}
        for name in PASS_ORDER:
            if name in options:
                key = key + (name,)
                if key not in self._cache:
                    self._cache[key] = passes[name](k)
                k = self._cache[key]
        name = f"{strategy}-r{target}-{option_label(options)}"
        return Variant(name, k, strategy, target, options, result)


def check_variant(variant, arch=MAXWELL, table=DEFAULT_LATENCY):
    """Defects that disqualify a variant from ranking."""
    k = variant.kernel
    defects = [f"hazard: {h}" for h in scoreboard_check(k, table)]
    defects += [f"bank conflict: {c}" for c in bank_conflict_check(k)]
    try:
        kernel_occupancy(k, arch)
    except OccupancyError as e:
        defects.append(f"occupancy: {e}")
    return defects


def generate_variants(kernel, targets, strategies=STRATEGIES, option_sets=OPTION_SUBSETS,
                      max_variants=DEFAULT_MAX_VARIANTS, builder=None, table=DEFAULT_LATENCY):
    """Demoted variants in a deterministic order, at most ``max_variants``.

    Cheaper option sets come first across all targets and strategies, so a
    tight cap keeps the plain variants of every target.
    """
    builder = builder or VariantBuilder(kernel, table)
    plan = sorted(
        itertools.product(range(len(option_sets)), range(len(strategies)), range(len(targets))),
    )
    out = []
    for oi, si, ti in plan:
        if len(out) >= max_variants:
            break
        try:
            v = builder.build(strategies[si], targets[ti], option_sets[oi])
        except DemotionError as e:
            log.info("no variant for %s at %d: %s", strategies[si], targets[ti], e)
            continue
        if v is not None:
            out.append(v)
    return out


@dataclass
class PipelineResult:
    chosen: Variant
    ranking: list  # Variant, best first
    dropped: list
    notices: list
    targets: list

    def report(self):
        return {
            "chosen": self.chosen.name,
            "targets": [{"reg_count": r, "occupancy": float(o)} for r, o in self.targets],
            "notices": list(self.notices),
            "ranking": [
                {"rank": i + 1, "name": v.name, "source": v.source, "options": option_label(v.options),
                 "reg_count": v.kernel.reg_count, "occupancy": float(v.report.occupancy),
                 "stall_count": float(v.report.stall_count), "stall_program": float(v.report.stall_program),
                 "stall_program_exact": str(v.report.stall_program)}
                for i, v in enumerate(self.ranking)
            ],
            "dropped": [{"name": v.name, "defects": v.defects} for v in self.dropped],
        }


def run_pipeline(kernel, arch=MAXWELL, table=DEFAULT_LATENCY, curve=DEFAULT_CURVE, target=None,
                 strategies=STRATEGIES, option_sets=OPTION_SUBSETS, max_variants=DEFAULT_MAX_VARIANTS,
                 external=(), floor=MIN_USEFUL_REGS, max_shared=None):
    """Generate, check, score and rank variants of ``kernel``.

    ``external`` holds extra (name, kernel) variants, e.g. compiler builds
    with a different register allocation. The original always competes.
    """
    notices = []
    original = Variant("original", kernel, source="original")
    variants = [original]
    variants += [Variant(name, k, source="external") for name, k in external]
    targets = []
    if target is not None:
        targets = [(target, None)]
    elif kernel.reg_count <= floor:
        notices.append(f"{kernel.reg_count} registers: already at or below {floor}, demotion has no effect")
    else:
        targets = occupancy_cliff_targets(kernel, arch)
        if not targets:
            notices.append("no occupancy cliff is reachable within the shared-memory budget")
    if targets:
        builder = VariantBuilder(kernel, table, floor=floor, max_shared=max_shared)
        variants += generate_variants(kernel, [t for t, _ in targets], strategies, option_sets,
                                      max_variants, builder, table)
    kept, dropped = [], []
    for v in variants:
        v.defects = check_variant(v, arch, table) if v.source == "regdem" else []
        if v.source != "regdem":
            try:
                kernel_occupancy(v.kernel, arch)
            except OccupancyError as e:
                v.defects.append(f"occupancy: {e}")
        if v.defects:
            log.warning("dropping %s: %s", v.name, "; ".join(v.defects))
            dropped.append(v)
        else:
            kept.append(v)
    if not kept:
        raise ValueError("no launchable variant")
    cands = [Candidate(v.name, v.kernel, v.options) for v in kept]
    score_variants(cands, arch, table, curve)
    for v, c in zip(kept, cands):
        v.report = c.report
    ranking = [kept[i] for i in rank_variants(cands)]
    resolved = [(t, o if o is not None else _target_occupancy(kernel, t, arch)) for t, o in targets]
    return PipelineResult(ranking[0], ranking, dropped, notices, resolved)


def _target_occupancy(kernel, target, arch):
    """Occupancy a forced target would reach, demotion shared memory included."""
    cost = demotion_shared_cost(max(kernel.reg_count - target, 0) + 2, kernel)
    try:
        return occupancy(max(target, 1), kernel.static_shared + cost, kernel.block_dim, arch)
    except OccupancyError:
        return 0


def emit_text(variant):
    return print_kernel(variant.kernel)
