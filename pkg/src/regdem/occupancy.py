"""Theoretical occupancy from register, shared-memory and thread limits."""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction

MIN_USEFUL_REGS = 32


class OccupancyError(ValueError):
    pass


@dataclass(frozen=True)
class ArchProfile:
    regs_per_sm: int = 65536
    max_threads_per_sm: int = 2048
    max_blocks_per_sm: int = 32
    shared_per_sm: int = 96 * 1024
    shared_per_block_limit: int = 48 * 1024
    warp_size: int = 32
    reg_alloc_granularity: int = 1
    shared_alloc_granularity: int = 256
    max_regs_per_thread: int = 255

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.max_threads_per_sm % self.warp_size:
            raise ValueError("warp_size must divide max_threads_per_sm")

    @classmethod
    def from_mapping(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown profile keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in values.items()})


MAXWELL = ArchProfile()


def _round_up(value, granularity):
    return -(-value // granularity) * granularity


def resident_limits(regs_per_thread, shared_per_block, block_dim, arch=MAXWELL):
    """Blocks per SM allowed by each resource taken alone."""
    if block_dim % arch.warp_size:
        raise OccupancyError(f"block_dim {block_dim} is not a multiple of {arch.warp_size}")
    if regs_per_thread < 1:
        raise OccupancyError("regs_per_thread must be at least 1")
    if regs_per_thread > arch.max_regs_per_thread:
        raise OccupancyError(f"{regs_per_thread} registers exceed the per-thread maximum")
    if shared_per_block > arch.shared_per_block_limit:
        raise OccupancyError(
            f"{shared_per_block} B shared memory exceeds the per-block limit of {arch.shared_per_block_limit} B")
    regs = _round_up(regs_per_thread, arch.reg_alloc_granularity)
    limits = {
        "registers": arch.regs_per_sm // (regs * block_dim),
        "threads": arch.max_threads_per_sm // block_dim,
        "blocks": arch.max_blocks_per_sm,
    }
    if shared_per_block > 0:
        limits["shared"] = arch.shared_per_sm // _round_up(shared_per_block, arch.shared_alloc_granularity)
    return limits


def occupancy(regs_per_thread, shared_per_block, block_dim, arch=MAXWELL):
    """Resident threads over the SM maximum, as an exact fraction."""
    limits = resident_limits(regs_per_thread, shared_per_block, block_dim, arch)
    blocks = min(limits.values())
    if blocks == 0:
        limiter = min(limits, key=limits.get)
        raise OccupancyError(f"kernel cannot launch: zero resident blocks (limited by {limiter})")
    return Fraction(blocks * block_dim, arch.max_threads_per_sm)


def kernel_occupancy(kernel, arch=MAXWELL):
    return occupancy(max(kernel.reg_count, 1), kernel.static_shared + kernel.dynamic_shared,
                     kernel.block_dim, arch)


def demotion_shared_cost(demoted, kernel):
    """Bytes of shared memory consumed by ``demoted`` slots, plus the padding
    that aligns the static allocation to 4 bytes."""
    pad = _round_up(kernel.static_shared, 4) - kernel.static_shared
    return demoted * kernel.block_dim * 4 + pad


def occupancy_cliff_targets(kernel, arch=MAXWELL, shared_budget=None, reg_count=None, overhead=2):
    """Register counts that reach successively higher occupancy steps.

    Each target is the largest count attaining its step. Demoting down to a
    target costs ``reg_count - target + overhead`` slots (the overhead being
    the address and value registers); targets whose shared-memory cost does
    not fit ``shared_budget`` are dropped.
    """
    current = kernel.reg_count if reg_count is None else reg_count
    if shared_budget is None:
        shared_budget = arch.shared_per_block_limit - kernel.static_shared - kernel.dynamic_shared
    if current <= MIN_USEFUL_REGS or shared_budget <= 0:
        return []
    base_shared = kernel.static_shared + kernel.dynamic_shared
    try:
        best = occupancy(current, base_shared, kernel.block_dim, arch)
    except OccupancyError:
        best = Fraction(0)
    targets = []
    for r in range(current - 1, MIN_USEFUL_REGS - 1, -1):
        cost = demotion_shared_cost(current - r + overhead, kernel)
        if cost > shared_budget:
            break
        try:
            occ = occupancy(r, base_shared + cost, kernel.block_dim, arch)
        except OccupancyError:
            continue
        if occ > best:
            targets.append((r, occ))
            best = occ
    return targets
