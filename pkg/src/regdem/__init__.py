"""Register demotion into shared memory for a SASS-like GPU assembly dialect."""

from .isa import DEFAULT_LATENCY, Instruction, Kernel, Label, instruction_class, parse_kernel, print_kernel
from .occupancy import MAXWELL, ArchProfile, occupancy, occupancy_cliff_targets
from .demote import DemotionPlan, demote, shared_location
from .compact import apply_renaming, build_relocation_space, compact, compact_bank_aware
from .postopt import apply_options
from .predictor import DEFAULT_CURVE, OccupancyCurve, program_stalls, select_variant
from .oracle import bank_conflict_check, execute, scoreboard_check
from .pipeline import run_pipeline

__all__ = [
    "DEFAULT_LATENCY", "Instruction", "Kernel", "Label", "instruction_class", "parse_kernel", "print_kernel",
    "MAXWELL", "ArchProfile", "occupancy", "occupancy_cliff_targets",
    "DemotionPlan", "demote", "shared_location",
    "apply_renaming", "build_relocation_space", "compact", "compact_bank_aware",
    "apply_options",
    "DEFAULT_CURVE", "OccupancyCurve", "program_stalls", "select_variant",
    "bank_conflict_check", "execute", "scoreboard_check",
    "run_pipeline",
]

__version__ = "0.1.0"
