"""Manifold-aware SDE exploration and dual-KL GRPO alignment for a toy 2-D rectified flow."""

from .dynamics import StrategyKind, VarianceStrategy, step_std, step_variance
from .errors import SageError
from .schedule import NoiseSchedule, build_schedule, clamp_schedule, linear_schedule

__version__ = "0.1.0"

__all__ = [
    "NoiseSchedule", "SageError", "StrategyKind", "VarianceStrategy",
    "build_schedule", "clamp_schedule", "linear_schedule", "step_std", "step_variance",
]
