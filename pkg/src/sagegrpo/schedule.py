"""Noise-level grids sigma_1 > ... > sigma_T >= 0 driving every sampler."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_FLOOR = 3e-3


class Regime(str, enum.Enum):
    DEFAULT = "default"
    FLOWGRPO = "flowgrpo"
    CLAMPED = "clamped"


@dataclass(frozen=True)
class NoiseSchedule:
    """Ordered noise levels, terminal level included (length T + 1)."""

    sigmas: tuple
    regime: Regime = Regime.DEFAULT
    floor_one_minus_sigma: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        if s.ndim != 1 or s.size < 2:
            raise InvalidArgumentError("a schedule needs at least two levels")
        if np.any(s < 0) or np.any(s > 1):
            raise InvalidArgumentError("noise levels must lie in [0, 1]")
        if np.any(np.diff(s) > 0):
            raise InvalidArgumentError("noise levels must be non-increasing")
        object.__setattr__(self, "sigmas", tuple(float(v) for v in s))
        object.__setattr__(self, "regime", Regime(self.regime))

    @property
    def T(self):
        return len(self.sigmas) - 1

    def as_array(self):
        return np.asarray(self.sigmas, dtype=float)

    def intervals(self):
        """(sigma_t, sigma_next) pairs in sampling order."""
        return list(zip(self.sigmas[:-1], self.sigmas[1:]))

    def deltas(self):
        s = self.as_array()
        return s[:-1] - s[1:]


def linear_schedule(T, sigma_max=1.0):
    if int(T) != T or T < 1:
        raise InvalidArgumentError(f"T must be a positive integer, got {T!r}")
    if not 0 < sigma_max <= 1:
        raise InvalidArgumentError(f"sigma_max must lie in (0, 1], got {sigma_max!r}")
    return NoiseSchedule(tuple(np.linspace(sigma_max, 0.0, int(T) + 1)), Regime.DEFAULT)


def clamp_schedule(schedule, floor=DEFAULT_FLOOR):
    """Cap every level at 1 - floor so that (1 - sigma) >= floor."""
    if not 0 < floor < 1:
        raise InvalidArgumentError(f"floor must lie in (0, 1), got {floor!r}")
    s = np.minimum(schedule.as_array(), 1.0 - floor)
    return NoiseSchedule(tuple(s), Regime.CLAMPED, float(floor))


def flowgrpo_style_schedule(T, sigma_max=1.0):
    """Linear grid whose head is repeated, so the first interval has zero width.

    Mirrors samplers that substitute sigma_max for the leading level.
    """
    if int(T) != T or T < 2:
        raise InvalidArgumentError(f"T must be an integer >= 2, got {T!r}")
    if not 0 < sigma_max <= 1:
        raise InvalidArgumentError(f"sigma_max must lie in (0, 1], got {sigma_max!r}")
    tail = np.linspace(sigma_max, 0.0, int(T))
    return NoiseSchedule((float(sigma_max),) + tuple(tail), Regime.FLOWGRPO)


def build_schedule(regime, T, sigma_max=1.0, floor=DEFAULT_FLOOR):
    """Construct a schedule from its serialized (regime, T, sigma_max, floor) form."""
    try:
        regime = Regime(regime)
    except ValueError:
        raise InvalidArgumentError(f"unknown schedule regime {regime!r}") from None
    if regime is Regime.DEFAULT:
        return linear_schedule(T, sigma_max)
    if regime is Regime.FLOWGRPO:
        return flowgrpo_style_schedule(T, sigma_max)
    return clamp_schedule(linear_schedule(T, sigma_max), floor)
