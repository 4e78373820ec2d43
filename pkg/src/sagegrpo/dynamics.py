"""SDE variance strategies, the Ito-corrected Euler-Maruyama step and Gaussian
transition densities.

Velocity convention: along the rectified path x = (1 - sigma) x0 + sigma z the
network predicts v = dx/dsigma = z - x0, so the denoised estimate is
x0_hat = x - sigma * v. Sampling runs toward sigma = 0; the displacement rate
handed to :func:`ode_step` and :func:`sde_step_params` is therefore the
data-ward velocity ``-v`` (see :func:`policy_transition`).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDistributionError,
    DomainError,
    InvalidArgumentError,
    SingularityError,
)

# Sign of the (Sigma_t / 2) * score drift term. Fixed by the Gaussian
# marginal-preservation oracle; guarded by tests/test_dynamics.py.
ITO_SIGN = 1.0

SCORE_CLIP = 1e3
DEFAULT_ETA = 0.3


class StrategyKind(str, enum.Enum):
    DANCE = "dance"
    FLOW = "flow"
    PRECISE = "precise"


@dataclass(frozen=True)
class VarianceStrategy:
    kind: StrategyKind = StrategyKind.PRECISE
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", StrategyKind(self.kind))
        except ValueError:
            raise InvalidArgumentError(f"unknown variance strategy {self.kind!r}") from None
        # eta == 0 is kept as the noise-free degenerate strategy
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise InvalidArgumentError(f"eta must be finite and >= 0, got {self.eta!r}")


@dataclass(frozen=True)
class TransitionParams:
    """Isotropic Gaussian N(mean, variance * I) for one sampling step."""

    mean: np.ndarray
    variance: float
    step_index: int = 0

    @property
    def std(self):
        return math.sqrt(self.variance)


def _check_interval(sigma_t, sigma_next):
    if sigma_next < 0:
        raise InvalidArgumentError(f"sigma_next must be >= 0, got {sigma_next!r}")
    if sigma_next > sigma_t:
        raise InvalidArgumentError(
            f"sigma_next ({sigma_next!r}) exceeds sigma_t ({sigma_t!r})"
        )


def step_variance(strategy, sigma_t, sigma_next):
    """Integrated noise variance Sigma_t injected over [sigma_next, sigma_t]."""
    sigma_t = float(sigma_t)
    sigma_next = float(sigma_next)
    _check_interval(sigma_t, sigma_next)
    delta = sigma_t - sigma_next
    if delta == 0.0:
        return 0.0
    eta2 = strategy.eta**2
    kind = strategy.kind
    if kind is StrategyKind.DANCE:
        return eta2 * delta
    if sigma_t >= 1.0:
        raise DomainError(f"{kind.value} variance is singular at sigma_t={sigma_t!r}")
    ratio = sigma_t / (1.0 - sigma_t)
    if kind is StrategyKind.FLOW:
        return eta2 * ratio * delta
    # -delta + log((1 - sigma_next) / (1 - sigma_t)), rearranged to avoid the
    # cancellation between the two terms for short intervals
    x = delta / (1.0 - sigma_t)
    return eta2 * (delta * ratio + (math.log1p(x) - x))


def step_std(strategy, sigma_t, sigma_next):
    return math.sqrt(step_variance(strategy, sigma_t, sigma_next))


def schedule_variances(schedule, strategy):
    return np.array([step_variance(strategy, a, b) for a, b in schedule.intervals()])


def score_estimate(x_t, v_pred, sigma_t, clip=SCORE_CLIP):
    """-(x_t - x0_hat) / sigma_t**2 with x0_hat = x_t - sigma_t * v_pred."""
    if sigma_t <= 0:
        raise SingularityError("the score estimate is singular at sigma = 0")
    x_t = np.asarray(x_t, dtype=float)
    x0_hat = x_t - sigma_t * np.asarray(v_pred, dtype=float)
    score = -(x_t - x0_hat) / sigma_t**2
    if clip is not None:
        score = np.clip(score, -clip, clip)
    return score


def sde_step_params(x_t, v_pred, score, sigma_t, sigma_next, strategy, step_index=0,
                    ito_sign=ITO_SIGN):
    """Transition of the Euler-Maruyama step with Ito correction.

    mean = x_t + v_pred * dt + ito_sign * (Sigma_t / 2) * score, dt = sigma_t - sigma_next.
    The caller adds sqrt(Sigma_t) * eps; Sigma_t is already integrated over the
    interval so no extra sqrt(dt) appears.
    """
    variance = step_variance(strategy, sigma_t, sigma_next)
    dt = float(sigma_t) - float(sigma_next)
    mean = np.asarray(x_t, dtype=float) + np.asarray(v_pred, dtype=float) * dt
    if variance > 0.0:
        mean = mean + ito_sign * 0.5 * variance * np.asarray(score, dtype=float)
    return TransitionParams(mean=mean, variance=variance, step_index=step_index)


def sample_transition(params, noise):
    noise = np.asarray(noise, dtype=float)
    if noise.shape[-1] != params.mean.shape[-1]:
        raise InvalidArgumentError("noise dimension does not match the state")
    return params.mean + math.sqrt(params.variance) * noise


def transition_log_prob(x_next, params):
    """log N(x_next; mean, variance * I), reduced over the last axis."""
    if params.variance <= 0.0:
        raise DegenerateDistributionError("log-density of a zero-variance transition")
    diff = np.asarray(x_next, dtype=float) - params.mean
    dim = diff.shape[-1]
    quad = np.sum(diff * diff, axis=-1)
    return -0.5 * dim * math.log(2 * math.pi * params.variance) - quad / (2 * params.variance)


def ode_step(x_t, v_pred, delta_sigma):
    if delta_sigma < 0:
        raise InvalidArgumentError("delta_sigma must be >= 0")
    return np.asarray(x_t, dtype=float) + np.asarray(v_pred, dtype=float) * delta_sigma


def policy_transition(x_t, v_net, sigma_t, sigma_next, strategy, step_index=0,
                      ito_sign=ITO_SIGN):
    """Transition of the sampling policy from a network velocity (dx/dsigma).

    Returns the params and d(mean)/d(v_net) per coordinate. The mean depends on
    v_net through the drift (-v_net * dt) and through the score (-v_net / sigma_t).
    """
    v_net = np.asarray(v_net, dtype=float)
    raw_score = -v_net / sigma_t
    score = np.clip(raw_score, -SCORE_CLIP, SCORE_CLIP)
    params = sde_step_params(x_t, -v_net, score, sigma_t, sigma_next, strategy,
                             step_index=step_index, ito_sign=ito_sign)
    dt = float(sigma_t) - float(sigma_next)
    unclipped = (np.abs(raw_score) <= SCORE_CLIP).astype(float)
    jac = -dt - ito_sign * 0.5 * params.variance / sigma_t * unclipped
    return params, jac


def velocity_sensitivity(sigma_t, sigma_next, strategy, kind="full"):
    """|d mean / d v_net| for an unclipped score.

    ``kind="full"`` is the exact solver sensitivity dt + Sigma_t / (2 sigma_t);
    ``kind="velocity"`` keeps only the drift term dt.
    """
    dt = float(sigma_t) - float(sigma_next)
    if kind == "velocity":
        return dt
    if kind != "full":
        raise InvalidArgumentError(f"unknown sensitivity kind {kind!r}")
    return dt + 0.5 * step_variance(strategy, sigma_t, sigma_next) / sigma_t
