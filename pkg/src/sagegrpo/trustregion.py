"""KL machinery: analytic Gaussian KL, log-prob KL estimate, moving anchor,
dual position/velocity penalty, linear warm-up and the feedback controller."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateDistributionError, InvalidArgumentError
from .flownet import step_transition


class KLMode(str, enum.Enum):
    NOKL = "nokl"
    FIXED = "fixed"
    STEPWISE = "stepwise"
    MOVING = "moving"
    DUAL = "dual"


def gaussian_kl(mu_theta, mu_ref, variance):
    """KL between N(mu_theta, v I) and N(mu_ref, v I): ||mu_theta - mu_ref||^2 / (2 v)."""
    if variance <= 0:
        raise DegenerateDistributionError("KL of zero-variance Gaussians")
    diff = np.asarray(mu_theta, dtype=float) - np.asarray(mu_ref, dtype=float)
    return np.sum(diff * diff, axis=-1) / (2.0 * variance)


def stepwise_kl_estimate(logp_old, logp_new):
    """Mean of log pi_old - log pi_new over samples drawn from pi_old."""
    old = np.asarray(logp_old, dtype=float)
    new = np.asarray(logp_new, dtype=float)
    if old.shape != new.shape:
        raise InvalidArgumentError(f"log-prob shapes differ: {old.shape} vs {new.shape}")
    return float(np.mean(old - new))


@dataclass
class TrustRegionState:
    """Policy snapshots for the KL references. Snapshots are independent copies."""

    mode: KLMode = KLMode.DUAL
    anchor_interval: int = 20
    beta_pos: float = 1.0
    beta_vel: float = 0.5
    init_net: object = None
    anchor_net: object = None
    prev_net: object = None
    step: int = 0

    def __post_init__(self):
        self.mode = KLMode(self.mode)
        if self.anchor_interval < 1:
            raise ConfigError("trustregion.anchor_interval", "must be >= 1")
        if self.beta_pos < 0 or self.beta_vel < 0:
            raise ConfigError("trustregion.beta", "weights must be non-negative")
        if self.mode is KLMode.DUAL and not (self.beta_pos > 0 and self.beta_vel > 0):
            raise ConfigError("trustregion.beta", "dual mode needs beta_pos > 0 and beta_vel > 0")

    @classmethod
    def start(cls, net, mode=KLMode.DUAL, anchor_interval=20, beta_pos=1.0, beta_vel=0.5):
        return cls(mode, anchor_interval, beta_pos, beta_vel,
                   init_net=net.copy(), anchor_net=net.copy(), prev_net=net.copy())

    def term_weights(self):
        """(init, anchor, prev) coefficients of the penalty for the active mode."""
        mode = self.mode
        if mode is KLMode.NOKL:
            return 0.0, 0.0, 0.0
        if mode is KLMode.FIXED:
            return 1.0, 0.0, 0.0
        if mode is KLMode.STEPWISE:
            return 0.0, 0.0, 1.0
        if mode is KLMode.MOVING:
            return 0.0, 1.0, 0.0
        return 0.0, self.beta_pos, self.beta_vel


@dataclass
class KLPenalty:
    penalty: float
    grad: np.ndarray
    init_kl: float
    anchor_kl: float
    stepwise_kl: float

    def __iter__(self):
        yield self.penalty
        yield self.grad


def kl_penalty(state, group, net):
    """Mode-weighted KL of pi_theta to its references over the group's states.

    Each per-step KL is the analytic equal-variance Gaussian KL between
    transition means, averaged over stochastic steps and group members. The
    gradient flows through the current policy's means only.
    """
    w_init, w_anchor, w_prev = state.term_weights()
    refs = {"init": state.init_net, "anchor": state.anchor_net, "prev": state.prev_net}
    for name, weight in zip(refs, (w_init, w_anchor, w_prev)):
        if weight > 0 and refs[name] is None:
            raise ConfigError("trustregion.mode",
                              f"{state.mode.value} needs the {name} snapshot")
    sums = dict.fromkeys(refs, 0.0)
    grad = np.zeros(net.n_params)
    steps = [t for t in range(group.T) if group.variances[t] > 0]
    if not steps:
        return KLPenalty(0.0, grad, 0.0, 0.0, 0.0)
    count = len(steps) * group.G
    coef = dict(zip(refs, (w_init, w_anchor, w_prev)))
    for t in steps:
        x, s_t, s_n = group.states[t], group.sigmas[t], group.sigmas[t + 1]
        params, jac, cache = step_transition(net, x, s_t, s_n, group.strategy, group.condition, t)
        upstream = np.zeros_like(x)
        for name, ref in refs.items():
            if ref is None:
                continue
            ref_params, _, _ = step_transition(ref, x, s_t, s_n, group.strategy,
                                               group.condition, t)
            kl = gaussian_kl(params.mean, ref_params.mean, params.variance)
            sums[name] += float(kl.sum())
            if coef[name] > 0:
                upstream += coef[name] * (params.mean - ref_params.mean) / params.variance
        if np.any(upstream):
            net.backward(cache, jac * upstream / count, grad)
    init_kl, anchor_kl, prev_kl = (sums[k] / count for k in refs)
    penalty = w_init * init_kl + w_anchor * anchor_kl + w_prev * prev_kl
    return KLPenalty(penalty, grad, init_kl, anchor_kl, prev_kl)


def snapshot_previous(state, net):
    """pi_{k-1} <- pi_theta; call right before the optimizer step."""
    state.prev_net = net.copy()
    return state


def maybe_refresh_anchor(state, net):
    """pi_ref <- pi_theta when ``state.step`` (completed optimizer steps) is a
    positive multiple of N. The loop calls this next to snapshot_previous,
    before the optimizer step. Returns True when the anchor was refreshed.
    """
    if state.step > 0 and state.step % state.anchor_interval == 0:
        state.anchor_net = net.copy()
        return True
    return False


# -- KL coefficient schedule -----------------------------------------------


@dataclass
class KlControllerState:
    lambda_min: float = 1e-7
    lambda_max: float = 1e-5
    warmup_steps: int = 100
    history_size: int = 10
    d_target: float = 1e-2
    band: float = 0.5
    lambda_kl: float = None
    history: deque = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ConfigError("controller.lambda_min", "need 0 < lambda_min <= lambda_max")
        if self.warmup_steps < 1 or self.history_size < 1:
            raise ConfigError("controller.warmup_steps", "warm-up and history must be >= 1")
        if self.lambda_kl is None:
            self.lambda_kl = self.lambda_min
        if self.history is None:
            self.history = deque(maxlen=self.history_size)

    def clip(self, value):
        return min(max(value, self.lambda_min), self.lambda_max)


def warmup_lambda(controller, k):
    """Linear ramp lambda_min -> lambda_max over the first K steps; afterwards the
    controller's current value is returned unchanged."""
    if k < 0:
        raise InvalidArgumentError("step must be >= 0")
    if k <= controller.warmup_steps:
        frac = k / controller.warmup_steps
        # convex-combination form keeps both endpoints exact in floating point
        controller.lambda_kl = (1.0 - frac) * controller.lambda_min + frac * controller.lambda_max
    return controller.lambda_kl


def observe_kl(controller, observed_kl):
    controller.history.append(float(observed_kl))


def controller_update(controller, observed_kl):
    """Proportional step on the mean of the last H KL values, then clip.

    Above (1 + band) * target the coefficient shrinks by 0.9, below
    (1 - band) * target it grows by 1.1.
    """
    observe_kl(controller, observed_kl)
    mean_kl = float(np.mean(controller.history))
    lam = controller.lambda_kl
    if mean_kl > (1 + controller.band) * controller.d_target:
        lam = 0.9 * lam
    elif mean_kl < (1 - controller.band) * controller.d_target:
        lam = 1.1 * lam
    controller.lambda_kl = controller.clip(lam)
    return controller.lambda_kl


def simulate_scalar_drift(mode, steps=1000, drift=1.0, lr=0.1, beta_pos=1.0, beta_vel=0.5,
                          anchor_interval=20, variance=1.0):
    """1-D policy mean pushed by a constant drift force, damped by KL gradients.

    Stepwise mode spends the whole budget beta_pos + beta_vel on the velocity
    term. Returns KL(pi_k || pi_0) for k = 1..steps.
    """
    mode = KLMode(mode)
    if mode not in (KLMode.STEPWISE, KLMode.DUAL):
        raise InvalidArgumentError("drift simulation supports stepwise and dual only")
    if mode is KLMode.STEPWISE:
        b_vel, b_pos = beta_pos + beta_vel, 0.0
    else:
        b_vel, b_pos = beta_vel, beta_pos
    mu = prev = anchor = 0.0
    out = np.empty(steps)
    for k in range(steps):
        grad_pen = (b_vel * (mu - prev) + b_pos * (mu - anchor)) / variance
        prev = mu
        mu = mu + lr * (drift - grad_pen)
        if (k + 1) % anchor_interval == 0:
            anchor = mu
        out[k] = mu * mu / (2 * variance)
    return out
