"""Group rollouts, composite rewards, group-normalized advantages, the temporal
gradient equalizer and the GRPO policy loss."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import (
    ITO_SIGN,
    sample_transition,
    step_variance,
    transition_log_prob,
    velocity_sensitivity,
)
from .errors import DegenerateDistributionError, InvalidArgumentError, RolloutDivergedError
from .flownet import policy_gradient, step_transition

DEFAULT_EPS = 1e-8

# Setting A / Setting B weight vectors of the three-component reward
SETTING_A_WEIGHTS = (1.0, 1.0, 1.0)
SETTING_B_WEIGHTS = (0.5, 0.5, 1.0)


class RewardTag(str, enum.Enum):
    TARGET_MODE = "target_mode"
    COMPACTNESS = "compactness"
    CUSTOM = "custom"


@dataclass(frozen=True)
class RewardComponent:
    tag: RewardTag
    weight: float = 1.0
    index: int | None = None
    fn: Callable | None = None
    name: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "tag", RewardTag(self.tag))
        except ValueError:
            raise InvalidArgumentError(f"unknown reward tag {self.tag!r}") from None
        if not np.isfinite(self.weight):
            raise InvalidArgumentError("reward weights must be finite")
        if self.tag is RewardTag.TARGET_MODE and self.index is None:
            raise InvalidArgumentError("target_mode needs a mode index")
        if self.tag is RewardTag.CUSTOM and self.fn is None:
            raise InvalidArgumentError("custom reward components need a function")
        if self.name is None:
            label = self.tag.value
            if self.index is not None:
                label = f"{label}_{self.index}"
            object.__setattr__(self, "name", label)


@dataclass
class RewardSpec:
    components: list
    mode_centers: np.ndarray

    def __post_init__(self):
        if not self.components:
            raise InvalidArgumentError("a reward needs at least one component")
        self.components = [c if isinstance(c, RewardComponent) else RewardComponent(*c)
                           for c in self.components]
        self.mode_centers = np.atleast_2d(np.asarray(self.mode_centers, dtype=float))
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate reward component names {names}")

    @property
    def names(self):
        return [c.name for c in self.components]

    @classmethod
    def three_component(cls, mode_centers, target=0, weights=SETTING_A_WEIGHTS):
        """compactness, nearest-mode adherence and target-mode proximity."""
        centers = np.atleast_2d(np.asarray(mode_centers, dtype=float))

        def nearest_mode(x0, condition):
            d = np.linalg.norm(x0[:, None, :] - centers[None], axis=-1)
            return -d.min(axis=1)

        w_vq, w_mq, w_ta = weights
        return cls([
            RewardComponent(RewardTag.COMPACTNESS, w_vq),
            RewardComponent(RewardTag.CUSTOM, w_mq, fn=nearest_mode, name="nearest_mode"),
            RewardComponent(RewardTag.TARGET_MODE, w_ta, index=target),
        ], centers)


def component_scores(spec, x0, condition=None):
    """Unweighted S_k(x0) for every component; x0 has shape (G, D) or (D,)."""
    x0 = np.asarray(x0, dtype=float)
    single = x0.ndim == 1
    x = x0[None, :] if single else x0
    scores = {}
    for comp in spec.components:
        if comp.tag is RewardTag.TARGET_MODE:
            s = -np.linalg.norm(x - spec.mode_centers[comp.index], axis=-1)
        elif comp.tag is RewardTag.COMPACTNESS:
            s = -np.sum(x * x, axis=-1) / 16.0
        else:
            s = np.asarray(comp.fn(x, condition), dtype=float)
        scores[comp.name] = s[0] if single else s
    return scores


def composite_reward(spec, x0, condition=None):
    scores = component_scores(spec, x0, condition)
    return sum(c.weight * scores[c.name] for c in spec.components)


def group_advantages(rewards, epsilon=DEFAULT_EPS):
    """(r - mean) / (population std + epsilon)."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise InvalidArgumentError("advantages need a group of at least two rewards")
    centered = r - r.mean()
    # second pass removes the rounding error of the first mean, which epsilon
    # would otherwise amplify when all rewards are (nearly) equal
    centered -= centered.mean()
    return centered / (np.sqrt(np.mean(centered * centered)) + epsilon)


# -- rollouts --------------------------------------------------------------


@dataclass
class RolloutGroup:
    """G trajectories sharing one condition.

    states[t] is x at sigmas[t] (shape (T+1, G, D)); means/log_probs describe
    the transition states[t] -> states[t+1] under the generating policy.
    Zero-variance steps carry NaN log-probs.
    """

    sigmas: np.ndarray
    states: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_probs: np.ndarray
    strategy: object
    condition: int | None = None
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    component_rewards: dict = field(default_factory=dict)

    @property
    def G(self):
        return self.states.shape[1]

    @property
    def T(self):
        return self.states.shape[0] - 1

    @property
    def final(self):
        return self.states[-1]

    def score(self, spec, epsilon=DEFAULT_EPS):
        self.component_rewards = component_scores(spec, self.final, self.condition)
        self.rewards = composite_reward(spec, self.final, self.condition)
        self.advantages = group_advantages(self.rewards, epsilon)
        return self


def member_rngs(seed, G):
    """Per-member generators: member i uses SeedSequence(seed).spawn(G)[i]."""
    entropy = list(seed) if isinstance(seed, (tuple, list)) else seed
    return [np.random.default_rng(s) for s in np.random.SeedSequence(entropy).spawn(G)]


def rollout_group(net, schedule, strategy, condition=None, G=8, seed=0, ito_sign=ITO_SIGN):
    """Sample G SDE trajectories from N(0, I) at sigma_1 down to sigma_T."""
    if G < 2:
        raise InvalidArgumentError("a rollout group needs G >= 2")
    sigmas = schedule.as_array()
    T = len(sigmas) - 1
    # row 0 seeds the initial state, rows 1..T the per-step noises
    noise = np.stack([rng.standard_normal((T + 1, net.dim)) for rng in member_rngs(seed, G)],
                     axis=1)
    states = np.empty((T + 1, G, net.dim))
    means = np.empty((T, G, net.dim))
    variances = np.empty(T)
    log_probs = np.full((T, G), np.nan)
    states[0] = noise[0]
    for t in range(T):
        params, _, _ = step_transition(net, states[t], sigmas[t], sigmas[t + 1], strategy,
                                       condition, t, ito_sign)
        x_next = sample_transition(params, noise[t + 1])
        if not np.all(np.isfinite(x_next)):
            raise RolloutDivergedError(t)
        states[t + 1] = x_next
        means[t] = params.mean
        variances[t] = params.variance
        if params.variance > 0:
            log_probs[t] = transition_log_prob(x_next, params)
    return RolloutGroup(sigmas, states, means, variances, log_probs, strategy, condition)


# -- temporal gradient equalizer ------------------------------------------


@dataclass
class EqualizerState:
    proxies: np.ndarray
    weights: np.ndarray
    epsilon: float = DEFAULT_EPS
    sensitivities: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.weights <= 0) or not np.isfinite(np.median(self.proxies)):
            raise InvalidArgumentError("equalizer weights must be positive with a finite median")


def gradient_scale_proxy(sigma_t, sigma_next, strategy, sensitivity="full"):
    """N_t = lambda_t / sqrt(Sigma_t) with lambda_t = |d mean / d v| (see velocity_sensitivity)."""
    variance = step_variance(strategy, sigma_t, sigma_next)
    if variance <= 0:
        raise DegenerateDistributionError("gradient-scale proxy of a zero-variance step")
    return velocity_sensitivity(sigma_t, sigma_next, strategy, sensitivity) / np.sqrt(variance)


def equalizer_weights(proxies, epsilon=DEFAULT_EPS):
    n = np.asarray(proxies, dtype=float)
    if n.size == 0:
        raise InvalidArgumentError("need at least one proxy")
    return np.median(n) / (n + epsilon)


def build_equalizer(schedule, strategy, epsilon=DEFAULT_EPS, sensitivity="full", enabled=True):
    sens = np.array([velocity_sensitivity(a, b, strategy, sensitivity)
                     for a, b in schedule.intervals()])
    proxies = np.array([gradient_scale_proxy(a, b, strategy, sensitivity)
                        for a, b in schedule.intervals()])
    weights = equalizer_weights(proxies, epsilon) if enabled else np.ones_like(proxies)
    return EqualizerState(proxies, weights, epsilon, sens)


# -- loss ------------------------------------------------------------------


def grpo_loss_and_grad(net, group, equalizer, ito_sign=ITO_SIGN):
    """-(1/G) sum_i A_i sum_t S_t log pi_theta(x_{t+1}^i | x_t^i, c) and its gradient."""
    if group.advantages is None:
        raise InvalidArgumentError("score the group before computing the loss")
    adv = np.asarray(group.advantages, dtype=float)
    s = np.asarray(equalizer.weights, dtype=float)
    if adv.shape != (group.G,) or s.shape != (group.T,):
        raise InvalidArgumentError(
            f"expected {group.G} advantages and {group.T} equalizer weights, "
            f"got {adv.shape} and {s.shape}"
        )
    weights = s[:, None] * adv[None, :] / group.G
    value, grad = policy_gradient(net, group.sigmas, group.states[:-1], group.states[1:],
                                  weights, group.strategy, group.condition, ito_sign)
    return -value, -grad
