"""Oracle-backed checks shared by the ``verify`` subcommand and the test suite.

Every check returns a :class:`CheckResult` holding the measured error and
the tolerance it was held to, so reports can print both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..dynamics import (
    ITO_SIGN,
    StrategyKind,
    VarianceStrategy,
    sample_transition,
    sde_step_params,
    step_variance,
)
from ..flownet import VelocityNet, step_transition
from ..oracle import (
    expected_normal_norm,
    finite_diff_grad,
    gaussian_marginal_std,
    gaussian_score,
    gaussian_velocity,
    quadrature_variance,
    two_sample_distance,
)
from ..rlcore import (
    build_equalizer,
    group_advantages,
    grpo_loss_and_grad,
    rollout_group,
)
from ..schedule import clamp_schedule, linear_schedule
from ..trustregion import (
    KlControllerState,
    KLMode,
    TrustRegionState,
    controller_update,
    kl_penalty,
    warmup_lambda,
)


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        text = f"{status}  {self.name:<34} measured={self.measured:.6g} tolerance={self.tolerance:.6g}"
        return f"{text}  {self.detail}" if self.detail else text


def _le(name, measured, tol, detail=""):
    return CheckResult(name, float(measured), float(tol), bool(measured <= tol), detail)


# -- variance formulas -----------------------------------------------------


def check_quadrature(n_triples=100, panels=1_000_000, seed=0, tol=1e-8):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_triples):
        sigma_t = rng.uniform(0.01, 0.997)
        sigma_next = rng.uniform(0.0, sigma_t)
        eta = rng.uniform(0.05, 1.5)
        closed = step_variance(VarianceStrategy(StrategyKind.PRECISE, eta), sigma_t, sigma_next)
        quad = quadrature_variance(sigma_t, sigma_next, eta, panels)
        worst = max(worst, abs(closed - quad) / quad)
    return _le("quadrature_equivalence", worst, tol, f"{n_triples} triples, {panels} panels")


def _dominance_grid(n=50):
    for sigma_t in np.linspace(0.01, 0.997, n):
        for frac in np.linspace(0.0, 0.98, n):
            yield sigma_t, sigma_t * frac


def check_dominance(n=50, eta=0.7):
    """max (Precise - Flow) / Flow over the grid; must not be positive."""
    precise = VarianceStrategy(StrategyKind.PRECISE, eta)
    flow = VarianceStrategy(StrategyKind.FLOW, eta)
    worst = -math.inf
    for sigma_t, sigma_next in _dominance_grid(n):
        p = step_variance(precise, sigma_t, sigma_next)
        f = step_variance(flow, sigma_t, sigma_next)
        worst = max(worst, (p - f) / f)
    return _le("precise_le_flow", worst, 0.0, f"{n}x{n} grid")


def taylor_gaps(sigma_t=0.5, deltas=(1e-2, 1e-3, 1e-4), eta=0.7):
    precise = VarianceStrategy(StrategyKind.PRECISE, eta)
    flow = VarianceStrategy(StrategyKind.FLOW, eta)
    gaps = []
    for d in deltas:
        f = step_variance(flow, sigma_t, sigma_t - d)
        gaps.append(abs(step_variance(precise, sigma_t, sigma_t - d) - f) / f)
    return np.array(gaps)


def check_taylor(sigma_t=0.5, deltas=(1e-2, 1e-3, 1e-4)):
    """Successive gap ratios must track the step-size ratios within a factor 2."""
    gaps = taylor_gaps(sigma_t, deltas)
    deltas = np.asarray(deltas)
    expected = deltas[:-1] / deltas[1:]
    observed = gaps[:-1] / gaps[1:]
    worst = float(np.max(np.abs(np.log2(observed / expected))))
    return _le("taylor_limit_linear", worst, 1.0, "max |log2(gap ratio / step ratio)|")


def check_additivity(n_triples=100, seed=1, tol=1e-10, panels=200_000):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_triples):
        a, b, c = np.sort(rng.uniform(0.0, 0.997, 3))[::-1]
        eta = rng.uniform(0.05, 1.5)
        s = VarianceStrategy(StrategyKind.PRECISE, eta)
        whole = step_variance(s, a, c)
        worst = max(worst, abs(whole - step_variance(s, a, b) - step_variance(s, b, c)) / whole)
        if i < 5:
            # quadrature splits exactly when the panel widths agree
            q_whole = quadrature_variance(a, c, eta, 2 * panels)
            q_split = (quadrature_variance(a, (a + c) / 2, eta, panels)
                       + quadrature_variance((a + c) / 2, c, eta, panels))
            worst = max(worst, abs(q_whole - q_split) / q_whole)
    return _le("variance_additivity", worst, tol)


# -- marginal preservation -------------------------------------------------


def marginal_levels(T, eta, n_samples=20_000, ito_sign=ITO_SIGN, seed=0, floor=3e-3):
    """Euler-Maruyama with the exact Gaussian velocity and score.

    Data are N(0, I) in 2-D, so the marginal at every level is
    N(0, ((1 - s)^2 + s^2) I). Yields (level, sigma, samples).
    """
    schedule = clamp_schedule(linear_schedule(T), floor)
    strategy = VarianceStrategy(StrategyKind.PRECISE, eta)
    rng = np.random.default_rng(seed)
    sigmas = schedule.as_array()
    x = gaussian_marginal_std(sigmas[0]) * rng.standard_normal((n_samples, 2))
    for t, (s_t, s_n) in enumerate(schedule.intervals()):
        drift = -gaussian_velocity(x, s_t)
        params = sde_step_params(x, drift, gaussian_score(x, s_t), s_t, s_n, strategy,
                                 step_index=t, ito_sign=ito_sign)
        x = sample_transition(params, rng.standard_normal(x.shape))
        yield t + 1, s_n, x


def check_marginals(T=10, eta=0.7, n_samples=20_000, ito_sign=ITO_SIGN, seed=0,
                    energy_every=1, mean_tol=0.05, var_tol=0.05):
    """Worst relative variance error, worst mean gap and energy rejections across levels."""
    worst_mean = worst_var = 0.0
    rejected = []
    for level, sigma, x in marginal_levels(T, eta, n_samples, ito_sign, seed):
        target_std = gaussian_marginal_std(sigma)
        worst_mean = max(worst_mean, float(np.max(np.abs(x.mean(axis=0)))))
        worst_var = max(worst_var, float(np.max(np.abs(x.var(axis=0) / target_std**2 - 1))))
        if level % energy_every == 0 or level == T:
            ref = target_std * np.random.default_rng([seed, level]).standard_normal(x.shape)
            res = two_sample_distance(x, ref, rng=np.random.default_rng([seed, level, 1]))
            if res.rejected:
                rejected.append(level)
    passed = worst_mean <= mean_tol and worst_var <= var_tol and not rejected
    detail = (f"T={T} eta={eta} sign={ito_sign:+g} mean_gap={worst_mean:.4f} "
              f"energy_rejections={rejected}")
    return CheckResult(f"marginal_preservation_T{T}", worst_var, var_tol, passed, detail)


# -- gradient-norm law and equalizer --------------------------------------


def gradient_norm_rows(net, schedule, strategy, n_samples=10_000, seed=0, condition=None,
                       sensitivity="full", epsilon=1e-8, ito_sign=ITO_SIGN):
    """Per-step Monte-Carlo gradient norms for a batch of independent trajectories."""
    eq = build_equalizer(schedule, strategy, epsilon, sensitivity)
    c = expected_normal_norm(net.dim)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, net.dim))
    rows = []
    for t, (s_t, s_n) in enumerate(schedule.intervals()):
        params, jac, _ = step_transition(net, x, s_t, s_n, strategy, condition, t, ito_sign)
        x_next = sample_transition(params, rng.standard_normal(x.shape))
        g_mu = (x_next - params.mean) / params.variance
        observed = float(np.mean(np.linalg.norm(g_mu, axis=1)))
        contribution = float(np.mean(np.linalg.norm(jac * g_mu, axis=1)))
        predicted = c / math.sqrt(params.variance)
        rows.append({
            "step": t + 1, "sigma_t": s_t, "sigma_next": s_n, "variance": params.variance,
            "observed_norm": observed, "predicted_norm": predicted,
            "ratio": observed / predicted, "contribution_norm": contribution,
            "equalizer_weight": float(eq.weights[t]),
            "equalized_norm": float(eq.weights[t]) * contribution,
        })
        x = x_next
    return rows


def spread(values):
    values = np.asarray(values, dtype=float)
    return float(values.max() / values.min())


def check_gradient_law(rows, tol=0.05):
    worst = max(abs(r["ratio"] - 1.0) for r in rows)
    return _le("gradient_norm_law", worst, tol, "|E||grad_mu|| sqrt(Sigma) / E||zeta|| - 1|")


def check_equalizer(rows, min_raw=10.0, max_equalized=2.0):
    raw = spread([r["contribution_norm"] for r in rows])
    eq = spread([r["equalized_norm"] for r in rows])
    passed = raw > min_raw and eq <= max_equalized
    return CheckResult("equalizer_spread", eq, max_equalized, passed,
                       f"raw spread={raw:.3f} (needs > {min_raw:g})")


# -- gradients against finite differences ---------------------------------


def tiny_problem(seed=0, T=3, G=2, eta=0.7):
    net = VelocityNet(2, (4,), n_conditions=2, sigma_width=4, cond_width=2)
    net.initialize(np.random.default_rng(seed))
    # larger output weights so the KL and loss surfaces are not nearly flat
    net.params["W1"][:] *= 10.0
    strategy = VarianceStrategy(StrategyKind.PRECISE, eta)
    schedule = clamp_schedule(linear_schedule(T))
    group = rollout_group(net, schedule, strategy, condition=1, G=G, seed=seed)
    group.advantages = np.array([1.0, -1.0]) if G == 2 else group_advantages(
        np.arange(G, dtype=float))
    return net, schedule, strategy, group


def _relative(g, fd):
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))


def check_policy_fd(seed=0, tol=1e-3):
    net, schedule, strategy, group = tiny_problem(seed)
    eq = build_equalizer(schedule, strategy)
    _, grad = grpo_loss_and_grad(net, group, eq)
    fd = finite_diff_grad(lambda p: grpo_loss_and_grad(net.with_flat(p), group, eq)[0],
                          net.get_flat())
    return _le("policy_loss_gradient_fd", _relative(grad, fd), tol)


def check_kl_fd(seed=0, tol=1e-3):
    net, _, _, group = tiny_problem(seed)
    rng = np.random.default_rng([seed, 7])
    state = TrustRegionState.start(net, KLMode.DUAL)
    for name in ("init_net", "anchor_net", "prev_net"):
        ref = getattr(state, name)
        ref.set_flat(ref.get_flat() + 0.05 * rng.standard_normal(net.n_params))
    _, grad = kl_penalty(state, group, net)
    fd = finite_diff_grad(lambda p: kl_penalty(state, group, net.with_flat(p)).penalty,
                          net.get_flat())
    return _le("kl_penalty_gradient_fd", _relative(grad, fd), tol)


# -- small exact identities -----------------------------------------------


def check_advantages():
    adv = group_advantages([1.0, 2.0, 3.0])
    err = float(np.max(np.abs(adv - np.array([-1.224744871391589, 0.0, 1.224744871391589]))))
    rng = np.random.default_rng(3)
    r = rng.normal(size=8)
    total = abs(float(group_advantages(r).sum()))
    # dyadic rewards keep the shifted arithmetic exact
    base = np.array([0.25, 1.5, -2.0, 3.75, 0.5, -1.25, 2.0, 0.0])
    shifted = bool(np.array_equal(group_advantages(base), group_advantages(base + 64.0)))
    passed = err <= 1e-6 and total <= 1e-9 and shifted
    return CheckResult("advantage_identities", max(err, total), 1e-6, passed)


def check_controller():
    ctrl = KlControllerState()
    ok = warmup_lambda(ctrl, 0) == 1e-7 and warmup_lambda(ctrl, 100) == 1e-5
    hi = KlControllerState(lambda_kl=5e-6)
    ok &= controller_update(hi, 1.6e-2) == 0.9 * 5e-6
    lo = KlControllerState(lambda_kl=5e-6)
    ok &= controller_update(lo, 0.4e-2) == 1.1 * 5e-6
    top = KlControllerState(lambda_kl=1e-5)
    ok &= controller_update(top, 0.0) == 1e-5
    bottom = KlControllerState(lambda_kl=1e-7)
    ok &= controller_update(bottom, 1.0) == 1e-7
    return CheckResult("controller_rules", 0.0 if ok else 1.0, 0.0, bool(ok))
