"""Subcommand bodies. Each takes a validated RunConfig and writes into ``cfg.out_dir``."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dynamics import ITO_SIGN, StrategyKind, VarianceStrategy, step_std, transition_log_prob
from ..errors import RolloutDivergedError, TrainingDivergedError
from ..flownet import (
    flow_matching_pretrain,
    load_checkpoint,
    save_checkpoint,
    step_transition,
)
from ..rlcore import build_equalizer, grpo_loss_and_grad, rollout_group
from ..schedule import clamp_schedule, flowgrpo_style_schedule, linear_schedule
from ..trustregion import (
    KLMode,
    TrustRegionState,
    controller_update,
    kl_penalty,
    maybe_refresh_anchor,
    observe_kl,
    snapshot_previous,
    warmup_lambda,
)
from . import checks
from .metrics import (
    GRADNORM_COLUMNS,
    PRETRAIN_COLUMNS,
    STD_COLUMNS,
    VERIFY_COLUMNS,
    MetricsWriter,
    align_columns,
)

log = logging.getLogger("sagegrpo")

PRETRAIN_CKPT = "pretrained.ckpt"
PRETRAIN_CSV = "pretrain_loss.csv"
ALIGN_CKPT = "aligned.ckpt"
ALIGN_CSV = "align_metrics.csv"
STD_CSV = "std_table.csv"
GRADNORM_CSV = "gradnorm.csv"
VERIFY_CSV = "verify.csv"
COMPARE_MODES = (KLMode.NOKL, KLMode.FIXED, KLMode.STEPWISE, KLMode.MOVING, KLMode.DUAL)


def compare_csv_name(mode):
    return f"compare_kl_{KLMode(mode).value}.csv"


class VerificationFailed(Exception):
    def __init__(self, failures):
        super().__init__(f"{len(failures)} check(s) failed: " + ", ".join(failures))
        self.failures = failures


# -- pretrain --------------------------------------------------------------


def pretrain_net(cfg):
    p = cfg.pretrain
    net = cfg.build_net()
    net, losses = flow_matching_pretrain(net, cfg.build_data(), p.steps, p.lr, cfg.seed,
                                         p.batch_size, p.cond_dropout)
    return net, losses


def run_pretrain(cfg):
    out = Path(cfg.out_dir)
    started = time.perf_counter()
    net, losses = pretrain_net(cfg)
    with MetricsWriter(out / PRETRAIN_CSV, PRETRAIN_COLUMNS) as w:
        for k, loss in enumerate(losses):
            w.write({"step": k, "loss": loss})
    path = save_checkpoint(net, out / PRETRAIN_CKPT)
    log.info("pretrained %d steps in %.1fs, final loss %.4f -> %s", len(losses),
             time.perf_counter() - started, losses[-1], path)
    return path


def _starting_net(cfg, checkpoint):
    if checkpoint is not None:
        return load_checkpoint(checkpoint)
    log.info("no checkpoint given; pretraining in-process")
    return pretrain_net(cfg)[0]


# -- align -----------------------------------------------------------------


@dataclass
class AlignResult:
    net: object
    rows: list = field(default_factory=list)
    anchor_refreshes: int = 0


def _observed_kl(cfg, trust, penalty):
    how = cfg.controller.observe
    if how == "position":
        return penalty.anchor_kl
    if how == "velocity":
        return penalty.stepwise_kl
    w_init, w_anchor, w_prev = trust.term_weights()
    terms = ((w_init, penalty.init_kl), (w_anchor, penalty.anchor_kl), (w_prev, penalty.stepwise_kl))
    return sum(kl for w, kl in terms if w > 0)


def _logprob_shift(net, group):
    """Mean log pi_old - log pi_new over the group's stochastic transitions."""
    diffs = []
    for t in range(group.T):
        if group.variances[t] <= 0:
            continue
        params, _, _ = step_transition(net, group.states[t], group.sigmas[t],
                                       group.sigmas[t + 1], group.strategy, group.condition, t)
        diffs.append(group.log_probs[t] - transition_log_prob(group.states[t + 1], params))
    return float(np.mean(diffs)) if diffs else 0.0


def align(cfg, net, mode=None, writer=None, ito_sign=ITO_SIGN, reward=None):
    """The alignment loop. ``net`` is updated in place; returns an AlignResult.

    ``reward`` overrides the config's reward (for custom components).

    On a non-finite rollout or loss a NaN row is written for the offending
    step and TrainingDivergedError is raised.
    """
    mode = KLMode(mode or cfg.trustregion.mode)
    tr = cfg.trustregion
    schedule = cfg.build_schedule()
    strategy = cfg.build_strategy()
    reward = reward if reward is not None else cfg.build_reward()
    g = cfg.grpo
    equalizer = build_equalizer(schedule, strategy, g.epsilon, g.sensitivity, g.equalize)
    trust = TrustRegionState.start(net, mode, tr.anchor_interval, tr.beta_pos, tr.beta_vel)
    ctrl = cfg.build_controller()
    columns = align_columns(reward.names)
    result = AlignResult(net)

    def emit(row):
        result.rows.append(row)
        if writer is not None:
            writer.write(row)

    for k in range(g.updates):
        try:
            group = rollout_group(net, schedule, strategy, cfg.condition, g.group_size,
                                  seed=(cfg.seed, k), ito_sign=ito_sign)
        except RolloutDivergedError as exc:
            emit(_nan_row(columns, k))
            raise TrainingDivergedError(f"rollout diverged at update {k}, step {exc.step}") from exc
        group.score(reward, g.epsilon)
        policy_loss, policy_grad = grpo_loss_and_grad(net, group, equalizer, ito_sign)
        penalty = kl_penalty(trust, group, net)
        observed = _observed_kl(cfg, trust, penalty)
        if k <= ctrl.warmup_steps:
            lam = warmup_lambda(ctrl, k)
            observe_kl(ctrl, observed)
        else:
            lam = controller_update(ctrl, observed)
        loss = policy_loss + lam * penalty.penalty
        grad = policy_grad + lam * penalty.grad
        grad_norm = float(np.linalg.norm(grad))
        if not (math.isfinite(loss) and math.isfinite(grad_norm)):
            emit(_nan_row(columns, k))
            raise TrainingDivergedError(f"non-finite loss or gradient at update {k}")

        # both snapshots hold the pre-step parameters, so with N = 1 the
        # anchor coincides with the previous policy
        snapshot_previous(trust, net)
        refreshed = maybe_refresh_anchor(trust, net)
        result.anchor_refreshes += int(refreshed)
        net.set_flat(net.get_flat() - g.lr * grad)
        trust.step += 1

        row = {
            "step": k,
            "mean_reward": float(np.mean(group.rewards)),
            "reward_std": float(np.std(group.rewards)),
            "loss": loss,
            "policy_loss": policy_loss,
            "kl_penalty": penalty.penalty,
            "grad_norm": grad_norm,
            "lambda_kl": lam,
            "anchor_kl": penalty.anchor_kl,
            "stepwise_kl": penalty.stepwise_kl,
            "stepwise_kl_logprob": _logprob_shift(net, group),
            "init_kl": penalty.init_kl,
            "rollout_std": float(np.mean(np.std(group.final, axis=0))),
            "anchor_refreshed": refreshed,
        }
        for name in reward.names:
            row[f"reward_{name}"] = float(np.mean(group.component_rewards[name]))
        emit(row)
    return result


def _nan_row(columns, k):
    row = dict.fromkeys(columns, math.nan)
    row["step"] = k
    return row


def run_align(cfg, checkpoint=None, ito_sign=ITO_SIGN):
    out = Path(cfg.out_dir)
    net = _starting_net(cfg, checkpoint)
    started = time.perf_counter()
    columns = align_columns(cfg.build_reward().names)
    with MetricsWriter(out / ALIGN_CSV, columns) as w:
        result = align(cfg, net, writer=w, ito_sign=ito_sign)
    path = save_checkpoint(net, out / ALIGN_CKPT)
    log.info("aligned %d updates in %.1fs, %d anchor refreshes -> %s", cfg.grpo.updates,
             time.perf_counter() - started, result.anchor_refreshes, path)
    return result


def run_compare_kl(cfg, checkpoint=None):
    """Same seed and budget for every KL mode; one CSV per mode."""
    out = Path(cfg.out_dir)
    base = _starting_net(cfg, checkpoint)
    columns = align_columns(cfg.build_reward().names)
    results = {}
    for mode in COMPARE_MODES:
        started = time.perf_counter()
        with MetricsWriter(out / compare_csv_name(mode), columns) as w:
            results[mode] = align(cfg, base.copy(), mode=mode, writer=w)
        log.info("compare-kl %s done in %.1fs", mode.value, time.perf_counter() - started)
    return results


# -- analyses --------------------------------------------------------------


def std_regimes(cfg):
    """(regime, strategy, schedule) triples for the three-panel std comparison."""
    T, eta, floor = cfg.schedule.T, cfg.strategy.eta, cfg.schedule.floor
    flow = VarianceStrategy(StrategyKind.FLOW, eta)
    precise = VarianceStrategy(StrategyKind.PRECISE, eta)
    head = flowgrpo_style_schedule(T, cfg.analysis.flowgrpo_sigma_max)
    clamped = clamp_schedule(linear_schedule(T), floor)
    return [
        ("a", flow, head), ("a", precise, head),
        ("b", flow, clamped), ("b", precise, clamped),
        # (c): the unclamped head is undefined for FlowStyle and left as NaN
        ("c", flow, linear_schedule(T)), ("c", precise, clamped),
    ]


def std_rows(cfg):
    rows = []
    for regime, strategy, schedule in std_regimes(cfg):
        for t, (s_t, s_n) in enumerate(schedule.intervals()):
            std = step_std(strategy, s_t, s_n) if s_t < 1 else math.nan
            rows.append({"regime": regime, "strategy": strategy.kind.value, "step": t + 1,
                         "sigma_t": s_t, "sigma_next": s_n, "std": std})
    return rows


def run_analyze_std(cfg):
    rows = std_rows(cfg)
    with MetricsWriter(Path(cfg.out_dir) / STD_CSV, STD_COLUMNS) as w:
        for row in rows:
            w.write(row)
    return rows


def run_analyze_gradnorm(cfg, checkpoint=None):
    """Gradient norms do not depend on training; without a checkpoint the
    freshly initialized network is used."""
    net = load_checkpoint(checkpoint) if checkpoint is not None else cfg.build_net()
    rows = checks.gradient_norm_rows(net, cfg.build_schedule(), cfg.build_strategy(),
                                     cfg.analysis.samples, cfg.seed, cfg.condition,
                                     cfg.grpo.sensitivity, cfg.grpo.epsilon)
    with MetricsWriter(Path(cfg.out_dir) / GRADNORM_CSV, GRADNORM_COLUMNS) as w:
        for row in rows:
            w.write(row)
    return rows


# -- verify ----------------------------------------------------------------


def verification_suite(cfg, ito_sign=ITO_SIGN):
    seed = cfg.seed
    yield checks.check_quadrature(seed=seed)
    yield checks.check_dominance()
    yield checks.check_taylor()
    yield checks.check_additivity(seed=seed + 1)
    yield checks.check_policy_fd(seed=seed)
    yield checks.check_kl_fd(seed=seed)
    yield checks.check_advantages()
    yield checks.check_controller()
    # the first-order solver only tracks the marginal on a fine grid
    yield checks.check_marginals(T=100, eta=0.3, ito_sign=ito_sign, seed=seed, energy_every=10)
    rows = checks.gradient_norm_rows(cfg.build_net(), cfg.build_schedule(), cfg.build_strategy(),
                                     cfg.analysis.samples, seed, cfg.condition,
                                     cfg.grpo.sensitivity, cfg.grpo.epsilon)
    yield checks.check_gradient_law(rows)
    yield checks.check_equalizer(rows)


def run_verify(cfg, ito_sign=ITO_SIGN, echo=print):
    results = []
    with MetricsWriter(Path(cfg.out_dir) / VERIFY_CSV, VERIFY_COLUMNS) as w:
        for res in verification_suite(cfg, ito_sign):
            echo(res.line())
            w.write({"check": res.name, "measured": res.measured,
                     "tolerance": res.tolerance, "passed": res.passed})
            results.append(res)
    failures = [r.name for r in results if not r.passed]
    if failures:
        raise VerificationFailed(failures)
    return results
