"""Randomized invariants."""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sagegrpo.dynamics import StrategyKind, VarianceStrategy, step_variance
from sagegrpo.flownet import VelocityNet, load_checkpoint, save_checkpoint
from sagegrpo.oracle import finite_diff_grad
from sagegrpo.rlcore import equalizer_weights, group_advantages
from sagegrpo.schedule import clamp_schedule, linear_schedule
from sagegrpo.trustregion import (
    KlControllerState,
    controller_update,
    gaussian_kl,
    warmup_lambda,
)

sigma_hi = st.floats(0.001, 0.997)
frac = st.floats(0.0, 1.0)
etas = st.floats(0.01, 2.0)
finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(sigma_hi, frac, etas)
def test_precise_never_exceeds_flow(sigma_t, f, eta):
    sigma_next = sigma_t * f
    assume(sigma_t - sigma_next > 1e-9)
    p = step_variance(VarianceStrategy(StrategyKind.PRECISE, eta), sigma_t, sigma_next)
    fl = step_variance(VarianceStrategy(StrategyKind.FLOW, eta), sigma_t, sigma_next)
    assert 0 <= p <= fl * (1 + 1e-12)


@given(sigma_hi, frac, frac, etas)
def test_precise_is_additive(a, f1, f2, eta):
    b = a * f1
    c = b * f2
    assume(a - c > 1e-6)
    s = VarianceStrategy(StrategyKind.PRECISE, eta)
    whole = step_variance(s, a, c)
    assert step_variance(s, a, b) + step_variance(s, b, c) == pytest.approx(whole, rel=1e-9)


@given(sigma_hi, frac, frac, etas)
def test_precise_grows_with_width(sigma_t, f1, f2, eta):
    lo, hi = sorted((f1, f2))
    s = VarianceStrategy(StrategyKind.PRECISE, eta)
    assert step_variance(s, sigma_t, sigma_t * lo) >= step_variance(s, sigma_t, sigma_t * hi)


@given(st.integers(1, 60), st.floats(1e-4, 0.2))
def test_clamp_is_idempotent(T, floor):
    once = clamp_schedule(linear_schedule(T), floor)
    assert clamp_schedule(once, floor).sigmas == once.sigmas
    assert max(once.sigmas) <= 1 - floor + 1e-15


@given(arrays(float, st.integers(2, 32), elements=finite))
def test_advantages_center_and_shift(rewards):
    adv = group_advantages(rewards)
    assert abs(adv.sum()) <= 1e-9 * max(1.0, len(rewards))
    if np.std(rewards) > 1e-3:
        np.testing.assert_allclose(group_advantages(rewards + 5.0), adv, atol=1e-6)
        np.testing.assert_allclose(group_advantages(3.0 * rewards), adv, atol=1e-6)


@given(arrays(float, st.integers(1, 20), elements=st.floats(1e-3, 1e3)), st.floats(0.01, 100))
def test_equalizer_scale_free(proxies, c):
    np.testing.assert_allclose(equalizer_weights(c * proxies, 0.0),
                               equalizer_weights(proxies, 0.0), rtol=1e-12)
    assert np.all(equalizer_weights(proxies) > 0)


@given(st.lists(st.tuples(st.booleans(), st.floats(0.0, 10.0)), max_size=200),
       st.integers(1, 50))
def test_lambda_stays_in_bounds(events, warmup):
    ctrl = KlControllerState(warmup_steps=warmup)
    k = 0
    for use_warmup, kl in events:
        lam = warmup_lambda(ctrl, k) if use_warmup else controller_update(ctrl, kl)
        assert ctrl.lambda_min <= lam <= ctrl.lambda_max
        assert len(ctrl.history) <= ctrl.history_size
        k += 1


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite),
       st.floats(1e-3, 10.0))
def test_kl_symmetric_and_nonnegative(a, b, var):
    kl = gaussian_kl(a, b, var)
    assert kl >= 0
    assert kl == gaussian_kl(b, a, var)


@settings(max_examples=50)
@given(arrays(float, (3, 3), elements=st.floats(-2, 2)), arrays(float, 3, elements=st.floats(-2, 2)),
       arrays(float, 3, elements=st.floats(-2, 2)))
def test_fd_exact_on_quadratics(A, b, x):
    def f(v):
        return float(v @ A @ v + b @ v + 1.5)

    np.testing.assert_allclose(finite_diff_grad(f, x), (A + A.T) @ x + b, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_checkpoint_round_trip(tmp_path_factory, seed):
    net = VelocityNet(2, (5,), n_conditions=2, sigma_width=2, cond_width=1)
    net.initialize(np.random.default_rng(seed))
    net.metadata["seed"] = seed
    path = save_checkpoint(net, tmp_path_factory.mktemp("rt") / "n.ckpt")
    back = load_checkpoint(path)
    np.testing.assert_array_equal(back.get_flat(), net.get_flat())
    assert back.metadata["seed"] == seed
