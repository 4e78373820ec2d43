import numpy as np
import pytest

from sagegrpo.errors import InvalidArgumentError
from sagegrpo.schedule import (
    NoiseSchedule,
    Regime,
    build_schedule,
    clamp_schedule,
    flowgrpo_style_schedule,
    linear_schedule,
)


@pytest.mark.parametrize("T, sigma_max, expected", [
    (2, 1.0, [1.0, 0.5, 0.0]),
    (1, 0.8, [0.8, 0.0]),
    (4, 1.0, [1.0, 0.75, 0.5, 0.25, 0.0]),
])
def test_linear_schedule(T, sigma_max, expected):
    s = linear_schedule(T, sigma_max)
    assert list(s.sigmas) == expected
    assert s.regime is Regime.DEFAULT
    assert s.T == T


@pytest.mark.parametrize("T, sigma_max", [(0, 1.0), (2, 0.0), (2, 1.5), (2.5, 1.0)])
def test_linear_schedule_rejects(T, sigma_max):
    with pytest.raises(InvalidArgumentError):
        linear_schedule(T, sigma_max)


@pytest.mark.parametrize("levels, floor, expected", [
    ([1.0, 0.5, 0.0], 3e-3, [0.997, 0.5, 0.0]),
    ([0.9, 0.4], 0.2, [0.8, 0.4]),
    ([0.5, 0.1], 0.4, [0.5, 0.1]),
])
def test_clamp(levels, floor, expected):
    s = clamp_schedule(NoiseSchedule(tuple(levels)), floor)
    np.testing.assert_allclose(s.sigmas, expected, rtol=0, atol=1e-15)
    assert s.regime is Regime.CLAMPED
    assert s.floor_one_minus_sigma == floor


@pytest.mark.parametrize("floor", [0.0, 1.0, -0.1])
def test_clamp_rejects_floor(floor):
    with pytest.raises(InvalidArgumentError):
        clamp_schedule(linear_schedule(3), floor)


def test_clamp_idempotent():
    once = clamp_schedule(linear_schedule(10), 3e-3)
    assert clamp_schedule(once, 3e-3) == once


@pytest.mark.parametrize("T, sigma_max, expected", [
    (3, 1.0, [1.0, 1.0, 0.5, 0.0]),
    (2, 0.9, [0.9, 0.9, 0.0]),
])
def test_flowgrpo_head(T, sigma_max, expected):
    s = flowgrpo_style_schedule(T, sigma_max)
    np.testing.assert_allclose(s.sigmas, expected, atol=1e-15)
    assert s.deltas()[0] == 0.0
    assert s.regime is Regime.FLOWGRPO


def test_flowgrpo_needs_two_steps():
    with pytest.raises(InvalidArgumentError):
        flowgrpo_style_schedule(1)


def test_schedule_validation():
    with pytest.raises(InvalidArgumentError):
        NoiseSchedule((0.5,))
    with pytest.raises(InvalidArgumentError):
        NoiseSchedule((0.2, 0.5))
    with pytest.raises(InvalidArgumentError):
        NoiseSchedule((1.2, 0.0))


def test_build_schedule_regimes():
    assert build_schedule("default", 4).sigmas == linear_schedule(4).sigmas
    assert max(build_schedule("clamped", 4, 1.0, 3e-3).sigmas) == pytest.approx(0.997)
    assert build_schedule("flowgrpo", 4).deltas()[0] == 0.0
    with pytest.raises(InvalidArgumentError):
        build_schedule("nonsense", 4)
