"""Brute-force checks kept independent of the closed forms they verify."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError, InvalidArgumentError, OracleError


@dataclass(frozen=True)
class QuadratureSpec:
    panels: int = 1_000_000
    rule: str = "midpoint"

    def __post_init__(self):
        if self.panels < 1:
            raise InvalidArgumentError("panels must be >= 1")
        if self.rule != "midpoint":
            raise InvalidArgumentError(f"unsupported rule {self.rule!r}")


def quadrature_variance(sigma_hi, sigma_lo, eta, panels=1_000_000):
    """Midpoint rule for the integral of eta^2 * s / (1 - s) over [sigma_lo, sigma_hi]."""
    if sigma_hi >= 1:
        raise DomainError("integrand is singular at s = 1")
    if not 0 <= sigma_lo <= sigma_hi:
        raise InvalidArgumentError("need 0 <= sigma_lo <= sigma_hi")
    QuadratureSpec(panels)
    width = sigma_hi - sigma_lo
    if width == 0:
        return 0.0
    h = width / panels
    total = 0.0
    # chunked so 1e6+ panels stay within a few MB
    chunk = 1 << 18
    for start in range(0, panels, chunk):
        idx = np.arange(start, min(start + chunk, panels), dtype=float)
        s = sigma_lo + (idx + 0.5) * h
        total += float(np.sum(s / (1.0 - s)))
    return eta**2 * total * h


def finite_diff_grad(f, x, h=1e-5):
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate."""
    if h <= 0:
        raise InvalidArgumentError("h must be positive")
    x = np.array(x, dtype=float)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def gaussian_marginal_std(sigma):
    """Per-dimension std of x = (1 - sigma) x0 + sigma z with x0, z ~ N(0, I)."""
    if not 0 <= sigma <= 1:
        raise InvalidArgumentError("sigma must lie in [0, 1]")
    return math.sqrt((1 - sigma) ** 2 + sigma**2)


def gaussian_velocity(x, sigma):
    """E[z - x0 | x] for standard-normal data on the rectified path."""
    var = (1 - sigma) ** 2 + sigma**2
    return (2 * sigma - 1) / var * np.asarray(x, dtype=float)


def gaussian_score(x, sigma):
    var = (1 - sigma) ** 2 + sigma**2
    return -np.asarray(x, dtype=float) / var


def expected_normal_norm(dim):
    """E||zeta|| for zeta ~ N(0, I_dim)."""
    return math.sqrt(2) * math.exp(math.lgamma((dim + 1) / 2) - math.lgamma(dim / 2))


@dataclass
class TwoSampleResult:
    energy: float
    threshold: float
    mean_gap: np.ndarray
    var_gap: np.ndarray

    @property
    def rejected(self):
        return self.energy > self.threshold


def _energy_from_distances(dist, in_a):
    """Energy distance for a pooled distance matrix and a membership mask (or masks)."""
    a = in_a.astype(float)
    b = 1.0 - a
    na = a.sum(axis=0)
    nb = b.sum(axis=0)
    da = dist @ a
    db = dist @ b
    s_ab = np.einsum("i...,i...->...", a, db)
    s_aa = np.einsum("i...,i...->...", a, da)
    s_bb = np.einsum("i...,i...->...", b, db)
    return 2 * s_ab / (na * nb) - s_aa / na**2 - s_bb / nb**2


def energy_distance(samples_a, samples_b):
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    return float(
        2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    )


def two_sample_distance(samples_a, samples_b, *, n_permutations=200, level=0.95,
                        max_points=1000, rng=None):
    """Energy distance with a permutation-test threshold plus moment gaps.

    Mean/variance gaps use every sample; the energy statistic and its
    permutation null use at most ``max_points`` points per side.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.size == 0 or b.size == 0:
        raise InvalidArgumentError("both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("sample dimensions differ")
    rng = np.random.default_rng(rng)
    mean_gap = a.mean(axis=0) - b.mean(axis=0)
    var_gap = a.var(axis=0) - b.var(axis=0)
    if len(a) > max_points:
        a = a[rng.choice(len(a), max_points, replace=False)]
    if len(b) > max_points:
        b = b[rng.choice(len(b), max_points, replace=False)]
    pooled = np.concatenate([a, b])
    dist = cdist(pooled, pooled)
    mask = np.zeros(len(pooled), dtype=bool)
    mask[: len(a)] = True
    energy = float(_energy_from_distances(dist, mask))
    perms = np.stack([rng.permutation(mask) for _ in range(n_permutations)], axis=1)
    null = _energy_from_distances(dist, perms)
    threshold = float(np.quantile(null, level))
    return TwoSampleResult(energy, threshold, mean_gap, var_gap)
