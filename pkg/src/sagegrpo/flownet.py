"""Dense velocity network with hand-written backprop, flow-matching pretraining
and a versioned checkpoint container.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"SAGEFLOW"
    8       4     uint32 format version (CHECKPOINT_VERSION)
    12      4     uint32 header length H
    16      H     UTF-8 JSON header, keys sorted, no whitespace:
                  activation, cond_features, dim, hidden, metadata,
                  n_conditions, n_params, sigma_features
    16+H    8*P   float64 parameters in ``VelocityNet.param_layout`` order
    end-4   4     uint32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import ITO_SIGN, ode_step, policy_transition, transition_log_prob
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    DegenerateDistributionError,
    InvalidArgumentError,
    TrainingDivergedError,
)

CHECKPOINT_MAGIC = b"SAGEFLOW"
CHECKPOINT_VERSION = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigma_features(sigma, width):
    """Fixed sinusoidal embedding of the noise level, frequencies pi * 2^k."""
    sigma = np.asarray(sigma, dtype=float)
    freqs = math.pi * 2.0 ** np.arange(width // 2)
    angles = sigma[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class VelocityNet:
    """MLP (x, sigma, condition) -> dx/dsigma with SiLU hidden activations.

    Parameters live in one flat float64 vector; per-layer arrays are views
    into it, so snapshots and finite differences work on ``get_flat()``.
    A freshly constructed net has all parameters zero; call :meth:`initialize`.
    """

    def __init__(self, dim=2, hidden=(64, 64, 64), n_conditions=8,
                 sigma_width=8, cond_width=8):
        if sigma_width % 2:
            raise InvalidArgumentError("sigma_width must be even")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_conditions = int(n_conditions)
        self.sigma_width = int(sigma_width)
        self.cond_width = int(cond_width)
        self.layer_dims = [self.dim + self.sigma_width + self.cond_width,
                           *self.hidden, self.dim]
        self.param_layout = [("cond_table", (self.n_conditions + 1, self.cond_width))]
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            self.param_layout.append((f"W{i}", (fan_in, fan_out)))
            self.param_layout.append((f"b{i}", (fan_out,)))
        self.n_params = sum(int(np.prod(shape)) for _, shape in self.param_layout)
        self._flat = np.zeros(self.n_params)
        self.metadata = {}

    # -- parameter plumbing -------------------------------------------------

    def _views(self, flat):
        out, offset = {}, 0
        for name, shape in self.param_layout:
            size = int(np.prod(shape))
            out[name] = flat[offset:offset + size].reshape(shape)
            offset += size
        return out

    @property
    def params(self):
        return self._views(self._flat)

    def get_flat(self):
        return self._flat.copy()

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise InvalidArgumentError(
                f"expected {self.n_params} parameters, got shape {flat.shape}"
            )
        if not np.all(np.isfinite(flat)):
            raise InvalidArgumentError("parameters must be finite")
        self._flat[:] = flat

    def copy(self):
        other = VelocityNet(self.dim, self.hidden, self.n_conditions,
                            self.sigma_width, self.cond_width)
        other._flat[:] = self._flat
        other.metadata = dict(self.metadata)
        return other

    def with_flat(self, flat):
        other = self.copy()
        other.set_flat(flat)
        return other

    def config(self):
        return {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "n_conditions": self.n_conditions,
            "sigma_features": self.sigma_width,
            "cond_features": self.cond_width,
            "activation": "silu",
        }

    def initialize(self, rng):
        rng = np.random.default_rng(rng)
        p = self.params
        p["cond_table"][:] = 0.1 * rng.standard_normal(p["cond_table"].shape)
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            w = p[f"W{i}"]
            scale = math.sqrt(2.0 / w.shape[0])
            if i == n_layers - 1:
                scale *= 0.1
            w[:] = scale * rng.standard_normal(w.shape)
            p[f"b{i}"][:] = 0.0
        return self

    # -- forward / backward -------------------------------------------------

    def _condition_index(self, condition, batch):
        if condition is None:
            return np.full(batch, self.n_conditions, dtype=int)
        idx = np.asarray(condition)
        if idx.ndim == 0:
            idx = np.full(batch, int(idx), dtype=int)
        idx = np.where(idx < 0, self.n_conditions, idx).astype(int)
        if idx.shape != (batch,) or np.any(idx > self.n_conditions):
            raise InvalidArgumentError("condition index out of range")
        return idx

    def forward(self, x, sigma, condition=None, return_cache=False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected state dimension {self.dim}, got {x.shape}")
        batch = x.shape[0]
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (batch,))
        if np.any(sigma < 0) or np.any(sigma > 1):
            raise InvalidArgumentError("noise levels must lie in [0, 1]")
        cond = self._condition_index(condition, batch)
        p = self.params
        h = np.concatenate(
            [x, sigma_features(sigma, self.sigma_width), p["cond_table"][cond]], axis=1
        )
        inputs, pre = [h], []
        n_layers = len(self.layer_dims) - 1
        for i in range(n_layers):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            if i < n_layers - 1:
                pre.append(z)
                h = z * _sigmoid(z)
                inputs.append(h)
            else:
                h = z
        out = h[0] if single else h
        if return_cache:
            return out, (inputs, pre, cond, single)
        return out

    __call__ = forward

    def backward(self, cache, grad_out, grad_flat=None):
        """Accumulate d(loss)/d(params) given d(loss)/d(output) into ``grad_flat``."""
        inputs, pre, cond, single = cache
        g = np.asarray(grad_out, dtype=float)
        if single:
            g = g[None, :]
        if grad_flat is None:
            grad_flat = np.zeros(self.n_params)
        grads = self._views(grad_flat)
        p = self.params
        n_layers = len(self.layer_dims) - 1
        for i in reversed(range(n_layers)):
            grads[f"W{i}"] += inputs[i].T @ g
            grads[f"b{i}"] += g.sum(axis=0)
            g = g @ p[f"W{i}"].T
            if i > 0:
                z = pre[i - 1]
                s = _sigmoid(z)
                g = g * (s + z * s * (1.0 - s))
        start = self.dim + self.sigma_width
        np.add.at(grads["cond_table"], cond, g[:, start:])
        return grad_flat


# -- data ------------------------------------------------------------------


@dataclass
class DataSpec:
    """Isotropic Gaussian mixture with equal weights; mode index doubles as condition."""

    mode_centers: np.ndarray
    mode_std: float = 0.3
    condition: int | None = None

    def __post_init__(self):
        self.mode_centers = np.atleast_2d(np.asarray(self.mode_centers, dtype=float))
        if len(self.mode_centers) < 2:
            raise InvalidArgumentError("need at least two modes")
        if not self.mode_std > 0:
            raise InvalidArgumentError("mode_std must be positive")

    @classmethod
    def ring(cls, n_modes=8, radius=4.0, mode_std=0.3, condition=None):
        angles = 2 * math.pi * np.arange(n_modes) / n_modes
        centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(centers, mode_std, condition)

    @property
    def n_modes(self):
        return len(self.mode_centers)

    @property
    def dim(self):
        return self.mode_centers.shape[1]

    def sample(self, rng, n):
        if self.condition is None:
            labels = rng.integers(self.n_modes, size=n)
        else:
            labels = np.full(n, int(self.condition))
        noise = rng.standard_normal((n, self.dim))
        return self.mode_centers[labels] + self.mode_std * noise, labels


# -- pretraining -----------------------------------------------------------


def flow_matching_pretrain(net, data, steps, lr=0.1, seed=0, batch_size=256,
                           cond_dropout=0.5):
    """SGD on mean ||v(x_sigma, sigma, c) - (z - x0)||^2 along the rectified path.

    Conditions are dropped to the null embedding with probability
    ``cond_dropout`` so the same net also samples unconditionally.
    Returns (net, per-step losses); ``net`` is updated in place.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    losses = np.empty(steps)
    grad = np.zeros(net.n_params)
    for k in range(steps):
        x0, labels = data.sample(rng, batch_size)
        z = rng.standard_normal(x0.shape)
        sigma = rng.uniform(0.0, 1.0, size=batch_size)
        drop = rng.uniform(size=batch_size) < cond_dropout
        cond = np.where(drop, -1, labels)
        x_t = (1.0 - sigma[:, None]) * x0 + sigma[:, None] * z
        target = z - x0
        v, cache = net.forward(x_t, sigma, cond, return_cache=True)
        resid = v - target
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite flow-matching loss at step {k}")
        losses[k] = loss
        grad[:] = 0.0
        net.backward(cache, 2.0 * resid / batch_size, grad)
        net._flat -= lr * grad
    net.metadata.update({"pretrain_steps": int(steps), "final_loss": float(losses[-1]),
                         "seed": int(seed)})
    return net, losses


def sample_ode(net, schedule, n, condition=None, rng=None, x_init=None):
    """Deterministic Euler sampler from N(0, I) at sigma_1 down the grid."""
    rng = np.random.default_rng(rng)
    x = rng.standard_normal((n, net.dim)) if x_init is None else np.array(x_init, dtype=float)
    for sigma_t, sigma_next in schedule.intervals():
        v = net.forward(x, sigma_t, condition)
        x = ode_step(x, -v, sigma_t - sigma_next)
    return x


# -- policy gradient -------------------------------------------------------


def step_transition(net, x, sigma_t, sigma_next, strategy, condition=None, step_index=0,
                    ito_sign=ITO_SIGN):
    """Network forward plus policy transition; returns (params, jac, cache)."""
    v, cache = net.forward(x, sigma_t, condition, return_cache=True)
    params, jac = policy_transition(x, v, sigma_t, sigma_next, strategy,
                                    step_index=step_index, ito_sign=ito_sign)
    return params, jac, cache


def policy_gradient(net, sigmas, states, next_states, weights, strategy, condition=None,
                    ito_sign=ITO_SIGN):
    """Value and gradient of sum_{t,i} w[t,i] * log pi_theta(next[t,i] | states[t,i]).

    ``states``/``next_states`` have shape (T, G, D) (or (T, D) for one
    trajectory) and ``weights`` shape (T, G) (or (T,)). Steps whose weights are
    all zero are skipped; a weighted zero-variance step is an error.
    """
    states = np.asarray(states, dtype=float)
    next_states = np.asarray(next_states, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if states.ndim == 2:
        states, next_states, weights = states[:, None], next_states[:, None], weights[:, None]
    sigmas = np.asarray(sigmas, dtype=float)
    T = states.shape[0]
    if sigmas.shape != (T + 1,) or next_states.shape != states.shape \
            or weights.shape != states.shape[:2]:
        raise InvalidArgumentError("trajectory arrays have inconsistent shapes")
    total = 0.0
    grad = np.zeros(net.n_params)
    for t in range(T):
        w = weights[t]
        if not np.any(w):
            continue
        params, jac, cache = step_transition(net, states[t], sigmas[t], sigmas[t + 1],
                                             strategy, condition, t, ito_sign)
        if params.variance <= 0.0:
            raise DegenerateDistributionError(f"weighted step {t} has zero variance")
        logp = transition_log_prob(next_states[t], params)
        total += float(np.dot(w, logp))
        g_mu = (next_states[t] - params.mean) / params.variance
        net.backward(cache, w[:, None] * jac * g_mu, grad)
    return total, grad


# -- checkpoints -----------------------------------------------------------


def _to_jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def checkpoint_bytes(net):
    header = dict(net.config())
    header["n_params"] = net.n_params
    header["metadata"] = {k: _to_jsonable(v) for k, v in sorted(net.metadata.items())}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob
            + net._flat.astype("<f8").tobytes())
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(net, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(net))
    return path


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a velocity-net checkpoint")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path} is truncated or corrupt (checksum mismatch)")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
        net = VelocityNet(header["dim"], header["hidden"], header["n_conditions"],
                          header["sigma_features"], header["cond_features"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path} has a malformed header: {exc}") from exc
    params = np.frombuffer(body[16 + header_len:], dtype="<f8")
    if params.size != net.n_params or header.get("n_params") != net.n_params:
        raise CheckpointError(f"{path}: parameter count does not match layer dims")
    net.set_flat(params.astype(float))
    net.metadata = dict(header.get("metadata", {}))
    return net
