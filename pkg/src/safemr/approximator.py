"""Small numpy multilayer perceptrons with exact reverse-mode gradients.

Everything the learner needs lives here: a flat-parameter MLP, an Adam-style
optimizer state, a squashed-Gaussian policy head and a finite-difference
gradient checker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu")
OUTPUT_MAPS = ("identity", "nonneg", "squash_gaussian")

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
# pre-squash clip keeps tanh strictly below 1 in float64
PRE_SQUASH_CLIP = 10.0


class ShapeError(ValueError):
    """Input or gradient has the wrong dimension."""


class NumericError(FloatingPointError):
    """A NaN or Inf reached a place where it must not."""


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class ApproxFn:
    """Fully connected network with a flat parameter vector.

    Layer ``i`` owns a weight block of shape ``(out, in)`` followed by a bias
    of length ``out``; the blocks are views into ``weights`` so optimizers can
    treat the whole network as one vector.

    For ``output_map="squash_gaussian"`` the last layer has ``2 * act_dim``
    units: the first half is the Gaussian mean, the second half the log
    standard deviation (clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``).
    """

    def __init__(self, layer_dims, activation="tanh", output_map="identity",
                 weights=None, seed=None):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ValueError(f"layer_dims must be >= 2 positive ints, got {layer_dims}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if output_map not in OUTPUT_MAPS:
            raise ValueError(f"unknown output_map {output_map!r}")
        if output_map == "squash_gaussian" and layer_dims[-1] % 2:
            raise ValueError("squash_gaussian needs an even output width (mean, log_std)")
        self.layer_dims = layer_dims
        self.activation = activation
        self.output_map = output_map
        self.n_params = num_params(layer_dims)
        if weights is None:
            weights = init_weights(layer_dims, np.random.default_rng(seed))
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} weights, got {weights.shape}")
        self.weights = weights
        self._bind()

    def _bind(self):
        self._layers = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            W = self.weights[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
            offset += fan_in * fan_out
            b = self.weights[offset:offset + fan_out]
            offset += fan_out
            self._layers.append((W, b))

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def set_weights(self, weights):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} weights, got {weights.shape}")
        self.weights[:] = weights

    def copy(self):
        return ApproxFn(self.layer_dims, self.activation, self.output_map,
                        weights=self.weights.copy())

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got shape {x.shape}")
        return X, single

    def _raw_forward(self, X):
        acts = [X]
        h = X
        last = len(self._layers) - 1
        for i, (W, b) in enumerate(self._layers):
            h = h @ W.T + b
            if i < last:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def _map_output(self, z):
        if self.output_map == "identity":
            return z
        if self.output_map == "nonneg":
            return _softplus(z)
        half = z.shape[1] // 2
        out = z.copy()
        out[:, half:] = np.clip(z[:, half:], LOG_STD_MIN, LOG_STD_MAX)
        return out

    def forward(self, x):
        """Evaluate the network on one input vector or a batch of rows."""
        X, single = self._check_input(x)
        out = self._map_output(self._raw_forward(X)[-1])
        return out[0] if single else out

    __call__ = forward

    def forward_cached(self, x):
        """Batch forward that also returns the cache ``backward`` needs."""
        X, _ = self._check_input(x)
        acts = self._raw_forward(X)
        return self._map_output(acts[-1]), acts

    def backward(self, cache, upstream):
        """Reverse-mode gradient of ``sum(upstream * output)``.

        Returns ``(grad_weights, grad_input)``. ``upstream`` must have the
        shape of the batch output the cache came from.
        """
        acts = cache
        z = acts[-1]
        g = np.asarray(upstream, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != z.shape:
            raise ShapeError(f"upstream shape {g.shape} != output shape {z.shape}")
        if self.output_map == "nonneg":
            g = g * _sigmoid(z)
        elif self.output_map == "squash_gaussian":
            half = z.shape[1] // 2
            g = g.copy()
            ls = z[:, half:]
            g[:, half:] *= (ls >= LOG_STD_MIN) & (ls <= LOG_STD_MAX)
        grad = np.empty(self.n_params)
        offset = self.n_params
        last = len(self._layers) - 1
        for i in range(last, -1, -1):
            W, _ = self._layers[i]
            if i < last:
                h = acts[i + 1]
                g = g * (1.0 - h * h) if self.activation == "tanh" else g * (h > 0)
            fan_out, fan_in = W.shape
            offset -= fan_out
            grad[offset:offset + fan_out] = g.sum(axis=0)
            offset -= fan_in * fan_out
            grad[offset:offset + fan_in * fan_out] = (g.T @ acts[i]).ravel()
            g = g @ W
        return grad, g

    def gradient(self, x, upstream):
        """One-shot ``backward`` for a single input or batch."""
        X, single = self._check_input(x)
        _, cache = self.forward_cached(X)
        up = np.asarray(upstream, dtype=np.float64)
        if single:
            up = up[None, :]
        gw, gx = self.backward(cache, up)
        return gw, (gx[0] if single else gx)

    # -- serialization --------------------------------------------------------

    def header(self):
        return {"layer_dims": self.layer_dims, "activation": self.activation,
                "output_map": self.output_map, "dtype": "<f8"}

    def save(self, path):
        """Write ``<path>.bin`` (little-endian float64) and ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.weights.astype("<f8").tofile(path.with_suffix(".bin"))
        path.with_suffix(".json").write_text(json.dumps(self.header(), indent=2))

    @classmethod
    def load(cls, path):
        path = Path(path)
        head = json.loads(path.with_suffix(".json").read_text())
        weights = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        return cls(head["layer_dims"], head["activation"], head["output_map"],
                   weights=weights)


def num_params(layer_dims):
    return sum((i + 1) * o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def init_weights(layer_dims, rng):
    """Uniform fan-in scaled weights, zero biases."""
    parts = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def mlp(in_dim, hidden, out_dim, rng, activation="tanh", output_map="identity"):
    dims = [in_dim, *hidden, out_dim]
    return ApproxFn(dims, activation, output_map, weights=init_weights(dims, rng))


# -- optimizer ----------------------------------------------------------------

@dataclass
class GradStep:
    """Adam state for one parameter vector."""

    step_size: float
    size: int
    moment_decay_1: float = 0.9
    moment_decay_2: float = 0.999
    epsilon: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0 < self.moment_decay_1 < 1 and 0 < self.moment_decay_2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def state_dict(self):
        return {"step_size": self.step_size, "size": self.size,
                "moment_decay_1": self.moment_decay_1,
                "moment_decay_2": self.moment_decay_2, "epsilon": self.epsilon,
                "t": self.t, "m": self.m.copy(), "v": self.v.copy()}

    @classmethod
    def from_state(cls, state):
        state = dict(state)
        return cls(**state)


def apply_step(params, grad, opt, direction="descent"):
    """Move ``params`` in place by one Adam step and return them.

    ``direction="ascent"`` climbs the gradient (used for the multiplier).
    A gradient of exactly zero leaves the parameters untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ShapeError(f"grad shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient, step refused")
    if direction not in ("descent", "ascent"):
        raise ValueError(f"direction must be 'descent' or 'ascent', got {direction!r}")
    if not grad.any():
        return params
    b1, b2 = opt.moment_decay_1, opt.moment_decay_2
    opt.t += 1
    opt.m *= b1
    opt.m += (1.0 - b1) * grad
    opt.v *= b2
    opt.v += (1.0 - b2) * grad * grad
    m_hat = opt.m / (1.0 - b1 ** opt.t)
    v_hat = opt.v / (1.0 - b2 ** opt.t)
    update = opt.step_size * m_hat / (np.sqrt(v_hat) + opt.epsilon)
    if direction == "descent":
        params -= update
    else:
        params += update
    return params


# -- squashed Gaussian head ---------------------------------------------------

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _log1m_tanh2(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


class SquashedGaussian:
    """Reparameterised tanh-Gaussian over a box ``[low, high]``.

    ``sample`` returns the action, its log-density and a cache from which
    ``backward`` turns dJ/daction and dJ/dlogp into dJ/d(head output).
    """

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        if np.any(self.high <= self.low):
            raise ValueError("action bounds need high > low")
        self.center = 0.5 * (self.high + self.low)
        self.scale = 0.5 * (self.high - self.low)

    @property
    def dim(self):
        return self.low.shape[0]

    def split(self, head_out):
        half = head_out.shape[-1] // 2
        return head_out[..., :half], head_out[..., half:]

    def deterministic(self, head_out):
        mean, _ = self.split(head_out)
        u = np.clip(mean, -PRE_SQUASH_CLIP, PRE_SQUASH_CLIP)
        return self.center + self.scale * np.tanh(u)

    def sample(self, head_out, noise):
        mean, log_std = self.split(head_out)
        std = np.exp(log_std)
        u_raw = mean + std * noise
        u = np.clip(u_raw, -PRE_SQUASH_CLIP, PRE_SQUASH_CLIP)
        t = np.tanh(u)
        action = self.center + self.scale * t
        log_prob = self.log_prob_pre(u, mean, log_std)
        cache = (noise, std, u, u_raw, t)
        return action, log_prob, cache

    def log_prob_pre(self, u, mean, log_std):
        z = (u - mean) / np.exp(log_std)
        gauss = -0.5 * z * z - log_std - _HALF_LOG_2PI
        jac = np.log(self.scale) + _log1m_tanh2(u)
        return np.sum(gauss - jac, axis=-1)

    def log_prob(self, action, head_out):
        """Log-density of given actions (used by tests and diagnostics)."""
        mean, log_std = self.split(head_out)
        t = np.clip((np.asarray(action) - self.center) / self.scale, -1 + 1e-15, 1 - 1e-15)
        u = np.arctanh(t)
        return self.log_prob_pre(u, mean, log_std)

    def backward(self, cache, d_action, d_logp):
        """Gradient w.r.t. ``[mean, log_std]`` holding the noise fixed."""
        noise, std, u, u_raw, t = cache
        d_logp = np.asarray(d_logp, dtype=np.float64)[..., None]
        inside = np.abs(u_raw) <= PRE_SQUASH_CLIP
        # d logp / du with noise fixed: the Gaussian term is constant
        d_u = d_action * self.scale * (1.0 - t * t) + d_logp * 2.0 * t
        d_u = d_u * inside
        d_mean = d_u
        d_log_std = d_u * std * noise - d_logp
        return np.concatenate([d_mean, d_log_std], axis=-1)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    n_checked: int


def grad_check(f, x, tol=1e-4, h=1e-5, upstream=None, seed=0):
    """Compare ``f.backward`` against central differences.

    The scalar checked is ``upstream . f(x)``; relative error uses
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if upstream is None:
        upstream = rng.standard_normal((x.shape[0], f.out_dim))
    upstream = np.atleast_2d(upstream)
    gw, gx = f.gradient(x, upstream)

    def scalar():
        return float(np.sum(upstream * f.forward(x)))

    numeric = np.empty_like(gw)
    w = f.weights
    for i in range(w.size):
        old = w[i]
        w[i] = old + h
        fp = scalar()
        w[i] = old - h
        fm = scalar()
        w[i] = old
        numeric[i] = (fp - fm) / (2 * h)
    num_x = np.empty_like(gx)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = scalar()
        x[idx] = old - h
        fm = scalar()
        x[idx] = old
        num_x[idx] = (fp - fm) / (2 * h)
    analytic = np.concatenate([gw, gx.ravel()])
    numeric = np.concatenate([numeric, num_x.ravel()])
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    # entries where both sides are roundoff-sized carry no information
    rel[np.abs(analytic - numeric) < 1e-9] = 0.0
    worst = int(np.argmax(rel))
    return GradCheckReport(bool(rel[worst] <= tol), float(rel[worst]), worst, rel.size)
