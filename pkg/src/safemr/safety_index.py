"""Distance-based energy function, its descent constraint and the
magnitude-regularization penalty, with analytic parameter gradients.

The energy function is

    phi = (sigma + d_min)**n - d**n - k * d_dot

and a transition ``s -> s'`` satisfies the descent constraint when

    phi(s') - max(phi(s) - eta_D, 0) < 0.

All functions accept scalars or numpy arrays for ``d`` / ``d_dot`` and
broadcast; gradients come back stacked along the last axis in the order
``(sigma, k, n)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

D_FLOOR = 1e-3


@dataclass(frozen=True)
class SafetyIndexParams:
    sigma: float = 0.5
    k: float = 1.0
    n: float = 2.0
    d_min: float = 0.1
    eta_D: float = 0.05

    def __post_init__(self):
        if not (self.sigma >= 0 and self.k >= 0):
            raise ValueError(f"sigma and k must be nonnegative, got {self.sigma}, {self.k}")
        if not self.n >= 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not (self.d_min > 0 and self.eta_D > 0):
            raise ValueError("d_min and eta_D must be positive")

    @property
    def zeta(self):
        return np.array([self.sigma, self.k, self.n])

    def with_zeta(self, zeta):
        sigma, k, n = (float(v) for v in zeta)
        return SafetyIndexParams(sigma, k, n, self.d_min, self.eta_D)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DistanceFeature:
    d: float
    d_dot: float

    def __post_init__(self):
        if not self.d >= D_FLOOR:
            raise ValueError(f"d={self.d} below floor {D_FLOOR}")


@dataclass(frozen=True)
class MagRegWeights:
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("magnitude-regularization weights must be nonnegative")

    @property
    def is_zero(self):
        return self.a == 0 and self.b == 0


def clamp_distance(d):
    return np.maximum(d, D_FLOOR)


def phi(p, d, d_dot):
    d = clamp_distance(np.asarray(d, dtype=np.float64))
    return (p.sigma + p.d_min) ** p.n - d ** p.n - p.k * np.asarray(d_dot)


def phi_feature(p, f):
    return float(phi(p, f.d, f.d_dot))


def residual(p, d, d_dot, d_next, d_dot_next):
    """``phi(s') - max(phi(s) - eta_D, 0)``; negative means satisfied."""
    now = phi(p, d, d_dot)
    nxt = phi(p, d_next, d_dot_next)
    return nxt - np.maximum(now - p.eta_D, 0.0)


def residual_feature(p, f_now, f_next):
    return float(residual(p, f_now.d, f_now.d_dot, f_next.d, f_next.d_dot))


def residual_from_phi(phi_now, phi_next, eta_D):
    return phi_next - np.maximum(phi_now - eta_D, 0.0)


def mag_reg(p, w):
    return w.a * (p.sigma + p.d_min) ** p.n + w.b * p.k


def phi_grad(p, d, d_dot):
    """d phi / d(sigma, k, n)."""
    d = clamp_distance(np.asarray(d, dtype=np.float64))
    d_dot = np.asarray(d_dot, dtype=np.float64)
    base = p.sigma + p.d_min
    shape = np.broadcast(d, d_dot).shape
    g_sigma = np.full(shape, p.n * base ** (p.n - 1))
    g_k = np.broadcast_to(-d_dot, shape).astype(np.float64)
    g_n = base ** p.n * np.log(base) - d ** p.n * np.log(d)
    return np.stack([g_sigma, g_k, np.broadcast_to(g_n, shape)], axis=-1)


def residual_grad(p, d, d_dot, d_next, d_dot_next):
    """d residual / d(sigma, k, n).

    The max branch contributes only when ``phi(s) - eta_D > 0``; at the tie
    the zero branch is taken.
    """
    active = (phi(p, d, d_dot) - p.eta_D) > 0
    g = phi_grad(p, d_next, d_dot_next)
    return g - np.where(np.asarray(active)[..., None], phi_grad(p, d, d_dot), 0.0)


def mag_reg_grad(p, w):
    base = p.sigma + p.d_min
    return np.array([w.a * p.n * base ** (p.n - 1),
                     w.b,
                     w.a * base ** p.n * np.log(base)])
