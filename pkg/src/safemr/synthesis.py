"""Multi-timescale joint synthesis of policy, multiplier and energy function.

Each learner step updates the critics; the policy, the multiplier and the
energy-function parameters ``zeta = (sigma, k, n)`` follow at the slower
periods ``m_pi < m_lambda < m_phi``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import safety_index as si
from .agent import critic_update, policy_and_multiplier_grads
from .approximator import NumericError, apply_step

DIVERGENCE_LIMIT = 1e6


class ScheduleError(ValueError):
    pass


class DivergenceError(NumericError):
    pass


@dataclass(frozen=True)
class MultiTimescaleSchedule:
    m_pi: int = 2
    m_lambda: int = 4
    m_phi: float = 10
    beta_pi: float = 3e-4
    beta_lambda: float = 1e-4
    beta_zeta: float = 1e-3

    def __post_init__(self):
        if not (self.m_pi >= 1 and self.m_lambda >= 1 and self.m_phi >= 1):
            raise ScheduleError("update periods must be positive")
        if not (self.m_pi < self.m_lambda < self.m_phi):
            raise ScheduleError(
                f"need m_pi < m_lambda < m_phi, got {self.m_pi}, {self.m_lambda}, {self.m_phi}")
        if min(self.beta_pi, self.beta_lambda, self.beta_zeta) <= 0:
            raise ScheduleError("step sizes must be positive")

    @property
    def zeta_frozen(self):
        return math.isinf(self.m_phi)

    def due(self, step):
        """Which slow updates fire at 1-based learner step ``step``."""
        return (step % self.m_pi == 0,
                step % self.m_lambda == 0,
                not self.zeta_frozen and step % int(self.m_phi) == 0)


@dataclass(frozen=True)
class ZetaBox:
    sigma: tuple = (0.01, 1.0)
    k: tuple = (0.01, 3.0)
    n: tuple = (1.0, 3.0)

    def __post_init__(self):
        for name in ("sigma", "k", "n"):
            lo, hi = getattr(self, name)
            if not lo > 0 or hi < lo:
                raise ValueError(f"bad {name} bounds {lo, hi}")
        if self.n[0] < 1:
            raise ValueError("n lower bound must be >= 1")

    @property
    def lo(self):
        return np.array([self.sigma[0], self.k[0], self.n[0]])

    @property
    def hi(self):
        return np.array([self.sigma[1], self.k[1], self.n[1]])

    def contains(self, p, tol=0.0):
        z = p.zeta
        return bool(np.all(z >= self.lo - tol) and np.all(z <= self.hi + tol))

    def project(self, zeta):
        return np.clip(zeta, self.lo, self.hi)


def zeta_loss(batch_lam, params, weights, d, d_dot, d_next, d_dot_next):
    """Energy-function part of the regularised Lagrangian.

    The return term has no dependence on zeta and is dropped.
    """
    res = si.residual(params, d, d_dot, d_next, d_dot_next)
    return float(np.mean(batch_lam * res) + si.mag_reg(params, weights))


def zeta_grad(batch, lam, params, weights):
    """Gradient of ``mean(lambda * residual) + mag_reg`` w.r.t. (sigma, k, n)."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.size == 0:
        raise ValueError("empty batch")
    g = si.residual_grad(params, batch["d"], batch["d_dot"],
                         batch["d_next"], batch["d_dot_next"])
    return np.mean(lam[:, None] * g, axis=0) + si.mag_reg_grad(params, weights)


def zeta_step(params, grad, beta_zeta, box):
    """Plain projected gradient descent on zeta."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite zeta gradient")
    return params.with_zeta(box.project(params.zeta - beta_zeta * grad))


@dataclass
class ZetaLogRow:
    step: int
    sigma: float
    k: float
    n: float
    mean_lambda: float
    mean_residual: float
    mag_reg: float


@dataclass
class Learner:
    """Owns the networks and zeta; ``training_iteration`` is one learner step."""

    nets: object
    params: si.SafetyIndexParams
    schedule: MultiTimescaleSchedule
    weights: si.MagRegWeights
    box: ZetaBox
    rng: np.random.Generator
    step_count: int = 0
    counts: dict = field(default_factory=lambda: {"critic": 0, "policy": 0,
                                                  "multiplier": 0, "zeta": 0})
    zeta_log: list = field(default_factory=list)
    last_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.schedule.zeta_frozen and not self.box.contains(self.params, tol=1e-12):
            raise ValueError(f"initial zeta {self.params.zeta} outside the box")

    def training_iteration(self, batch):
        self.step_count += 1
        step = self.step_count
        do_pi, do_lam, do_zeta = self.schedule.due(step)
        losses = critic_update(self.nets, batch, self.params, self.rng)
        self.counts["critic"] += 1
        info = dict(losses)
        if do_pi or do_lam:
            g_theta, g_xi, pinfo = policy_and_multiplier_grads(
                self.nets, batch, self.rng, need_policy=do_pi, need_multiplier=do_lam)
            info.update(pinfo)
            if do_pi:
                self._guard(g_theta, pinfo.get("policy_loss", 0.0), "policy")
                apply_step(self.nets.policy.weights, g_theta, self.nets.opt["policy"], "descent")
                self.counts["policy"] += 1
            if do_lam:
                self._guard(g_xi, 0.0, "multiplier")
                apply_step(self.nets.multiplier.weights, g_xi,
                           self.nets.opt["multiplier"], "ascent")
                self.counts["multiplier"] += 1
        if do_zeta:
            self.update_zeta(batch)
        for name in ("q1", "q2", "qc"):
            if abs(info[name]) > DIVERGENCE_LIMIT:
                raise DivergenceError(f"{name} loss {info[name]:.3g} exceeds guard")
        self.last_info = info
        return info

    def update_zeta(self, batch):
        lam = self.nets.lam(batch["obs"])
        g = zeta_grad(batch, lam, self.params, self.weights)
        self._guard(g, 0.0, "zeta")
        self.params = zeta_step(self.params, g, self.schedule.beta_zeta, self.box)
        self.counts["zeta"] += 1
        res = si.residual(self.params, batch["d"], batch["d_dot"],
                          batch["d_next"], batch["d_dot_next"])
        self.zeta_log.append(ZetaLogRow(
            self.step_count, self.params.sigma, self.params.k, self.params.n,
            float(lam.mean()), float(res.mean()), float(si.mag_reg(self.params, self.weights))))

    def _guard(self, grad, loss, what):
        if not np.isfinite(loss) or abs(loss) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"{what} loss {loss} exceeds guard")
        norm = float(np.linalg.norm(grad))
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            raise DivergenceError(f"{what} gradient norm {norm} exceeds guard")


def training_iteration(learner, batch):
    return learner.training_iteration(batch)


def write_zeta_log(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(ZetaLogRow.__dataclass_fields__)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return path
