"""Grid oracles: backward reachability, learned unsafe sets and brute-force
feasibility checks of a certificate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import safety_index as si
from .envs import (ConfigError, aircraft_features_batch, aircraft_step_batch)

PROVENANCES = ("reachability_oracle", "learned_phi")


@dataclass(frozen=True)
class StateGrid:
    """Regular grid; periodic dimensions span ``[lo, hi)`` without duplicating
    the endpoint, other dimensions include both ends."""

    lo: tuple
    hi: tuple
    res: tuple
    periodic: tuple = ()
    names: tuple = ()

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.res)):
            raise ValueError("lo, hi, res must have equal length")
        if any(r < 2 for r in self.res):
            raise ValueError("resolution must be >= 2 per dimension")
        per = tuple(self.periodic) or (False,) * len(self.res)
        object.__setattr__(self, "periodic", per)

    @classmethod
    def aircraft(cls, res=(61, 61, 41), half_width=3.0):
        return cls((-half_width, -half_width, -np.pi), (half_width, half_width, np.pi),
                   tuple(res), (False, False, True), ("x", "y", "psi"))

    @classmethod
    def particle(cls, cfg, res=(41, 41, 9, 9), reach=1.0):
        L = cfg.obstacle_radius + cfg.robot_radius + reach
        v = cfg.max_speed
        return cls((-L, -L, -v, -v), (L, L, v, v), tuple(res),
                   (False,) * 4, ("x", "y", "vx", "vy"))

    @property
    def shape(self):
        return tuple(self.res)

    @property
    def size(self):
        return int(np.prod(self.res))

    def spacing(self, i):
        span = self.hi[i] - self.lo[i]
        return span / self.res[i] if self.periodic[i] else span / (self.res[i] - 1)

    def axis(self, i):
        return self.lo[i] + self.spacing(i) * np.arange(self.res[i])

    def points(self):
        """All cell coordinates, row-major, shape (size, ndim)."""
        mesh = np.meshgrid(*[self.axis(i) for i in range(len(self.res))], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "res": list(self.res),
                "periodic": list(self.periodic), "names": list(self.names)}


@dataclass
class UnsafeSetField:
    grid: StateGrid
    unsafe: np.ndarray
    provenance: str
    value: np.ndarray = None

    def __post_init__(self):
        self.unsafe = np.asarray(self.unsafe, dtype=bool).ravel()
        if self.unsafe.size != self.grid.size:
            raise ValueError("field length must equal the number of grid cells")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def count(self):
        return int(self.unsafe.sum())


# -- interpolation ------------------------------------------------------------

class _Interpolator:
    """Precomputed multilinear interpolation of grid values at fixed query points."""

    def __init__(self, grid, Q):
        Q = np.asarray(Q, dtype=np.float64)
        ndim = len(grid.res)
        strides = np.cumprod((1,) + tuple(grid.res[::-1]))[:-1][::-1]
        self.outside = np.zeros(Q.shape[0], dtype=bool)
        base_idx = []
        fracs = []
        for i in range(ndim):
            h = grid.spacing(i)
            u = (Q[:, i] - grid.lo[i]) / h
            i0 = np.floor(u)
            f = u - i0
            i0 = i0.astype(np.int64)
            if grid.periodic[i]:
                i0 %= grid.res[i]
                i1 = (i0 + 1) % grid.res[i]
            else:
                self.outside |= (u < -1e-9) | (u > grid.res[i] - 1 + 1e-9)
                i0 = np.clip(i0, 0, grid.res[i] - 2)
                f = np.clip(u - i0, 0.0, 1.0)
                i1 = i0 + 1
            base_idx.append((i0, i1))
            fracs.append(f)
        n_corner = 2 ** ndim
        self.idx = np.zeros((n_corner, Q.shape[0]), dtype=np.int64)
        self.w = np.ones((n_corner, Q.shape[0]))
        for c in range(n_corner):
            for i in range(ndim):
                bit = (c >> i) & 1
                self.idx[c] += base_idx[i][bit] * strides[i]
                self.w[c] *= fracs[i] if bit else 1.0 - fracs[i]

    def __call__(self, values):
        return np.einsum("cq,cq->q", self.w, values[self.idx])


# -- reachability ---------------------------------------------------------------

def action_grid_1d(low, high, K):
    """``K + 1`` evenly spaced turn rates including both ends; nested under doubling K."""
    return low + (high - low) * np.arange(K + 1) / K


def action_grid_2d(low, high, K):
    """``K`` directions on the boundary of the action box (full speed).

    Angles are ``2 pi j / K`` so doubling K keeps every earlier action.
    """
    th = 2 * np.pi * np.arange(K) / K
    c, s = np.cos(th), np.sin(th)
    m = np.maximum(np.abs(c), np.abs(s))
    unit = np.stack([c / m, s / m], axis=-1)
    return 0.5 * (high + low) + 0.5 * (high - low) * unit


def true_unsafe_set(env_cfg, grid, horizon_T=None, n_actions=9, tol=1e-6,
                    max_iter=1000, return_history=False):
    """Backward-reachable set of collision by discrete-time value iteration.

    ``V_0 = d_min - d`` and ``V_{t+1}(s) = max(V_0(s), min_a V_t(f(s, a)))``;
    a cell is unsafe iff ``V >= 0``. Next states that leave the grid use
    ``V_0`` there. Iterates to a fixpoint (sup-norm change < ``tol``) or for
    ``horizon_T`` steps when given.
    """
    if env_cfg.task != "aircraft":
        raise ConfigError("reachability oracle supports the aircraft task only")
    P = grid.points()
    d, _ = aircraft_features_batch(P, env_cfg)
    l0 = env_cfg.d_min - d
    actions = np.linspace(env_cfg.action_low, env_cfg.action_high, n_actions)
    interps, outside_vals = [], []
    for a in actions:
        Q = aircraft_step_batch(P, np.full(len(P), a), env_cfg)
        it = _Interpolator(grid, Q)
        dq, _ = aircraft_features_batch(Q, env_cfg)
        interps.append(it)
        outside_vals.append(env_cfg.d_min - dq)
    V = l0.copy()
    history = [V.copy()]
    limit = max_iter if horizon_T is None else int(horizon_T)
    iters = 0
    for _ in range(limit):
        best = np.full(len(P), np.inf)
        for it, ov in zip(interps, outside_vals):
            cand = it(V)
            cand = np.where(it.outside, ov, cand)
            np.minimum(best, cand, out=best)
        V_new = np.maximum(l0, best)
        change = float(np.max(np.abs(V_new - V)))
        V = V_new
        iters += 1
        if return_history:
            history.append(V.copy())
        if change < tol:
            break
    field = UnsafeSetField(grid, V >= 0, "reachability_oracle", value=V)
    field.iterations = iters
    if return_history:
        return field, history
    return field


# -- learned certificate -----------------------------------------------------------

def cell_features(env_cfg, grid):
    """(d, d_dot) at every cell; particle grids place one obstacle at the origin."""
    P = grid.points()
    if env_cfg.task == "aircraft":
        return aircraft_features_batch(P, env_cfg)
    return _particle_features(P[:, :2], P[:, 2:], env_cfg)


def _particle_features(pos, vel, cfg):
    dist = np.hypot(pos[:, 0], pos[:, 1])
    d = dist - cfg.obstacle_radius - cfg.robot_radius
    d_dot = np.einsum("ij,ij->i", pos, vel) / np.maximum(dist, 1e-12)
    return d, d_dot


def learned_unsafe_set(p, env_cfg, grid):
    """Cells where the certificate is positive (turn rate drops out of d_dot
    for the aircraft, so this is a pure state property)."""
    d, d_dot = cell_features(env_cfg, grid)
    val = si.phi(p, d, d_dot)
    return UnsafeSetField(grid, val > 0, "learned_phi", value=val)


# -- feasibility --------------------------------------------------------------------

def _particle_next(P, a, cfg):
    """One step of the velocity-commanded robot around an obstacle at the origin."""
    vel = a * cfg.max_speed
    pos = P[:, :2] + vel * cfg.dt
    if cfg.obstacle_kind == "pillar":
        contact = cfg.obstacle_radius + cfg.robot_radius
        dist = np.hypot(pos[:, 0], pos[:, 1])
        inside = dist < contact
        scale = np.where(inside, contact / np.maximum(dist, 1e-12), 1.0)
        pos = pos * scale[:, None]
    return pos, np.broadcast_to(vel, pos.shape)


def verify_feasibility(p, env_cfg, grid, K=16):
    """Brute-force check that every cell admits an action with negative residual.

    Aircraft cells try ``K + 1`` gridded turn rates; particle cells try
    ``K`` full-speed directions. Particle cells whose robot centre lies inside
    a pillar are unreachable and skipped.
    """
    if K < 2:
        raise ConfigError("need at least K=2 actions")
    P = grid.points()
    d0, dd0 = cell_features(env_cfg, grid)
    valid = np.ones(len(P), dtype=bool)
    if env_cfg.task == "aircraft":
        acts = action_grid_1d(env_cfg.action_low, env_cfg.action_high, K)
        nexts = []
        for a in acts:
            Q = aircraft_step_batch(P, np.full(len(P), a), env_cfg)
            nexts.append(aircraft_features_batch(Q, env_cfg))
    else:
        acts = action_grid_2d(env_cfg.action_low, env_cfg.action_high, K)
        if env_cfg.obstacle_kind == "pillar":
            valid = np.hypot(P[:, 0], P[:, 1]) >= env_cfg.obstacle_radius + env_cfg.robot_radius
        nexts = []
        for a in acts:
            pos, vel = _particle_next(P, a, env_cfg)
            nexts.append(_particle_features(pos, vel, env_cfg))
    best = np.full(len(P), np.inf)
    for d1, dd1 in nexts:
        np.minimum(best, si.residual(p, d0, dd0, d1, dd1), out=best)
    infeasible = (best >= 0) & valid
    n_valid = int(valid.sum())
    idx = np.flatnonzero(infeasible)
    return {
        "infeasible_fraction": float(infeasible.sum() / max(n_valid, 1)),
        "n_infeasible": int(infeasible.sum()),
        "n_cells": n_valid,
        "K": int(K),
        "n_actions": int(len(acts)),
        "infeasible_cells": idx,
        "infeasible_points": P[idx],
    }


# -- comparison -------------------------------------------------------------------

def set_metrics(a, b):
    """Cell-count metrics; ``coverage`` is the share of ``b`` that ``a`` also marks."""
    if a.grid.size != b.grid.size:
        raise ValueError("fields live on different grids")
    both = int(np.sum(a.unsafe & b.unsafe))
    nb = b.count
    return {
        "area_a": a.count,
        "area_b": nb,
        "coverage": 1.0 if nb == 0 else both / nb,
        "symmetric_difference": int(np.sum(a.unsafe ^ b.unsafe)),
        "n_cells": a.grid.size,
    }


# -- export ---------------------------------------------------------------------------

def export_field_csv(path, field):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    P = field.grid.points()
    names = list(field.grid.names) or [f"s{i}" for i in range(P.shape[1])]
    value = field.value if field.value is not None else field.unsafe.astype(float)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "value", "unsafe"])
        for row, v, u in zip(P, value, field.unsafe):
            w.writerow([*(f"{c:.10g}" for c in row), f"{v:.10g}", int(u)])
    return path


def read_field_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["unsafe"]) for r in rows], dtype=bool)


def export_field_binary(path, field):
    """``<path>.bin`` holds uint8 unsafe flags then float64 values; ``.json`` the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    value = field.value if field.value is not None else field.unsafe.astype(float)
    with path.with_suffix(".bin").open("wb") as fh:
        fh.write(field.unsafe.astype(np.uint8).tobytes())
        fh.write(np.asarray(value, dtype="<f8").tobytes())
    header = {"grid": field.grid.to_dict(), "provenance": field.provenance,
              "layout": "row-major", "unsafe_dtype": "u1", "value_dtype": "<f8"}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))
    return path


def load_field_binary(path):
    path = Path(path)
    head = json.loads(path.with_suffix(".json").read_text())
    g = head["grid"]
    grid = StateGrid(tuple(g["lo"]), tuple(g["hi"]), tuple(g["res"]),
                     tuple(g["periodic"]), tuple(g["names"]))
    raw = path.with_suffix(".bin").read_bytes()
    n = grid.size
    unsafe = np.frombuffer(raw[:n], dtype=np.uint8).astype(bool)
    value = np.frombuffer(raw[n:], dtype="<f8").copy()
    return UnsafeSetField(grid, unsafe, head["provenance"], value=value)


def boundary_slice(field, psi):
    """2-D (x, y) slice of a 3-D aircraft field at the grid heading nearest ``psi``."""
    g = field.grid
    axis = g.axis(2)
    diff = np.abs(np.angle(np.exp(1j * (axis - psi))))
    j = int(np.argmin(diff))
    arr = field.unsafe.reshape(g.shape)[:, :, j]
    return g.axis(0), g.axis(1), float(axis[j]), arr
