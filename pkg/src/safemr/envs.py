"""Deterministic 2-D simulators with closed-form distance features.

Two families share one contract (``reset`` / ``step`` / ``features`` /
``observe``):

* ``aircraft``: relative Dubins dynamics of an intruder seen from an ego
  airplane that controls its turn rate; the intruder flies straight.
* ``goal`` / ``push``: a velocity-commanded point robot in a square arena
  with circular hazards (pass-through) or pillars (solid).

States are small dataclasses and are never mutated by ``step``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .safety_index import D_FLOOR, DistanceFeature

TASKS = ("aircraft", "goal", "push")
OBSTACLE_KINDS = ("hazard", "pillar")
OBSTACLE_RADII = (0.15, 0.30)
MAX_PLACEMENT_TRIES = 10_000


class ConfigError(ValueError):
    pass


class SimulationFault(FloatingPointError):
    pass


@dataclass
class EnvConfig:
    task: str = "goal"
    obstacle_kind: str = "pillar"
    obstacle_radius: float = 0.15
    obstacle_count: int = 4
    dt: float = 0.05
    horizon: int = 500
    action_low: float = -1.0
    action_high: float = 1.0
    # particle
    max_speed: float = 1.0
    robot_radius: float = 0.05
    goal_radius: float = 0.3
    box_radius: float = 0.2
    box_approach_weight: float = 1.0
    goal_bonus: float = 1.0
    arena: float = 2.0
    sensor_range: float = 5.0
    # aircraft
    v_e: float = 1.0
    v_p: float = 1.0
    d_min: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.obstacle_kind not in OBSTACLE_KINDS:
            raise ConfigError(f"obstacle_kind must be one of {OBSTACLE_KINDS}")
        if self.task != "aircraft" and not any(
                np.isclose(self.obstacle_radius, r) for r in OBSTACLE_RADII):
            raise ConfigError(f"obstacle_radius must be one of {OBSTACLE_RADII}")
        if self.horizon <= 0 or self.dt <= 0:
            raise ConfigError("horizon and dt must be positive")
        if self.obstacle_count < 0:
            raise ConfigError("obstacle_count must be >= 0")
        if self.action_high <= self.action_low:
            raise ConfigError("action_high must exceed action_low")
        if self.d_min <= D_FLOOR:
            raise ConfigError(f"d_min must exceed the distance floor {D_FLOOR}")

    @classmethod
    def aircraft(cls, **overrides):
        base = dict(task="aircraft", obstacle_count=1, dt=0.1, horizon=100,
                    d_min=0.5, arena=3.0, v_e=1.0, v_p=1.0)
        base.update(overrides)
        return cls(**base)

    @property
    def act_dim(self):
        return 1 if self.task == "aircraft" else 2

    @property
    def obs_dim(self):
        return {"aircraft": 6, "goal": 8, "push": 12}[self.task]

    @property
    def name(self):
        if self.task == "aircraft":
            return "Aircraft"
        kind = "Pillars" if self.obstacle_kind == "pillar" else "Hazards"
        return f"{kind}-{self.obstacle_radius:.2f}-{self.task.capitalize()}"

    def to_dict(self):
        return asdict(self)


# -- states -------------------------------------------------------------------

@dataclass(frozen=True)
class AircraftState:
    x: float
    y: float
    psi: float
    t: int = 0

    def vector(self):
        return np.array([self.x, self.y, self.psi])


@dataclass(frozen=True)
class ParticleState:
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    centers: np.ndarray
    box: np.ndarray = field(default_factory=lambda: np.zeros(2))
    t: int = 0

    def vector(self):
        return np.concatenate([self.pos, self.vel, self.goal, self.box,
                               self.centers.ravel()])


@dataclass(frozen=True)
class StepResult:
    next_state: object
    reward: float
    violation: bool
    features_now: DistanceFeature
    features_next: DistanceFeature
    done: bool
    truncated: bool
    raw_distance: float


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


# -- aircraft -------------------------------------------------------------------

def aircraft_deriv(X, omega, v_e, v_p):
    """Relative dynamics; ``X`` has columns (x, y, psi)."""
    x, y, psi = X[..., 0], X[..., 1], X[..., 2]
    return np.stack([-v_e + v_p * np.cos(psi) + omega * y,
                     v_p * np.sin(psi) - omega * x,
                     -omega * np.ones_like(psi)], axis=-1)


def aircraft_step_batch(X, omega, cfg):
    """One RK4 step of the relative dynamics for a batch of states."""
    X = np.asarray(X, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    h = cfg.dt
    k1 = aircraft_deriv(X, omega, cfg.v_e, cfg.v_p)
    k2 = aircraft_deriv(X + 0.5 * h * k1, omega, cfg.v_e, cfg.v_p)
    k3 = aircraft_deriv(X + 0.5 * h * k2, omega, cfg.v_e, cfg.v_p)
    k4 = aircraft_deriv(X + h * k3, omega, cfg.v_e, cfg.v_p)
    out = X + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[..., 2] = wrap_angle(out[..., 2])
    return out


def aircraft_features_batch(X, cfg):
    """Raw distance and its closed-form rate; the turn rate drops out."""
    x, y, psi = X[..., 0], X[..., 1], X[..., 2]
    d = np.hypot(x, y)
    safe = np.maximum(d, 1e-12)
    d_dot = (x * (-cfg.v_e + cfg.v_p * np.cos(psi)) + y * cfg.v_p * np.sin(psi)) / safe
    return d, d_dot


def _aircraft_reset(cfg, rng):
    for _ in range(MAX_PLACEMENT_TRIES):
        r = cfg.arena * np.sqrt(rng.uniform())
        th = rng.uniform(-np.pi, np.pi)
        if r >= cfg.d_min:
            psi = float(wrap_angle(rng.uniform(-np.pi, np.pi)))
            return AircraftState(r * np.cos(th), r * np.sin(th), psi, 0)
    raise ConfigError("could not place the intruder")


def _aircraft_step(state, action, cfg):
    omega = float(np.clip(np.ravel(action)[0], cfg.action_low, cfg.action_high))
    X = state.vector()
    d0, dd0 = aircraft_features_batch(X, cfg)
    X1 = aircraft_step_batch(X, omega, cfg)
    if not np.all(np.isfinite(X1)):
        raise SimulationFault("aircraft state became non-finite")
    d1, dd1 = aircraft_features_batch(X1, cfg)
    nxt = AircraftState(float(X1[0]), float(X1[1]), float(X1[2]), state.t + 1)
    reward = -abs(omega)
    done = bool(d1 > cfg.arena)
    return StepResult(nxt, reward, bool(d1 < cfg.d_min),
                      DistanceFeature(max(float(d0), D_FLOOR), float(dd0)),
                      DistanceFeature(max(float(d1), D_FLOOR), float(dd1)),
                      done, nxt.t >= cfg.horizon and not done, float(d1))


# -- particle -------------------------------------------------------------------

def particle_distance(pos, vel, centers, cfg):
    """Nearest-obstacle surface distance (raw, may be negative), its rate and index."""
    if len(centers) == 0:
        return cfg.sensor_range, 0.0, -1
    rel = pos - centers
    dist = np.hypot(rel[:, 0], rel[:, 1])
    surf = dist - cfg.obstacle_radius - cfg.robot_radius
    i = int(np.argmin(surf))
    norm = max(dist[i], 1e-12)
    d_dot = float(rel[i] @ vel) / norm
    return float(min(surf[i], cfg.sensor_range)), d_dot, i


def _sample_free(rng, cfg, centers, clearance, bound):
    for _ in range(MAX_PLACEMENT_TRIES):
        p = rng.uniform(-bound, bound, size=2)
        if len(centers) == 0 or np.min(np.hypot(*(p - centers).T)) >= clearance:
            return p
    raise ConfigError("arena too crowded: placement failed after "
                      f"{MAX_PLACEMENT_TRIES} tries")


def _particle_reset(cfg, rng):
    R, r = cfg.obstacle_radius, cfg.robot_radius
    bound = cfg.arena - 0.2
    centers = np.zeros((0, 2))
    # pillar gaps wide enough that projecting out of one cannot land in another
    gap = 2 * R + 2 * r + 2 * cfg.d_min + 0.1
    for _ in range(cfg.obstacle_count):
        c = _sample_free(rng, cfg, centers, gap, bound)
        centers = np.vstack([centers, c])
    robot_clear = R + r + cfg.d_min + 0.05
    pos = _sample_free(rng, cfg, centers, robot_clear, bound)
    goal = _sample_goal(rng, cfg, centers, pos)
    box = np.zeros(2)
    if cfg.task == "push":
        box_clear = R + cfg.box_radius + 0.05
        for _ in range(MAX_PLACEMENT_TRIES):
            box = _sample_free(rng, cfg, centers, box_clear, bound - 0.3)
            if np.hypot(*(box - pos)) > cfg.box_radius + r + 0.1:
                break
        else:
            raise ConfigError("could not place the box")
    return ParticleState(pos, np.zeros(2), goal, centers, box, 0)


def _sample_goal(rng, cfg, centers, avoid):
    clear = cfg.obstacle_radius + cfg.goal_radius
    for _ in range(MAX_PLACEMENT_TRIES):
        g = _sample_free(rng, cfg, centers, clear, cfg.arena - cfg.goal_radius)
        if np.hypot(*(g - avoid)) > cfg.goal_radius + 0.5:
            return g
    raise ConfigError("could not place the goal")


def project_out_of_pillars(pos, centers, cfg):
    """Move a point robot back onto the surface of any pillar it penetrates."""
    contact = cfg.obstacle_radius + cfg.robot_radius
    pos = pos.copy()
    for c in centers:
        rel = pos - c
        dist = np.hypot(*rel)
        if dist < contact:
            if dist < 1e-12:
                rel, dist = np.array([1.0, 0.0]), 1.0
            pos = c + contact * rel / dist
    return pos


def _particle_step(state, action, cfg, rng):
    a = np.clip(np.asarray(action, dtype=np.float64).ravel()[:2],
                cfg.action_low, cfg.action_high)
    vel = a * cfg.max_speed
    d0, dd0, _ = particle_distance(state.pos, state.vel, state.centers, cfg)
    lim = cfg.arena - cfg.robot_radius
    pos = np.clip(state.pos + vel * cfg.dt, -lim, lim)
    if cfg.obstacle_kind == "pillar":
        pos = project_out_of_pillars(pos, state.centers, cfg)
    if not np.all(np.isfinite(pos)):
        raise SimulationFault("robot position became non-finite")
    box = state.box
    goal = state.goal
    reward = 0.0
    if cfg.task == "push":
        rel = box - pos
        dist = np.hypot(*rel)
        contact = cfg.box_radius + cfg.robot_radius
        if dist < contact:
            unit = rel / dist if dist > 1e-12 else np.array([1.0, 0.0])
            box = np.clip(box + (contact - dist) * unit, -cfg.arena + cfg.box_radius,
                          cfg.arena - cfg.box_radius)
        reward += np.hypot(*(state.box - goal)) - np.hypot(*(box - goal))
        reward += cfg.box_approach_weight * (
            max(np.hypot(*(state.box - state.pos)) - contact, 0.0)
            - max(np.hypot(*(box - pos)) - contact, 0.0))
        reached = np.hypot(*(box - goal)) < cfg.goal_radius
    else:
        reward += np.hypot(*(state.pos - goal)) - np.hypot(*(pos - goal))
        reached = np.hypot(*(pos - goal)) < cfg.goal_radius
    if reached:
        reward += cfg.goal_bonus
        goal = _sample_goal(rng, cfg, state.centers, box if cfg.task == "push" else pos)
    d1, dd1, _ = particle_distance(pos, vel, state.centers, cfg)
    nxt = ParticleState(pos, vel, goal, state.centers, box, state.t + 1)
    return StepResult(nxt, float(reward), bool(d1 < cfg.d_min),
                      DistanceFeature(max(d0, D_FLOOR), dd0),
                      DistanceFeature(max(d1, D_FLOOR), dd1),
                      False, nxt.t >= cfg.horizon, float(d1))


# -- public contract --------------------------------------------------------------

def reset(cfg, seed):
    rng = np.random.default_rng(seed)
    if cfg.task == "aircraft":
        return _aircraft_reset(cfg, rng)
    return _particle_reset(cfg, rng)


def features(state, cfg):
    if isinstance(state, AircraftState):
        d, d_dot = aircraft_features_batch(state.vector(), cfg)
        return DistanceFeature(max(float(d), D_FLOOR), float(d_dot))
    d, d_dot, _ = particle_distance(state.pos, state.vel, state.centers, cfg)
    return DistanceFeature(max(d, D_FLOOR), d_dot)


def observe(state, cfg):
    if isinstance(state, AircraftState):
        d, d_dot = aircraft_features_batch(state.vector(), cfg)
        return np.array([state.x, state.y, np.sin(state.psi), np.cos(state.psi),
                         float(d), float(d_dot)])
    d, d_dot, i = particle_distance(state.pos, state.vel, state.centers, cfg)
    if i >= 0:
        rel = state.centers[i] - state.pos
        bearing = rel / max(np.hypot(*rel), 1e-12)
    else:
        bearing = np.zeros(2)
    obs = [state.goal - state.pos, state.vel, [d, d_dot], bearing]
    if cfg.task == "push":
        obs += [state.box - state.pos, state.goal - state.box]
    return np.concatenate(obs)


class Env:
    """Stateful wrapper around the pure functions, for rollouts.

    Goal resampling draws from an episode RNG seeded at reset, so a rollout
    is a deterministic function of ``(cfg, seed, actions)``.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.state = None
        self._rng = None

    def reset(self, seed):
        self._rng = np.random.default_rng([seed, 1])
        self.state = reset(self.cfg, seed)
        return observe(self.state, self.cfg)

    def step(self, action):
        res = step(self.state, action, self.cfg, self._rng)
        self.state = res.next_state
        return observe(self.state, self.cfg), res

    def clone(self):
        other = Env(self.cfg)
        other.state = self.state
        if self._rng is not None:
            other._rng = np.random.default_rng()
            other._rng.bit_generator.state = self._rng.bit_generator.state
        return other


def step(state, action, cfg, rng=None):
    """Advance one step. ``rng`` only drives goal resampling in particle tasks."""
    if cfg.task == "aircraft":
        return _aircraft_step(state, action, cfg)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, state.t])
    return _particle_step(state, action, cfg, rng)


# -- trajectory export ------------------------------------------------------------

def export_trajectory(path, rows, cfg):
    """Write rollout rows ``(t, state_vec, action, reward, d, d_dot, violation)``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    n_state = len(rows[0][1]) if rows else 0
    n_act = len(rows[0][2]) if rows else cfg.act_dim
    header = (["t"] + [f"s{i}" for i in range(n_state)] + [f"a{i}" for i in range(n_act)]
              + ["reward", "d", "d_dot", "violation"])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, s, a, r, d, dd, v in rows:
            w.writerow([t, *map(repr, map(float, s)), *map(repr, map(float, a)),
                        repr(float(r)), repr(float(d)), repr(float(dd)), int(bool(v))])
    return path


def read_trajectory(path):
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def with_seed(cfg, seed):
    return replace(cfg, seed=seed)
