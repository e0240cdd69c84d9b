"""Experiment configuration: an INI file with one section per component.

Unknown sections or keys are errors, reported with their ``section.key``
path. See the README for the full schema.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .agent import AgentConfig
from .envs import EnvConfig
from .safety_index import MagRegWeights, SafetyIndexParams
from .synthesis import MultiTimescaleSchedule, ZetaBox

MODES = ("safemr", "jointsis", "fac_phi0", "fac_phih")
ALGORITHM_TAGS = {"safemr": "SafeMR", "jointsis": "JointSIS",
                  "fac_phi0": "FAC-phi0", "fac_phih": "FAC-phih"}


class ConfigParseError(ValueError):
    pass


@dataclass
class RunSettings:
    mode: str = "safemr"
    seeds: tuple = (0,)
    total_env_steps: int = 200_000
    warmup_steps: int = 2_000
    train_every: int = 1
    eval_interval: int = 2_500
    eval_episodes: int = 20
    final_evals: int = 10
    checkpoint_interval: int = 25_000
    output_dir: str = "runs/experiment"
    eta_D: float = 0.05
    phi_h_k: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigParseError(f"run.mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    schedule: MultiTimescaleSchedule = field(default_factory=MultiTimescaleSchedule)
    mag_reg: MagRegWeights = field(default_factory=lambda: MagRegWeights(0.35, 0.15))
    zeta_init: tuple = (0.5, 1.0, 2.0)
    box: ZetaBox = field(default_factory=ZetaBox)
    run: RunSettings = field(default_factory=RunSettings)

    @property
    def algorithm(self):
        return ALGORITHM_TAGS[self.run.mode]

    def effective(self):
        """Apply the mode: zero the regulariser or freeze a fixed certificate."""
        mode = self.run.mode
        cfg = self
        if mode == "jointsis":
            cfg = replace(cfg, mag_reg=MagRegWeights(0.0, 0.0))
        elif mode in ("fac_phi0", "fac_phih"):
            s = self.schedule
            cfg = replace(cfg, mag_reg=MagRegWeights(0.0, 0.0),
                          schedule=MultiTimescaleSchedule(s.m_pi, s.m_lambda, math.inf,
                                                          s.beta_pi, s.beta_lambda, s.beta_zeta))
        # the policy and multiplier step sizes live in the schedule
        return replace(cfg, agent=replace(cfg.agent, lr_policy=cfg.schedule.beta_pi,
                                          lr_multiplier=cfg.schedule.beta_lambda))

    def initial_params(self):
        d_min, eta = self.env.d_min, self.run.eta_D
        if self.run.mode == "fac_phi0":
            # d_min - d
            return SafetyIndexParams(0.0, 0.0, 1.0, d_min, eta)
        if self.run.mode == "fac_phih":
            return SafetyIndexParams(0.3, self.run.phi_h_k, 2.0, d_min, eta)
        s, k, n = self.zeta_init
        return SafetyIndexParams(s, k, n, d_min, eta)

    def to_ini(self):
        cp = configparser.ConfigParser()
        for section, obj in _sections(self).items():
            cp[section] = {k: _fmt(v) for k, v in obj.items()}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_ini())


_SCHEDULE_OWNED = ("lr_policy", "lr_multiplier")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sections(cfg):
    sched = dataclasses.asdict(cfg.schedule)
    return {
        "env": dataclasses.asdict(cfg.env),
        "agent": {k: v for k, v in dataclasses.asdict(cfg.agent).items()
                  if k not in _SCHEDULE_OWNED},
        "schedule": sched,
        "mag_reg": dataclasses.asdict(cfg.mag_reg),
        "zeta": {"init": cfg.zeta_init, "sigma_bounds": cfg.box.sigma,
                 "k_bounds": cfg.box.k, "n_bounds": cfg.box.n},
        "run": dataclasses.asdict(cfg.run),
    }


def _coerce(text, default, path):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            items = [t for t in text.replace(",", " ").split() if t]
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(t) for t in items)
            return tuple(float(t) for t in items)
        if isinstance(default, int):
            if text.lower() in ("inf", "infinity"):
                return math.inf  # an update period that never fires
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigParseError(f"{path}: cannot parse {text!r}") from exc


def _update(obj, section, items, factory):
    base = dataclasses.asdict(obj)
    kwargs = dict(base)
    # configparser lower-cases option names; match fields such as eta_D regardless
    names = {k.lower(): k for k in base}
    for raw, text in items:
        key = names.get(raw.lower())
        if key is None or (section == "agent" and key in _SCHEDULE_OWNED):
            raise ConfigParseError(f"{section}.{raw}: unknown key")
        default = getattr(obj, key)
        kwargs[key] = _coerce(text, default, f"{section}.{key}")
    for k, v in kwargs.items():
        if isinstance(getattr(obj, k), tuple) and isinstance(v, list):
            kwargs[k] = tuple(v)
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigParseError(f"{section}: {exc}") from exc


def parse_config(text, base=None):
    """Parse INI text on top of ``base`` (default: ``ExperimentConfig()``)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc)) from exc
    cfg = base or ExperimentConfig()
    known = {"env", "agent", "schedule", "mag_reg", "zeta", "run", "preset"}
    for section in cp.sections():
        if section not in known:
            raise ConfigParseError(f"{section}: unknown section")
    if cp.has_section("preset"):
        items = dict(cp.items("preset"))
        extra = set(items) - {"name"}
        if extra:
            raise ConfigParseError(f"preset.{sorted(extra)[0]}: unknown key")
        cfg = preset(items["name"].strip())
    env, agent, sched = cfg.env, cfg.agent, cfg.schedule
    mag, run, box, zinit = cfg.mag_reg, cfg.run, cfg.box, cfg.zeta_init
    if cp.has_section("env"):
        env = _update(env, "env", cp.items("env"), EnvConfig)
    if cp.has_section("agent"):
        agent = _update(agent, "agent", cp.items("agent"), AgentConfig)
    if cp.has_section("schedule"):
        sched = _update(sched, "schedule", cp.items("schedule"), MultiTimescaleSchedule)
    if cp.has_section("mag_reg"):
        mag = _update(mag, "mag_reg", cp.items("mag_reg"), MagRegWeights)
    if cp.has_section("run"):
        run = _update(run, "run", cp.items("run"), RunSettings)
    if cp.has_section("zeta"):
        z = dict(cp.items("zeta"))
        allowed = {"init", "sigma_bounds", "k_bounds", "n_bounds"}
        for key in z:
            if key not in allowed:
                raise ConfigParseError(f"zeta.{key}: unknown key")
        if "init" in z:
            zinit = _coerce(z["init"], (0.0,), "zeta.init")
            if len(zinit) != 3:
                raise ConfigParseError("zeta.init: need three values sigma, k, n")
        bounds = {name: _coerce(z[f"{name}_bounds"], (0.0,), f"zeta.{name}_bounds")
                  for name in ("sigma", "k", "n") if f"{name}_bounds" in z}
        try:
            box = replace(box, **bounds)
        except ValueError as exc:
            raise ConfigParseError(f"zeta: {exc}") from exc
    out = ExperimentConfig(env, agent, sched, mag, tuple(zinit), box, run)
    if out.run.mode not in ("fac_phi0", "fac_phih"):
        if not out.box.contains(out.initial_params()):
            raise ConfigParseError(f"zeta.init: {zinit} outside the zeta box")
    return out


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(f"config file not found: {path}")
    return parse_config(path.read_text())


# -- presets ----------------------------------------------------------------------

def _particle_env(task, kind, radius, **kw):
    return EnvConfig(task=task, obstacle_kind=kind, obstacle_radius=radius, **kw)


def preset(name):
    """Named experiment presets.

    ``<env>`` presets use the default budgets; ``desk-<env>`` presets are the
    compact settings the acceptance suite runs on one CPU.
    """
    envs = {
        "aircraft": EnvConfig.aircraft(),
        "pillars-0.15-goal": _particle_env("goal", "pillar", 0.15),
        "pillars-0.30-goal": _particle_env("goal", "pillar", 0.30),
        "hazards-0.15-push": _particle_env("push", "hazard", 0.15),
        "hazards-0.30-push": _particle_env("push", "hazard", 0.30),
        "hazards-0.15-goal": _particle_env("goal", "hazard", 0.15),
        "pillars-0.15-push": _particle_env("push", "pillar", 0.15),
    }
    desk = name.startswith("desk-")
    key = name[5:] if desk else name
    if key not in envs:
        raise ConfigParseError(f"unknown preset {name!r}; choose from "
                               f"{sorted(envs) + ['desk-' + k for k in envs]}")
    env = envs[key]
    agent = AgentConfig(multiplier_init=1.0)
    if env.task != "aircraft":
        # particle residuals far from any obstacle are large and negative;
        # flooring the critic targets keeps the boundary region resolvable
        agent = replace(agent, qc_target_floor=-0.1)
    cfg = ExperimentConfig(env=env, agent=agent)
    if env.task == "aircraft":
        cfg.run.total_env_steps = 100_000
        # conservative start; synthesis only shrinks sigma
        cfg.zeta_init = (1.0, 1.0, 2.0)
    if desk:
        cfg = desk_scale(cfg)
    return cfg


def desk_scale(cfg):
    """Compact budget for one-CPU acceptance runs."""
    aircraft = cfg.env.task == "aircraft"
    env = replace(cfg.env, horizon=100 if aircraft else 200)
    agent = replace(cfg.agent, hidden=(32, 32), multiplier_hidden=(32,),
                    batch_size=64, buffer_capacity=50_000)
    run = replace(cfg.run, total_env_steps=20_000 if aircraft else 30_000,
                  warmup_steps=1_000, eval_interval=1_000, eval_episodes=10,
                  checkpoint_interval=10_000)
    # with ~30k learner steps the multiplier needs a larger step and zeta a
    # smaller one, or sigma collapses before the multiplier has settled
    schedule = replace(cfg.schedule, beta_lambda=1e-3,
                       beta_zeta=3e-5 if aircraft else 1e-4)
    return replace(cfg, env=env, agent=agent, run=run, schedule=schedule)


def with_mode(cfg, mode, **mag):
    run = replace(cfg.run, mode=mode)
    out = replace(cfg, run=run, agent=replace(cfg.agent))
    if mag:
        out = replace(out, mag_reg=MagRegWeights(**mag))
    return out
