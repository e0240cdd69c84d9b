"""Policy evaluation, multi-seed aggregation and comparison tables."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .envs import Env

ALGORITHMS = ("SafeMR", "JointSIS", "FAC-phi0", "FAC-phih")


@dataclass
class EvalRecord:
    iteration: int
    mean_return: float
    mean_episode_cost: float
    sigma: float
    k: float
    n: float
    mean_multiplier: float
    seed: int

    def __post_init__(self):
        if self.mean_episode_cost < 0:
            raise ValueError("episode cost cannot be negative")

    @property
    def zeta(self):
        return (self.sigma, self.k, self.n)


@dataclass
class RunSummary:
    algorithm: str
    env: str
    final_return: float
    final_return_ci: float
    final_cost: float
    seeds: list = field(default_factory=list)
    zeta: list = field(default_factory=list)
    improvement: float = None

    @property
    def is_safe(self):
        return self.final_cost == 0


def episode_seed(seed, i):
    return 1_000_003 * (seed + 1) + i


def rollout(policy_fn, env_cfg, episode_seed_, record=False):
    """Run one episode; returns (return, cost, rows)."""
    env = Env(env_cfg)
    obs = env.reset(episode_seed_)
    total, cost, rows = 0.0, 0, []
    for t in range(env_cfg.horizon):
        a = np.atleast_1d(policy_fn(obs))
        state_vec = env.state.vector()
        obs, res = env.step(a)
        total += res.reward
        cost += int(res.violation)
        if record:
            rows.append((t, state_vec, a, res.reward, res.features_next.d,
                         res.features_next.d_dot, res.violation))
        if res.done or res.truncated:
            break
    return total, cost, rows


def evaluate_policy(policy, env_cfg, episodes=20, seed=0, iteration=0, params=None,
                    lam_fn=None, trajectories=None):
    """Deterministic-mode evaluation over ``episodes`` fixed episode seeds.

    ``policy`` is either an ``AgentNets`` or a callable ``obs -> action``.
    When ``trajectories`` is a list, per-episode rows are appended to it.
    """
    from .agent import AgentNets, act

    if isinstance(policy, AgentNets):
        nets = policy
        policy_fn = lambda o: act(nets, o, "deterministic")
        lam_fn = lam_fn or (lambda o: float(nets.lam(o)))
    else:
        policy_fn = policy
    returns, costs, lams = [], [], []
    for i in range(episodes):
        ret, cost, rows = rollout(policy_fn, env_cfg, episode_seed(seed, i),
                                  record=trajectories is not None)
        returns.append(ret)
        costs.append(cost)
        if trajectories is not None:
            trajectories.append(rows)
    if lam_fn is not None:
        env = Env(env_cfg)
        lams = [lam_fn(env.reset(episode_seed(seed, i))) for i in range(episodes)]
    zeta = params.zeta if params is not None else (math.nan,) * 3
    return EvalRecord(iteration, float(np.mean(returns)), float(np.mean(costs)),
                      float(zeta[0]), float(zeta[1]), float(zeta[2]),
                      float(np.mean(lams)) if lams else math.nan, seed)


def t_interval(values, confidence=0.95):
    """(mean, half_width) of a Student-t interval; one value gives width 0."""
    x = np.asarray(values, dtype=np.float64)
    m = float(x.mean())
    if x.size < 2:
        return m, 0.0
    sd = float(x.std(ddof=1))
    if sd == 0:
        return m, 0.0
    q = stats.t.ppf(0.5 + confidence / 2, x.size - 1)
    return m, float(q * sd / math.sqrt(x.size))


def aggregate(records, key="mean_return", confidence=0.95):
    """Group records by iteration across seeds -> rows (iteration, mean, half, n)."""
    by_iter = {}
    for r in records:
        by_iter.setdefault(r.iteration, []).append(getattr(r, key))
    out = []
    for it in sorted(by_iter):
        m, h = t_interval(by_iter[it], confidence)
        out.append({"iteration": it, "mean": m, "ci": h, "n": len(by_iter[it])})
    return out


def final_mean(records, key="mean_return", last=10):
    """Mean of ``key`` over a run's last ``last`` evaluation records."""
    recs = sorted(records, key=lambda r: r.iteration)[-last:]
    return float(np.mean([getattr(r, key) for r in recs]))


def improvement(safemr_return, baseline_return):
    """Relative improvement ``(S - B) / |B|``; a negative baseline keeps the sign meaningful."""
    if baseline_return == 0:
        return math.inf if safemr_return > 0 else (0.0 if safemr_return == 0 else -math.inf)
    return (safemr_return - baseline_return) / abs(baseline_return)


def improvement_table(summaries):
    """Per environment: SafeMR return, best safe baseline and the improvement."""
    envs = {}
    for s in summaries:
        envs.setdefault(s.env, []).append(s)
    rows = []
    for env, group in sorted(envs.items()):
        ours = [s for s in group if s.algorithm == "SafeMR"]
        safe_base = [s for s in group if s.algorithm != "SafeMR" and s.is_safe]
        if not ours:
            continue
        best = max(safe_base, key=lambda s: s.final_return) if safe_base else None
        row = {"env": env, "safemr_return": ours[0].final_return,
               "safemr_cost": ours[0].final_cost,
               "best_safe_algorithm": best.algorithm if best else None,
               "best_safe_return": best.final_return if best else None,
               "improvement": (improvement(ours[0].final_return, best.final_return)
                               if best else None)}
        rows.append(row)
    return rows


# -- csv ----------------------------------------------------------------------

def write_records(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(EvalRecord.__dataclass_fields__)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return path


def read_records(path):
    out = []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(
                int(row["iteration"]), float(row["mean_return"]),
                float(row["mean_episode_cost"]), float(row["sigma"]), float(row["k"]),
                float(row["n"]), float(row["mean_multiplier"]), int(row["seed"])))
    return out
