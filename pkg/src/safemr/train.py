"""Rollout + learner loop for one seed, with logging and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import safety_index as si
from .agent import AgentNets, ReplayBuffer, Transition, act
from .approximator import NumericError
from .envs import Env, EnvConfig
from .eval import evaluate_policy, final_mean, write_records
from .synthesis import Learner, write_zeta_log

log = logging.getLogger(__name__)


def build_learner(cfg, seed):
    cfg = cfg.effective()
    rng = np.random.default_rng(seed)
    nets = AgentNets.build(cfg.env.obs_dim, cfg.env.act_dim, cfg.agent, rng,
                           cfg.env.action_low, cfg.env.action_high)
    learner = Learner(nets, cfg.initial_params(), cfg.schedule, cfg.mag_reg, cfg.box,
                      np.random.default_rng([seed, 7]))
    return cfg, learner


def save_checkpoint(directory, learner, cfg, seed, env_steps):
    directory = Path(directory)
    learner.nets.save(directory)
    state = {
        "seed": seed,
        "env_steps": env_steps,
        "learner_steps": learner.step_count,
        "counts": learner.counts,
        "params": learner.params.to_dict(),
        "mag_reg": asdict(learner.weights),
        "mode": cfg.run.mode,
        "env": cfg.env.to_dict(),
        "rng": learner.rng.bit_generator.state,
    }
    (directory / "state.json").write_text(json.dumps(state, indent=2))
    return directory


def load_checkpoint(directory):
    """Return ``(nets, params, env_cfg, state)`` from a checkpoint directory."""
    directory = Path(directory)
    state = json.loads((directory / "state.json").read_text())
    nets = AgentNets.load(directory)
    params = si.SafetyIndexParams(**state["params"])
    env_cfg = EnvConfig(**state["env"])
    return nets, params, env_cfg, state


def run_seed(cfg, seed, out_dir, progress=False):
    """Train one seed and write ``eval.csv``, ``zeta.csv``, ``summary.json``
    and checkpoints under ``out_dir``. Returns the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.ini")
    eff, learner = build_learner(cfg, seed)
    env_cfg = replace(eff.env, seed=seed)
    run = eff.run
    buffer = ReplayBuffer(eff.agent.buffer_capacity, env_cfg.obs_dim, env_cfg.act_dim,
                          seed=seed + 1)
    rng = np.random.default_rng([seed, 3])
    env = Env(env_cfg)
    episode = 0
    obs = env.reset(int(rng.integers(2**31)))
    records = []
    status = "ok"
    error = None
    train_violations = 0
    t0 = time.perf_counter()
    env_step = 0
    try:
        for env_step in range(1, run.total_env_steps + 1):
            if env_step <= run.warmup_steps:
                a = rng.uniform(env_cfg.action_low, env_cfg.action_high, env_cfg.act_dim)
            else:
                a = act(learner.nets, obs, "stochastic", rng)
            next_obs, res = env.step(a)
            train_violations += int(res.violation)
            buffer.add(Transition(obs, a, res.reward, next_obs, res.features_now,
                                  res.features_next, res.violation, res.done))
            obs = next_obs
            if res.done or res.truncated:
                episode += 1
                obs = env.reset(int(rng.integers(2**31)))
            if env_step > run.warmup_steps and env_step % run.train_every == 0 \
                    and len(buffer) >= eff.agent.batch_size:
                learner.training_iteration(buffer.sample(eff.agent.batch_size))
                ls = learner.step_count
                if ls % run.eval_interval == 0:
                    rec = evaluate_policy(learner.nets, env_cfg, run.eval_episodes, seed,
                                          iteration=ls, params=learner.params)
                    records.append(rec)
                    if progress:
                        log.info("seed %d step %d return %.3f cost %.2f zeta %s",
                                 seed, ls, rec.mean_return, rec.mean_episode_cost,
                                 np.round(learner.params.zeta, 3))
                if ls % run.checkpoint_interval == 0:
                    save_checkpoint(out_dir / "checkpoint", learner, eff, seed, env_step)
    except NumericError as exc:
        status = "diverged"
        error = str(exc)
        log.error("seed %d diverged at env step %d: %s", seed, env_step, exc)
    write_records(out_dir / "eval.csv", records)
    write_zeta_log(out_dir / "zeta.csv", learner.zeta_log)
    save_checkpoint(out_dir / "checkpoint", learner, eff, seed, env_step)
    last = run.final_evals
    summary = {
        "algorithm": eff.algorithm,
        "mode": run.mode,
        "env": env_cfg.name,
        "seed": seed,
        "status": status,
        "error": error,
        "env_steps": env_step,
        "learner_steps": learner.step_count,
        "update_counts": learner.counts,
        "episodes": episode,
        "train_violations": train_violations,
        "final_return": final_mean(records, "mean_return", last) if records else None,
        "final_cost": final_mean(records, "mean_episode_cost", last) if records else None,
        "final_evals": min(last, len(records)),
        "zeta": learner.params.zeta.tolist(),
        "params": learner.params.to_dict(),
        "mag_reg": asdict(eff.mag_reg),
        "mag_reg_value": float(si.mag_reg(learner.params, eff.mag_reg)),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out_dir / "run_info.json").write_text(json.dumps(
        {"wall_seconds": time.perf_counter() - t0}, indent=2))
    return summary


def run_experiment(cfg, out_dir=None, seeds=None, progress=False, parallel=False):
    """Train every seed into ``<out_dir>/seed_<n>``; returns the summaries."""
    out_dir = Path(out_dir or cfg.run.output_dir)
    seeds = list(seeds if seeds is not None else cfg.run.seeds)
    jobs = [(cfg, s, out_dir / f"seed_{s}", progress) for s in seeds]
    if parallel and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


def _job(args):
    cfg, seed, path, progress = args
    return run_seed(cfg, seed, path, progress)
