"""Cached multi-seed runs and comparisons between training modes.

Runs are stored under ``<root>/<tag>-<hash>/seed_<n>`` where the hash is
taken over the serialised config, so any change to a setting starts a fresh
run while an unchanged config reuses the finished one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from .config import ALGORITHM_TAGS, with_mode
from .eval import RunSummary, t_interval
from .train import load_checkpoint, run_seed

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SAFEMR_OUTPUT_ROOT"


def output_root(default="runs"):
    """Root directory for run outputs; ``$SAFEMR_OUTPUT_ROOT`` overrides."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, default))


def config_hash(cfg, length=12):
    return hashlib.sha256(cfg.to_ini().encode()).hexdigest()[:length]


def run_dir(cfg, root=None, tag=None):
    tag = tag or f"{cfg.env.name}-{cfg.run.mode}"
    return Path(root or output_root()) / f"{tag}-{config_hash(cfg)}"


def run_cached(cfg, seed, root=None, tag=None, rerun=False, progress=False):
    """Train ``cfg`` for one seed unless a finished run with the same config exists."""
    out = run_dir(cfg, root, tag) / f"seed_{seed}"
    summary_path = out / "summary.json"
    if summary_path.exists() and not rerun:
        return json.loads(summary_path.read_text())
    log.info("training %s seed %d -> %s", cfg.algorithm, seed, out)
    return run_seed(cfg, seed, out, progress=progress)


def run_seeds(cfg, seeds, root=None, tag=None, rerun=False, progress=False):
    return [run_cached(cfg, s, root, tag, rerun, progress) for s in seeds]


def learned_params(cfg, seed, root=None, tag=None):
    """Final certificate parameters of a cached run."""
    _, params, _, _ = load_checkpoint(run_dir(cfg, root, tag) / f"seed_{seed}" / "checkpoint")
    return params


def summarize(summaries):
    """Collapse per-seed summary dicts of one algorithm into a ``RunSummary``."""
    if not summaries:
        raise ValueError("no runs to summarise")
    rets = [s["final_return"] for s in summaries]
    costs = [s["final_cost"] for s in summaries]
    mean, half = t_interval(rets)
    return RunSummary(
        algorithm=summaries[0]["algorithm"], env=summaries[0]["env"],
        final_return=mean, final_return_ci=half, final_cost=float(np.mean(costs)),
        seeds=[s["seed"] for s in summaries],
        zeta=[s["zeta"] for s in summaries])


def compare_modes(cfg, modes, seeds, root=None, rerun=False, progress=False):
    """Run every mode on the same environment; returns ``{mode: RunSummary}``."""
    out = {}
    for mode in modes:
        if mode not in ALGORITHM_TAGS:
            raise ValueError(f"unknown mode {mode!r}")
        runs = run_seeds(with_mode(cfg, mode), seeds, root, rerun=rerun, progress=progress)
        out[mode] = summarize(runs)
    return out
