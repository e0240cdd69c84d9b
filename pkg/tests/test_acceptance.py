"""Acceptance criteria, each at its stated tolerance.

Training runs are cached under ``acceptance_runs/`` (or
``$SAFEMR_ACCEPTANCE_ROOT``), keyed by a hash of the full config, so a
second session only re-checks results. ``--rerun-acceptance`` retrains.
Each test records one PASS/FAIL line, shown in the terminal summary and
written to ``acceptance_results.txt``.
"""

import subprocess
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from conftest import report
from safemr import oracle
from safemr.config import preset, with_mode
from safemr.eval import read_records
from safemr.experiments import learned_params, run_cached, run_dir
from safemr.synthesis import ZetaBox

pytestmark = pytest.mark.acceptance

GOAL = "desk-pillars-0.15-goal"
PUSH = "desk-hazards-0.15-push"
AIRCRAFT = "desk-aircraft"
SEEDS5 = (0, 1, 2, 3, 4)
SEEDS3 = (0, 1, 2)
MAG_PRESETS = ((0.35, 0.15), (0.45, 0.15), (0.35, 0.25))


@pytest.fixture(scope="module")
def runner(acceptance_root, rerun):
    done = set()

    def run(name, mode, seeds, a=None, b=None):
        cfg = with_mode(preset(name), mode)
        if a is not None:
            cfg = with_mode(cfg, mode, a=a, b=b)
        out = []
        for s in seeds:
            key = (run_dir(cfg, acceptance_root), s)
            out.append(run_cached(cfg, s, acceptance_root, rerun=rerun and key not in done))
            done.add(key)
        return cfg, out

    return run


def _mean(runs, key):
    return float(np.mean([r[key] for r in runs]))


def _fmt(runs, key):
    return "[" + ", ".join(f"{r[key]:.3g}" for r in runs) + "]"


@lru_cache(maxsize=1)
def _aircraft_truth():
    cfg = preset(AIRCRAFT).env
    grid = oracle.StateGrid.aircraft()
    return grid, oracle.true_unsafe_set(cfg, grid)


def test_criterion_1_aircraft_conservativeness(runner, acceptance_root):
    grid, truth = _aircraft_truth()
    env_cfg = preset(AIRCRAFT).env
    rows = []
    for mode in ("safemr", "jointsis"):
        cfg, _ = runner(AIRCRAFT, mode, SEEDS3)
        for s in SEEDS3:
            p = learned_params(cfg, s, acceptance_root)
            m = oracle.set_metrics(oracle.learned_unsafe_set(p, env_cfg, grid), truth)
            rows.append((mode, s, m["area_a"], m["coverage"]))
    area = {(m, s): a for m, s, a, _ in rows}
    cov_ok = all(c >= 0.99 for *_, c in rows)
    reductions = [area[("jointsis", s)] - area[("safemr", s)] for s in SEEDS3]
    mean_ok = np.mean([area[("safemr", s)] for s in SEEDS3]) <= \
        np.mean([area[("jointsis", s)] for s in SEEDS3])
    n_reduced = sum(r > 0 for r in reductions)
    ok = cov_ok and mean_ok and n_reduced >= 2
    detail = (f"true unsafe cells {truth.count}; "
              + "; ".join(f"{m} s{s} area {a} cov {c:.4f}" for m, s, a, c in rows)
              + f"; reductions {reductions} ({n_reduced}/3 > 0)")
    report(1, ok, detail)
    assert cov_ok, detail
    assert mean_ok and n_reduced >= 2, detail


def test_criterion_2_goal_zero_violation(runner):
    _, ours = runner(GOAL, "safemr", SEEDS5)
    _, phi0 = runner(GOAL, "fac_phi0", SEEDS5)
    ours_ok = all(r["final_cost"] == 0 for r in ours)
    phi0_ok = _mean(phi0, "final_cost") > 0
    detail = (f"SafeMR final costs {_fmt(ours, 'final_cost')}; "
              f"FAC-phi0 final costs {_fmt(phi0, 'final_cost')}")
    report(2, ours_ok and phi0_ok, detail)
    assert ours_ok and phi0_ok, detail


@pytest.mark.parametrize("name", [GOAL, PUSH])
def test_criterion_3_return_vs_jointsis(runner, name):
    _, ours = runner(name, "safemr", SEEDS5)
    _, base = runner(name, "jointsis", SEEDS5)
    safe = all(r["final_cost"] == 0 for r in ours + base)
    better = _mean(ours, "final_return") >= _mean(base, "final_return")
    detail = (f"{name}: SafeMR return {_mean(ours, 'final_return'):.4f} "
              f"{_fmt(ours, 'final_return')} cost {_fmt(ours, 'final_cost')} vs JointSIS "
              f"{_mean(base, 'final_return'):.4f} {_fmt(base, 'final_return')} "
              f"cost {_fmt(base, 'final_cost')}")
    report(f"3 ({name})", safe and better, detail)
    assert safe and better, detail


def test_criterion_4_feasibility(runner, acceptance_root):
    checked = []
    for name in (GOAL, PUSH):
        for a, b in (MAG_PRESETS if name == GOAL else MAG_PRESETS[:1]):
            cfg, _ = runner(name, "safemr", SEEDS5, a, b)
            grid = oracle.StateGrid.particle(cfg.env)
            for s in SEEDS5:
                p = learned_params(cfg, s, acceptance_root)
                rep = oracle.verify_feasibility(p, cfg.env, grid, K=16)
                checked.append((name, a, b, s, rep["infeasible_fraction"]))
    worst = max(f for *_, f in checked)
    ok = worst == 0
    detail = f"{len(checked)} certificates on the training-region grid, K=16; " \
             f"max infeasible_fraction {worst:.4g}"
    report(4, ok, detail)
    assert ok, detail


@pytest.mark.parametrize("a,b", MAG_PRESETS)
def test_criterion_5_sensitivity(runner, acceptance_root, a, b):
    cfg, ours = runner(GOAL, "safemr", SEEDS5, a, b)
    _, base = runner(GOAL, "jointsis", SEEDS5)
    box = ZetaBox()
    in_box = True
    for s in SEEDS5:
        zlog = run_dir(cfg, acceptance_root) / f"seed_{s}" / "zeta.csv"
        z = np.loadtxt(zlog, delimiter=",", skiprows=1, usecols=(1, 2, 3), ndmin=2)
        in_box &= bool(np.all(z >= box.lo) and np.all(z <= box.hi))
        recs = read_records(run_dir(cfg, acceptance_root) / f"seed_{s}" / "eval.csv")
        in_box &= all(np.all(np.array(r.zeta) >= box.lo) and np.all(np.array(r.zeta) <= box.hi)
                      for r in recs)
    safe = all(r["final_cost"] == 0 for r in ours)
    better = _mean(ours, "final_return") >= _mean(base, "final_return")
    zetas = "; ".join(" ".join(f"{v:.3f}" for v in r["zeta"]) for r in ours)
    detail = (f"[a,b]=[{a},{b}]: return {_mean(ours, 'final_return'):.4f} vs JointSIS "
              f"{_mean(base, 'final_return'):.4f}; costs {_fmt(ours, 'final_cost')}; "
              f"zeta in box {in_box}; final zeta {zetas}")
    report(f"5 [{a},{b}]", safe and better and in_box, detail)
    assert safe and better and in_box, detail


def test_criterion_6_property_suites_fast():
    tests = Path(__file__).resolve().parent
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         "-m", "not acceptance", str(tests)],
        capture_output=True, text=True, cwd=tests.parent)
    elapsed = time.perf_counter() - t0
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else ""
    ok = proc.returncode == 0 and elapsed < 300
    report(6, ok, f"property and unit suites: {last} in {elapsed:.1f} s (limit 300 s)")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert elapsed < 300
