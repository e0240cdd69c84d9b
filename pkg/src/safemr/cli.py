"""Command-line harness: ``safemr {train,evaluate,boundary,verify,compare}``.

Outputs go under ``--out`` when given, else under ``$SAFEMR_OUTPUT_ROOT``
(default ``./runs``). Every command writes CSV and/or JSON files and prints
the path of its main output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import oracle
from .config import MODES, ConfigParseError, load_config, preset, with_mode
from .envs import ConfigError, EnvConfig, export_trajectory
from .eval import evaluate_policy, improvement, improvement_table
from .experiments import output_root, run_dir, run_seeds, summarize
from .safety_index import SafetyIndexParams
from .synthesis import ZetaBox
from .train import load_checkpoint, run_experiment

log = logging.getLogger("safemr")


def _parse_grid(text):
    try:
        res = tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use e.g. 61,61,41")
    if not res or any(r < 2 for r in res):
        raise argparse.ArgumentTypeError("grid resolution must be >= 2 per dimension")
    return res


def _load_cfg(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset)
    if getattr(args, "mode", None):
        cfg = with_mode(cfg, args.mode)
    return cfg


def _out(args, default):
    return Path(args.out) if args.out else output_root() / default


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


def _certificate(args, env_cfg):
    """Certificate from ``--checkpoint`` or explicit ``--zeta``; validated against the box."""
    if args.checkpoint:
        _, params, ck_env, _ = load_checkpoint(Path(args.checkpoint))
        return params, ck_env
    if args.zeta is None:
        raise ConfigError("give --checkpoint or --zeta SIGMA K N")
    params = SafetyIndexParams(*args.zeta, d_min=env_cfg.d_min, eta_D=args.eta)
    if not ZetaBox().contains(params):
        raise ConfigError(f"zeta {tuple(args.zeta)} lies outside the zeta box")
    return params, env_cfg


def _grid_for(env_cfg, res):
    if env_cfg.task == "aircraft":
        return oracle.StateGrid.aircraft(res or (61, 61, 41), half_width=env_cfg.arena)
    return oracle.StateGrid.particle(env_cfg, res or (41, 41, 9, 9))


# -- commands ----------------------------------------------------------------------

def cmd_train(args):
    cfg = _load_cfg(args)
    if args.steps:
        cfg = replace(cfg, run=replace(cfg.run, total_env_steps=args.steps))
    seeds = args.seed if args.seed else list(cfg.run.seeds)
    out = Path(args.out) if args.out else run_dir(cfg)
    summaries = run_experiment(cfg, out, seeds, progress=not args.quiet,
                               parallel=args.parallel)
    path = _write_json(out / "summaries.json", summaries)
    print(path)
    failed = [s["seed"] for s in summaries if s["status"] != "ok"]
    if failed:
        print(f"error: divergence guard tripped for seeds {failed}; partial logs kept",
              file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args):
    nets, params, env_cfg, state = load_checkpoint(Path(args.checkpoint))
    trajectories = [] if args.trajectories else None
    rec = evaluate_policy(nets, env_cfg, args.episodes, args.seed[0] if args.seed else 0,
                          iteration=state["learner_steps"], params=params,
                          trajectories=trajectories)
    out = _out(args, "evaluate")
    path = _write_json(out / "evaluation.json", asdict(rec))
    if trajectories:
        for i, rows in enumerate(trajectories):
            export_trajectory(out / f"trajectory_{i:03d}.csv", rows, env_cfg)
    print(path)
    return 0


def cmd_boundary(args):
    env_cfg = EnvConfig.aircraft()
    params, env_cfg = _certificate(args, env_cfg)
    if env_cfg.task != "aircraft":
        raise ConfigError("boundary slices are defined for the aircraft task")
    grid = _grid_for(env_cfg, args.grid)
    learned = oracle.learned_unsafe_set(params, env_cfg, grid)
    truth = oracle.true_unsafe_set(env_cfg, grid, n_actions=args.actions + 1)
    out = _out(args, "boundary")
    out.mkdir(parents=True, exist_ok=True)
    xs, ys, psi, lslice = oracle.boundary_slice(learned, args.psi)
    _, _, _, tslice = oracle.boundary_slice(truth, args.psi)
    with (out / "slice.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "psi", "learned_unsafe", "true_unsafe"])
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                w.writerow([f"{x:.10g}", f"{y:.10g}", f"{psi:.10g}",
                            int(lslice[i, j]), int(tslice[i, j])])
    if args.full:
        oracle.export_field_csv(out / "learned_field.csv", learned)
        oracle.export_field_binary(out / "learned_field", learned)
        oracle.export_field_binary(out / "true_field", truth)
    metrics = oracle.set_metrics(learned, truth)
    metrics.update(zeta=params.zeta, psi=psi, grid=list(grid.res))
    print(_write_json(out / "metrics.json", metrics))
    return 0


def cmd_verify(args):
    env_cfg = preset(args.preset).env if args.preset else EnvConfig.aircraft()
    params, env_cfg = _certificate(args, env_cfg)
    grid = _grid_for(env_cfg, args.grid)
    report = oracle.verify_feasibility(params, env_cfg, grid, K=args.actions)
    report.pop("infeasible_points")
    cells = report.pop("infeasible_cells")
    report.update(zeta=params.zeta, env=env_cfg.name, grid=list(grid.res))
    out = _out(args, "verify")
    path = _write_json(out / "feasibility.json", report)
    with (out / "infeasible_cells.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell"])
        w.writerows([[int(c)] for c in cells])
    print(path)
    return 0


def _summaries_from_dir(path):
    path = Path(path)
    files = sorted(path.glob("seed_*/summary.json")) or sorted(path.glob("summary.json"))
    if not files:
        raise FileNotFoundError(f"no summary.json under {path}")
    return [json.loads(f.read_text()) for f in files]


def _write_rows(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        w.writerows(rows)
    _write_json(path.with_suffix(".json"), rows)
    return path


def cmd_compare(args):
    if args.runs:
        labelled = []
        for d in args.runs:
            runs = _summaries_from_dir(d)
            labelled.append((str(d), runs, summarize(runs)))
        out = _out(args, "compare")
    else:
        cfg = _load_cfg(args)
        seeds = args.seed if args.seed else list(cfg.run.seeds)
        root = Path(args.out) if args.out else output_root()
        labelled = []
        for mode in args.modes:
            mcfg = with_mode(cfg, mode)
            runs = run_seeds(mcfg, seeds, root, rerun=args.rerun, progress=not args.quiet)
            labelled.append((str(run_dir(mcfg, root)), runs, summarize(runs)))
        out = root
    reference = labelled[0][2].final_return
    rows = []
    for label, runs, s in labelled:
        zeta = np.mean([r["zeta"] for r in runs], axis=0)
        mag = runs[0].get("mag_reg", {})
        rows.append({
            "run": label, "algorithm": s.algorithm, "env": s.env,
            "a": mag.get("a"), "b": mag.get("b"), "n_seeds": len(runs),
            "final_return": s.final_return, "final_return_ci": s.final_return_ci,
            "final_cost": s.final_cost, "sigma": zeta[0], "k": zeta[1], "n": zeta[2],
            "improvement_vs_first": improvement(s.final_return, reference),
        })
    path = _write_rows(out / "compare.csv", rows)
    table = improvement_table([s for _, _, s in labelled])
    if table:
        _write_rows(out / "improvement.csv", table)
    print(path)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="safemr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--config", help="INI experiment config")
        src.add_argument("--preset", default="desk-pillars-0.15-goal",
                         help="named preset (default: %(default)s)")
        sp.add_argument("--seed", type=int, action="append",
                        help="seed; repeat for several (default: from the config)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--quiet", action="store_true")

    def cert_opts(sp):
        sp.add_argument("--checkpoint", help="checkpoint directory of a trained run")
        sp.add_argument("--zeta", type=float, nargs=3, metavar=("SIGMA", "K", "N"))
        sp.add_argument("--eta", type=float, default=0.05, help="eta_D for --zeta")
        sp.add_argument("--grid", type=_parse_grid, help="resolution, e.g. 61,61,41")
        sp.add_argument("--actions", type=int, default=16, metavar="K",
                        help="action samples per cell (default: %(default)s)")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train one config over its seeds")
    run_opts(sp)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--steps", type=int, help="override total environment steps")
    sp.add_argument("--parallel", action="store_true", help="one process per seed")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="deterministic evaluation of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=20)
    sp.add_argument("--seed", type=int, action="append")
    sp.add_argument("--trajectories", action="store_true", help="export per-episode CSVs")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("boundary", help="learned vs true unsafe set on the aircraft grid")
    cert_opts(sp)
    sp.add_argument("--psi", type=float, default=0.0, help="heading of the 2-D slice")
    sp.add_argument("--full", action="store_true", help="also export the full 3-D fields")
    sp.set_defaults(func=cmd_boundary, actions=8)

    sp = sub.add_parser("verify", help="brute-force feasibility of a certificate")
    cert_opts(sp)
    sp.add_argument("--preset", help="environment preset for --zeta (default: aircraft)")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("compare", help="tabulate finished runs, or train several modes")
    run_opts(sp)
    sp.add_argument("--runs", nargs="+", metavar="DIR",
                    help="experiment directories holding seed_*/summary.json")
    sp.add_argument("--modes", nargs="+", default=["safemr", "jointsis"], choices=MODES)
    sp.add_argument("--rerun", action="store_true", help="ignore cached runs")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "actions", 2) < 2:
        parser.error("--actions must be at least 2")
    try:
        return args.func(args)
    except (ConfigError, ConfigParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
