"""Command-line entry point: ``m3lab <command> --config <path> [--seed N --out DIR --workers W]``.

Each command validates its config, runs its seeds (optionally in a
process pool), writes CSV tables plus a ``manifest.json`` run record into
``<out>/<command>/`` and exits non-zero if a hard invariant failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nn
from .agents import TabularQ, UniformPolicy, run_actor_critic
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .diagnostics import (BOUND_FIELDS, check_theorem2, corrupt_heads,
                          corrupt_one_step, ensemble_errors, lipschitz_reward_constant,
                          online_model_errors, side_by_side)
from .envs import GridWorld, make_env, random_policy, run_episode
from .models import EMModel, M3Model, build_dataset, save_model
from .planner import (EXPANSIONS, SNAPSHOT_FIELDS, VALUATIONS, PlanConfig,
                      plan_action, run_model_based_dqn, snapshot_evaluation)

log = logging.getLogger("m3lab")

DEFAULT_OUT = "m3lab_out"


@dataclass
class CommandResult:
    outputs: list[Path] = field(default_factory=list)
    ok: bool = True
    summary: dict = field(default_factory=dict)


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def pool_map(fn, tasks: list, workers: int) -> list:
    """Ordered map; results do not depend on the worker count."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        return list(ex.map(fn, tasks))


def _env(cfg: ExperimentConfig):
    return make_env(cfg.exp["env"], **cfg.env_kwargs())


def _stderr(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


# ---------------------------------------------------------------------------
# background planning (actor-critic with model-generated targets)

def _ac_task(args):
    cfg, seed, kind, H = args
    ac = cfg.ac_config()
    curve = run_actor_critic(_env(cfg), kind, H, cfg.exp["K"], cfg.exp["episodes"], seed, ac)
    return seed, kind, H, curve.returns, curve.wall_ms


def cmd_background_planning(cfg: ExperimentConfig, out: Path, workers: int) -> CommandResult:
    kinds = [k for k in cfg.exp["model_kinds"] if k != "em"]
    tasks = [(cfg, s, k, H) for s in cfg.exp["seeds"] for k in kinds for H in cfg.exp["horizons"]]
    results = pool_map(_ac_task, tasks, workers)
    K = cfg.exp["K"]
    rows, timings, aucs = [], {}, {}
    for seed, kind, H, returns, wall in results:
        rows += [(seed, i, r, kind, H, K) for i, r in enumerate(returns)]
        timings[f"{seed}/{kind}/{H}"] = wall
        aucs.setdefault((kind, H), []).append(float(np.mean(returns)))
    res = CommandResult()
    res.outputs.append(write_csv(out / "curves.csv",
                                 ["seed", "episode", "return", "model_kind", "H", "K"], rows))
    res.outputs.append(write_csv(out / "auc.csv", ["model_kind", "H", "mean_auc", "stderr",
                                                   "n_seeds"],
                                 [(k, H, np.mean(v), _stderr(v), len(v))
                                  for (k, H), v in aucs.items()]))
    (out / "timings.json").write_text(json.dumps(timings))
    res.summary = {f"{k}/H={H}": float(np.mean(v)) for (k, H), v in aucs.items()}
    return res


# ---------------------------------------------------------------------------
# decision-time planning (snapshot protocol and planned DQN)

def _strategies(cfg: ExperimentConfig, kinds: list[str]):
    """(plan config, model kind) pairs to score at every snapshot."""
    if cfg["planner.sweep_strategies"]:
        out = [(cfg.plan_config(expansion=e, valuation=v), "one-step")
               for e in EXPANSIONS for v in VALUATIONS if "one-step" in kinds]
        out += [(cfg.plan_config(), k) for k in kinds if k != "one-step"]
        return out
    return [(cfg.plan_config(), k) for k in kinds]


def save_snapshot(directory: Path, seed: int, episode: int, q, models: dict) -> None:
    """Q weights (nn snapshot text or tabular array) plus one manifest per model."""
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"seed{seed}_ep{episode}"
    if isinstance(q, TabularQ):
        np.savetxt(directory / f"{stem}_q.txt", q.table, fmt="%.17g")
    else:
        (directory / f"{stem}_q.json").write_text(nn.to_snapshot(q.net), encoding="utf-8")
    for kind, m in models.items():
        save_model(m, directory / f"{stem}_{kind}.json")


def _snapshot_task(args):
    cfg, seed, out = args
    env = _env(cfg)
    kinds = [k for k in cfg.exp["model_kinds"] if k in ("one-step", "m3", "hallucinated")]
    run = run_model_based_dqn(env, "none", cfg.dqn_config(), cfg.exp["episodes"], seed,
                              record_models=kinds)
    for ep, q, models in run.snapshots:
        save_snapshot(out / "snapshots", seed, ep, q, models)
    rows = []
    for pcfg, kind in _strategies(cfg, kinds):
        qs = [q for _, q, _ in run.snapshots]
        models = [m[kind] for _, _, m in run.snapshots]
        if not qs:
            continue
        for r in snapshot_evaluation(env, qs, models, pcfg, cfg["planner.episodes_per_point"],
                                     seed=seed):
            rows.append([seed] + [r[k] for k in SNAPSHOT_FIELDS])
    return rows


def _dqn_task(args):
    cfg, seed, kind = args
    run = run_model_based_dqn(_env(cfg), kind, cfg.dqn_config(snapshot_every=0),
                              cfg.exp["episodes"], seed)
    return seed, kind, run.returns, run.wall_ms


def cmd_decision_time(cfg: ExperimentConfig, out: Path, workers: int) -> CommandResult:
    res = CommandResult()
    seeds = cfg.exp["seeds"]
    by_seed = [r for rows in pool_map(_snapshot_task, [(cfg, s, out) for s in seeds], workers)
               for r in rows]
    res.outputs.append(write_csv(out / "snapshot_gain_by_seed.csv", ["seed"] + SNAPSHOT_FIELDS,
                                 by_seed))
    agg: dict[tuple, list[float]] = {}
    for r in by_seed:
        agg.setdefault(tuple(r[1:5]), []).append(r[5])
    res.outputs.append(write_csv(out / "snapshot_gain.csv", SNAPSHOT_FIELDS,
                                 [(*k, np.mean(v), _stderr(v)) for k, v in agg.items()]))
    kinds = [k for k in cfg.exp["model_kinds"] if k in ("none", "one-step", "m3",
                                                         "hallucinated")]
    curves = pool_map(_dqn_task, [(cfg, s, k) for s in seeds for k in kinds], workers)
    rows, aucs, timings = [], {}, {}
    for seed, kind, returns, wall in curves:
        rows += [(seed, i, r, kind, cfg["planner.H"]) for i, r in enumerate(returns)]
        aucs.setdefault(kind, []).append(float(np.mean(returns)))
        timings[f"{seed}/{kind}"] = wall
    res.outputs.append(write_csv(out / "dqn_curves.csv",
                                 ["seed", "episode", "return", "model_kind", "H"], rows))
    res.outputs.append(write_csv(out / "dqn_auc.csv", ["model_kind", "mean_auc", "stderr",
                                                       "n_seeds"],
                                 [(k, np.mean(v), _stderr(v), len(v)) for k, v in aucs.items()]))
    (out / "timings.json").write_text(json.dumps(timings))
    res.summary = {k: float(np.mean(v)) for k, v in aucs.items()}
    return res


# ---------------------------------------------------------------------------
# model evaluation (h-step error, online)

def _model_eval_task(args):
    from .agents import make_model
    cfg, seed = args
    env = _env(cfg)
    H = cfg.exp["H"]
    mcfg = cfg.model_config(seed)
    models = {k: make_model(k, env, H, mcfg) for k in cfg.exp["model_kinds"]
              if k in ("one-step", "m3", "hallucinated")}
    errs = online_model_errors(env, models, cfg["diagnostics.train_episodes"], H,
                               np.random.default_rng([seed, 7]),
                               model_steps=cfg["model.model_steps"])
    return seed, errs


def cmd_model_eval(cfg: ExperimentConfig, out: Path, workers: int) -> CommandResult:
    res = CommandResult()
    rows, pooled = [], {}
    for seed, errs in pool_map(_model_eval_task, [(cfg, s) for s in cfg.exp["seeds"]], workers):
        for kind, E in errs.items():
            for ep, row in enumerate(E):
                for h, e in enumerate(row, start=1):
                    if np.isfinite(e):
                        rows.append((seed, ep, h, kind, e))
            per_h = np.nanmean(E, axis=0)
            for h, e in enumerate(per_h, start=1):
                pooled.setdefault((kind, h), []).append(float(e))
    res.outputs.append(write_csv(out / "model_errors.csv",
                                 ["seed", "episode", "h", "model_kind", "error"], rows))
    res.outputs.append(write_csv(out / "model_error_summary.csv",
                                 ["model_kind", "h", "mean_error", "stderr", "n_seeds"],
                                 [(k, h, np.mean(v), _stderr(v), len(v))
                                  for (k, h), v in pooled.items()]))
    return res


# ---------------------------------------------------------------------------
# bound check

def bound_grid(cfg: ExperimentConfig) -> GridWorld:
    e = cfg.values["env"]
    return GridWorld(e["grid_n"], e["goal_reward"], e["capture_reward"], e["step_reward"],
                     frozen_ghost=True, terminate=False)


def _bound_task(args):
    cfg, seed, H = args
    grid = bound_grid(cfg)
    lip = lipschitz_reward_constant(grid)
    pol = UniformPolicy(grid.spec.num_actions)
    d = cfg.values["diagnostics"]
    out = []
    for trial in range(d["trials"]):
        rng = np.random.default_rng([seed, H, trial])
        one = corrupt_one_step(grid, rng, d["max_entries"], d["corruption"])
        heads = corrupt_heads(grid, H, rng, d["max_entries"], d["corruption"])
        sb = side_by_side(grid, one, pol, H, lip)  # its theorem-1 report is the T_1 check
        r2 = check_theorem2(grid, heads, pol, H, lip)
        out.append((trial, sb.theorem1, r2, sb))
    return seed, H, out


def cmd_bound_check(cfg: ExperimentConfig, out: Path, workers: int) -> CommandResult:
    res = CommandResult()
    tasks = [(cfg, s, H) for s in cfg.exp["seeds"] for H in cfg["diagnostics.bound_horizons"]]
    rows, side, violations, expansive = [], [], 0, 0
    for seed, H, trials in pool_map(_bound_task, tasks, workers):
        for trial, r1, r2, sb in trials:
            tid = f"{seed}-{H}-{trial}"
            rows += r1.rows(tid) + r2.rows(tid)
            side.append((tid, H, sb.theorem1.lhs, sb.theorem1.rhs, sb.theorem2.lhs,
                         sb.theorem2.rhs, sb.gap))
            for r in (r1, r2, sb.theorem2):
                violations += not r.holds
            expansive += bool(r1.flags["model_expansive"])
    res.outputs.append(write_csv(out / "bounds.csv", BOUND_FIELDS, rows))
    res.outputs.append(write_csv(out / "side_by_side.csv",
                                 ["trial", "H", "lhs_one_step", "rhs_theorem1", "lhs_multi_step",
                                  "rhs_theorem2", "rhs_gap"], side))
    res.ok = violations == 0
    res.summary = {"violations": violations, "checks": 3 * len(side),
                   "expansive_one_step_models": expansive}
    return res


# ---------------------------------------------------------------------------
# EM demo (gridworld modes and tree search)

CORNER_PROBE = np.array([0.0, 0.0, 4.0, 0.0])


def em_planning_returns(env, model, episodes: int, seed: int, pcfg: PlanConfig,
                        alpha: float = 0.5, gamma: float = 0.99) -> list[float]:
    """Q-learning whose behavior is tree search over ``model`` (greedy Q when ``None``)."""
    q = TabularQ(env)
    rng = np.random.default_rng([seed, 11])
    plan_rng = np.random.default_rng([seed, 12])
    out = []
    for _ in range(episodes):
        s = env.reset(int(rng.integers(2 ** 63)))
        total, done, steps = 0.0, False, 0
        while not done and steps < env.spec.horizon_cap:
            a = plan_action(s, model, q, pcfg, plan_rng)
            s2, r, done = env.step(s, a, rng)
            q.q_learning(s, a, r, s2, done, alpha, gamma)
            total += r
            s = s2
            steps += 1
        out.append(total)
    return out


def _em_task(args):
    cfg, seed = args
    env = _env(cfg)
    if not isinstance(env, GridWorld):
        raise ConfigError("em-demo needs env = gridworld")
    d = cfg.values["diagnostics"]
    rng = np.random.default_rng([seed, 5])
    eps = [run_episode(env, random_policy(4), rng) for _ in range(d["em_episodes"])]
    pcfg = cfg.plan_config()
    Hm = max(pcfg.H - 1, 1)
    data = build_dataset(eps, Hm)
    mcfg = cfg.model_config(seed)
    em = EMModel(env, Hm, mcfg)
    em.fit(data)
    det_cfg = cfg.model_config(seed)
    det_cfg.reward_source = "oracle"
    det = M3Model(env, Hm, det_cfg)
    det.fit(data)
    modes = []
    probe = CORNER_PROBE[None, :]
    head = em.heads[1]
    for a in range(4):
        P = head.component_predictions(probe, np.array([[a]]))[:, 0]
        for m, p in enumerate(P):
            modes.append((seed, a, m, head.weights[m], *p))
    returns = {}
    for name, model in (("em", em), ("deterministic", det), ("none", None)):
        returns[name] = em_planning_returns(env, model, d["em_eval_episodes"], seed, pcfg)
    return seed, modes, returns


def cmd_em_demo(cfg: ExperimentConfig, out: Path, workers: int) -> CommandResult:
    res = CommandResult()
    modes, rows, means = [], [], {}
    for seed, m, returns in pool_map(_em_task, [(cfg, s) for s in cfg.exp["seeds"]], workers):
        modes += m
        for name, rs in returns.items():
            rows += [(seed, i, name, r) for i, r in enumerate(rs)]
            means.setdefault(name, []).append(float(np.mean(rs)))
    res.outputs.append(write_csv(out / "em_modes.csv",
                                 ["seed", "action", "component", "weight", "agent_x", "agent_y",
                                  "ghost_x", "ghost_y"], modes))
    res.outputs.append(write_csv(out / "em_planning.csv",
                                 ["seed", "episode", "model_kind", "return"], rows))
    res.outputs.append(write_csv(out / "em_planning_summary.csv",
                                 ["model_kind", "mean_return", "stderr", "n_seeds"],
                                 [(k, np.mean(v), _stderr(v), len(v)) for k, v in means.items()]))
    res.summary = {k: float(np.mean(v)) for k, v in means.items()}
    return res


# ---------------------------------------------------------------------------
# ensemble of paths

def _ensemble_task(args):
    cfg, seed = args
    env = _env(cfg)
    d = cfg.values["diagnostics"]
    H = cfg.exp["H"]
    rng = np.random.default_rng([seed, 6])
    act = random_policy(env.spec.num_actions)
    train = [run_episode(env, act, rng) for _ in range(d["train_episodes"])]
    test = [run_episode(env, act, rng) for _ in range(d["eval_episodes"])]
    model = M3Model(env, H, cfg.model_config(seed))
    model.fit(build_dataset(train, H))
    errs = ensemble_errors(model, test, H, d["path_counts"], np.random.default_rng([seed, 8]))
    return seed, errs


def cmd_ensemble_demo(cfg: ExperimentConfig, out: Path, workers: int) -> CommandResult:
    res = CommandResult()
    rows = []
    for seed, errs in pool_map(_ensemble_task, [(cfg, s) for s in cfg.exp["seeds"]], workers):
        for key, e in errs.items():
            if isinstance(key, str):
                rows.append((seed, key, "", e))
            else:
                rows.append((seed, "ensemble", key, e))
    res.outputs.append(write_csv(out / "ensemble.csv",
                                 ["seed", "predictor", "num_paths", "error"], rows))
    return res


COMMANDS = {
    "background-planning": cmd_background_planning,
    "decision-time": cmd_decision_time,
    "model-eval": cmd_model_eval,
    "bound-check": cmd_bound_check,
    "em-demo": cmd_em_demo,
    "ensemble-demo": cmd_ensemble_demo,
}

PLOT_STUB = '''"""Plot the CSV tables in this directory (needs matplotlib)."""
import csv
import glob

import matplotlib.pyplot as plt

for path in sorted(glob.glob("*.csv")):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    print(path, len(rows), "rows; columns:", list(rows[0]) if rows else [])
# Example: learning curves
# rows = list(csv.DictReader(open("curves.csv")))
# plt.plot([float(r["return"]) for r in rows if r["model_kind"] == "m3"]); plt.show()
'''


def output_root(cli_out: str | None) -> Path:
    """``--out`` wins, then ``M3LAB_OUT``, then ``./m3lab_out``."""
    return Path(cli_out or os.environ.get("M3LAB_OUT") or DEFAULT_OUT)


def run_command(command: str, cfg: ExperimentConfig, out_root: Path, workers: int) -> int:
    out = out_root / command
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = COMMANDS[command](cfg, out, workers)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    (out / "plot.py").write_text(PLOT_STUB, encoding="utf-8")
    record = {
        "run_id": f"{command}-{cfg.hash[:12]}",
        "command": command,
        "config_hash": cfg.hash,
        "config_source": cfg.source,
        "seeds": cfg.exp["seeds"],
        "version": __version__,
        "outputs": [p.name for p in res.outputs],
        "wall_clock_s": round(time.perf_counter() - t0, 3),
        "invariants_ok": res.ok,
        "summary": res.summary,
    }
    (out / "manifest.json").write_text(json.dumps(record, indent=2), encoding="utf-8")
    for p in res.outputs:
        print(p)
    if not res.ok:
        print(f"{command}: invariant check failed: {res.summary}", file=sys.stderr)
    return 0 if res.ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="m3lab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="sectioned key-value config file")
    parser.add_argument("--seed", type=int, help="run only this seed")
    parser.add_argument("--out", help="output root (default $M3LAB_OUT or ./m3lab_out)")
    parser.add_argument("--workers", type=int, help="process pool width")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.values["experiment"]["seeds"] = [args.seed]
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg.values["experiment"]["workers"] = args.workers
        cfg.validate()
    except ConfigError as exc:
        parser.exit(2, f"m3lab: error: {exc}\n")
    return run_command(args.command, cfg, output_root(args.out), cfg.exp["workers"])


if __name__ == "__main__":
    sys.exit(main())
