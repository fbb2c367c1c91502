"""cli.py - pipeline subcommands over trained artifacts.

Stage order: train-teacher -> collect -> distill gives the baseline tree;
train-teacher -> grid -> cluster -> train-branches gives the branched policy;
trace and bench consume either.  Stdout carries exactly one JSON summary per
invocation and diagnostics go to stderr, so pipelines can parse results
without scraping logs.  Any failure exits nonzero with {"error", "message"}
JSON on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("ratetree")


class _Parser(argparse.ArgumentParser):
    # argparse prints usage prose on bad flags; pipelines want JSON
    def error(self, message):
        _fail("usage", message, code=2)


def _fail(kind: str, message: str, code: int = 1):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    raise SystemExit(code)


def _emit(doc: dict) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _read_json(path: str) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return doc


def _from_doc(cls, doc: dict, source: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ValueError(f"{source}: unknown keys {unknown}")
    return cls(**doc)


def _ranges_from(doc: dict):
    """Optional 'ranges' key, {condition: [lo, hi]}, merged over baseline."""
    from .netsim import BASELINE_RANGES
    raw = doc.pop("ranges", None)
    if raw is None:
        return None
    unknown = sorted(set(raw) - set(BASELINE_RANGES))
    if unknown:
        raise ValueError(f"unknown range keys {unknown}")
    merged = dict(BASELINE_RANGES)
    for cond, pair in raw.items():
        lo, hi = float(pair[0]), float(pair[1])
        if hi < lo:
            raise ValueError(f"range {cond!r}: hi < lo")
        merged[cond] = (lo, hi)
    return merged


# --- pipeline stages -------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    from .teacher import TeacherTrainConfig, save_policy, train_teacher
    doc = _read_json(args.config)
    ranges = _ranges_from(doc)
    cfg = _from_doc(TeacherTrainConfig, doc, args.config)
    policy, result = train_teacher(cfg, seed=args.seed, ranges=ranges)
    for steps, ret in result.curve:
        log.info("steps=%d mean_return=%.1f", steps, ret)
    save_policy(policy, args.out)
    _emit({"out": args.out, "steps": result.steps,
           "final_return": result.final_return,
           "random_return": result.random_return})
    return 0


def cmd_collect(args) -> int:
    from .teacher import collect_rollouts, load_policy, save_rollouts
    policy = load_policy(args.teacher)
    data = collect_rollouts(policy, args.episodes, seed=args.seed)
    save_rollouts(data, args.out)
    _emit({"out": args.out, "rows": len(data), "episodes": args.episodes,
           "mean_return": float(np.mean(data.ep_return))})
    return 0


def cmd_distill(args) -> int:
    from . import symtree as st
    from .distill import (BuildConfig, GpConfig, distill_policy,
                          save_fitness_log, save_report)
    from .teacher import load_rollouts
    doc = _read_json(args.config) if args.config else {}
    bcfg = _from_doc(BuildConfig, doc.pop("build", {}), "build")
    gcfg = _from_doc(GpConfig, doc.pop("gp", {}), "gp")
    holdout = float(doc.pop("holdout_frac", 0.2))
    if doc:
        raise ValueError(f"{args.config}: unknown keys {sorted(doc)}")
    data = load_rollouts(args.rollouts)
    fitness_rows: list = []
    tree, report = distill_policy(data, bcfg, gcfg, seed=args.seed,
                                  holdout_frac=holdout,
                                  fitness_log=fitness_rows)
    st.save_tree(tree, args.out)
    save_report(report, args.report)
    fit_path = args.fitness_log
    if fit_path is None:
        fit_path = os.path.splitext(args.report)[0] + "_fitness.csv"
    save_fitness_log(fitness_rows, fit_path)
    _emit({"out": args.out, "report": args.report, "fitness_log": fit_path,
           "mse_holdout": report.mse_holdout,
           "var_holdout": report.var_holdout,
           "tree_flops": report.tree_flops,
           "n_leaves": report.n_leaves})
    return 0


def cmd_grid(args) -> int:
    from .branching import evaluate_grid, grid_conditions, save_grid
    from .teacher import load_policy
    policy = load_policy(args.teacher)
    configs = grid_conditions()
    log.info("evaluating %d configs x %d episodes", len(configs),
             args.episodes)
    grid = evaluate_grid(policy, configs, episodes_per_config=args.episodes,
                         seed=args.seed)
    save_grid(grid, args.out)
    _emit({"out": args.out, "configs": len(configs),
           "episodes_per_config": args.episodes,
           "score_min": float(grid.returns.min()),
           "score_max": float(grid.returns.max())})
    return 0


def cmd_cluster(args) -> int:
    from .branching import choose_k, derive_contexts, kmeans, load_grid
    grid = load_grid(args.grid)
    k, report = choose_k(grid.returns, k_max=args.k_max, seed=args.seed)
    for kk in sorted(report):
        log.info("k=%d silhouette=%.4f inertia=%.4f%s", kk,
                 report[kk]["silhouette"], report[kk]["inertia"],
                 "  <- chosen" if kk == k else "")
    model = kmeans(grid.returns.reshape(-1, 1), k, seed=args.seed + k)
    contexts = derive_contexts(grid, model)
    doc = {
        "grid": os.path.abspath(args.grid),
        "k": k,
        # choose_k seeds the k-cluster model with seed + k; stored verbatim
        # so train-branches reproduces the same labels
        "kmeans_seed": args.seed + k,
        "report": {str(kk): report[kk] for kk in sorted(report)},
        "contexts": [c.to_doc() for c in contexts],
    }
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=2)
    _emit({"out": args.out, "k": k,
           "centroids": [c.return_centroid for c in contexts]})
    return 0


def cmd_train_branches(args) -> int:
    from .branching import (BranchContext, kmeans, load_grid, save_branched,
                            train_branches)
    from .distill import BuildConfig, GpConfig
    from .teacher import TeacherTrainConfig
    doc = _read_json(args.contexts)
    grid_path = doc["grid"]
    if not os.path.isabs(grid_path):
        grid_path = os.path.join(
            os.path.dirname(os.path.abspath(args.contexts)), grid_path)
    grid = load_grid(grid_path)
    contexts = [BranchContext.from_doc(c) for c in doc["contexts"]]
    model = kmeans(grid.returns.reshape(-1, 1), int(doc["k"]),
                   seed=int(doc["kmeans_seed"]))
    over = _read_json(args.config) if args.config else {}
    train_cfg = _from_doc(TeacherTrainConfig, over.pop("teacher", {}),
                          "teacher")
    bcfg = _from_doc(BuildConfig, over.pop("build", {}), "build")
    gcfg = _from_doc(GpConfig, over.pop("gp", {}), "gp")
    rollout_episodes = int(over.pop("rollout_episodes", 60))
    if over:
        raise ValueError(f"{args.config}: unknown keys {sorted(over)}")
    policy = train_branches(grid, model, contexts, train_cfg, bcfg, gcfg,
                            seed=args.seed,
                            rollout_episodes=rollout_episodes,
                            grid_path=grid_path, log=log.info)
    save_branched(policy, args.out_dir)
    _emit({"out_dir": args.out_dir, "branches": policy.n_branches,
           "flops": policy.flops_report()})
    return 0


# --- evaluation ------------------------------------------------------------------

def _load_policy_arg(kind: str, path):
    if kind == "aimd":
        from .harness import aimd_policy
        return aimd_policy()
    if path is None:
        raise ValueError(f"--path is required for --policy {kind}")
    if kind == "tree":
        from . import symtree as st
        return st.load_tree(path)
    if kind == "branched":
        from .branching import load_branched
        return load_branched(path)
    from .teacher import load_policy
    return load_policy(path)


def _scenarios_for(label: str, seed: int) -> list:
    from . import harness as hz
    if label == "lossy":
        return [hz.scenario_lossy(seed=seed)]
    if label == "oscillating":
        return [hz.scenario_oscillating(seed=seed)]
    if label.startswith("sweep:"):
        return hz.scenario_sweep(label.split(":", 1)[1], seed=seed)
    raise ValueError(f"unknown scenario {label!r}; expected lossy, "
                     f"oscillating, or sweep:<condition>")


def cmd_trace(args) -> int:
    from . import harness as hz
    policy = _load_policy_arg(args.policy, args.path)
    scenarios = _scenarios_for(args.scenario, args.seed)
    results = []
    root, ext = os.path.splitext(args.out)
    for sc in scenarios:
        trace, metrics = hz.run_trace(sc, policy)
        out = args.out if len(scenarios) == 1 else f"{root}_{sc.name}{ext}"
        hz.save_trace(trace, out)
        results.append({"scenario": sc.name, "out": out,
                        "metrics": metrics.to_json()})
    _emit(results[0] if len(results) == 1 else {"traces": results})
    return 0


def cmd_bench(args) -> int:
    from .harness import measure_efficiency
    policy = _load_policy_arg(args.policy, args.path)
    flops, runtime = measure_efficiency(policy, n_decisions=args.decisions,
                                        seed=args.seed)
    doc = {"policy": args.policy, "flops": flops,
           "per_decision_runtime_s": runtime, "n_decisions": args.decisions}
    with open(args.out, "w") as f:
        json.dump(doc, f, indent=2)
    _emit(doc)
    return 0


# --- wiring ----------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="ratetree",
                     description="congestion-control distillation pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def seeded(name, help_, func):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = seeded("train-teacher", "PPO-train the neural teacher",
               cmd_train_teacher)
    p.add_argument("--config", required=True,
                   help="JSON training overrides; {} for defaults")
    p.add_argument("--out", required=True, help="policy checkpoint path")

    p = seeded("collect", "roll out the teacher into a CSV dataset",
               cmd_collect)
    p.add_argument("--teacher", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--out", required=True)

    p = seeded("distill", "build a symbolic tree from rollouts", cmd_distill)
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out", required=True, help="tree grammar file")
    p.add_argument("--report", required=True, help="fidelity report JSON")
    p.add_argument("--config", help="JSON with build/gp/holdout_frac keys")
    p.add_argument("--fitness-log",
                   help="per-generation GP fitness CSV "
                        "(default: <report>_fitness.csv)")

    p = seeded("grid", "evaluate the teacher across the condition grid",
               cmd_grid)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=3,
                   help="episodes per config")

    p = seeded("cluster", "choose k and derive branch contexts", cmd_cluster)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True, help="contexts JSON")
    p.add_argument("--k-max", type=int, default=8)

    p = seeded("train-branches", "train one specialist tree per context",
               cmd_train_branches)
    p.add_argument("--contexts", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config",
                   help="JSON with teacher/build/gp/rollout_episodes keys")

    p = seeded("trace", "run a policy over a scenario into a trace CSV",
               cmd_trace)
    p.add_argument("--policy", required=True,
                   choices=("tree", "branched", "teacher", "aimd"))
    p.add_argument("--path", help="policy artifact (not needed for aimd)")
    p.add_argument("--scenario", required=True,
                   help="lossy | oscillating | sweep:<condition>")
    p.add_argument("--out", required=True)

    p = seeded("bench", "measure per-decision cost of a policy", cmd_bench)
    p.add_argument("--policy", required=True,
                   choices=("tree", "branched", "teacher", "aimd"))
    p.add_argument("--path", help="policy artifact (not needed for aimd)")
    p.add_argument("--out", required=True)
    p.add_argument("--decisions", type=int, default=100_000)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        _fail("Interrupted", "interrupted", code=130)
    except Exception as exc:
        _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
