"""Batch experiment front-end: solve, train, sweep, and report.

One JSON config file drives everything; a handful of flat flags
(--seed, --variant, --steps, --out) override it for train runs. The
effective config (after overrides, with the dataset path pinned) is
echoed into the output directory so any run can be reproduced from its
own provenance record. Exit codes: 0 success, 1 runtime failure,
2 usage or parse failure. File formats are documented in
docs/formats.md.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .envs import (
    GridWorldSpec,
    build_cliff_grid,
    build_random_safe_mdp,
    collect_offline_dataset,
    uniform_policy,
    uniform_safe_policy,
)
from .learner import LearnerConfig
from .mdp import ConvergenceError, max_norm_distance, save_problem, solve_guarded_value_iteration, solve_pruned_value_iteration
from .sampling import DssConfig, DtsConfig, OfflineDataset
from .trainer import RunConfig, RunLog, run_training

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

REPORT_FIELDS = (
    "final_td_error",
    "final_ensemble_variance",
    "final_ttfv",
    "final_eval_return",
    "coverage",
    "support_kl",
    "action_novelty_rate",
)


class CliError(RuntimeError):
    """Runtime failure carrying a diagnostic for stderr."""


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    return json.loads(text)


def grid_from_doc(doc: dict) -> GridWorldSpec:
    numeric = {
        key: doc[key]
        for key in ("step_reward", "goal_reward", "hazard_reward", "slip_prob", "gamma")
        if key in doc
    }
    if "map" in doc:
        return GridWorldSpec.from_ascii(doc["map"], **numeric)
    return GridWorldSpec(
        width=int(doc["width"]),
        height=int(doc["height"]),
        start=tuple(doc["start"]),
        goal=tuple(doc["goal"]),
        hazards=frozenset(tuple(c) for c in doc.get("hazards", [])),
        **numeric,
    )


def run_config_from_doc(doc: dict) -> RunConfig:
    grid = grid_from_doc(doc["env"])
    total_steps = int(doc["total_steps"])
    horizon = max(total_steps, 1)
    dts_doc = doc.get("dts", {})
    dss_doc = doc.get("dss", {})
    learner_doc = dict(doc.get("learner", {}))
    learner_doc.setdefault("gamma", grid.gamma)
    optional = {
        key: doc[key]
        for key in (
            "ensemble_size", "batch_size", "updates_per_step", "eval_every",
            "eval_episodes", "eval_max_len", "ttfv_episodes", "ttfv_max_steps",
            "max_episode_len", "online_buffer_capacity", "stochastic_eval",
        )
        if key in doc
    }
    return RunConfig(
        variant=doc.get("variant", "guardian"),
        grid=grid,
        learner=LearnerConfig(**learner_doc),
        dts=DtsConfig(
            delta_min=int(dts_doc.get("delta_min", 1)),
            delta_max=int(dts_doc.get("delta_max", 16)),
            beta=float(dts_doc.get("beta", 2.0)),
            horizon=horizon,
        ),
        dss=DssConfig(
            lambda_min=float(dss_doc.get("lambda_min", 0.1)),
            lambda_max=float(dss_doc.get("lambda_max", 0.5)),
            k=float(dss_doc.get("k", 10.0 / horizon)),
            horizon=horizon,
        ),
        total_steps=total_steps,
        seed=int(doc.get("seed", 0)),
        offline_dataset_path=doc.get("offline_dataset"),
        **optional,
    )


def prepare_offline_dataset(doc: dict, out_dir: Path) -> Path:
    """Locate or generate the offline dataset; returns its path.

    An existing file named by "offline_dataset" wins; otherwise a
    "generate_offline" block rolls one out (deterministic per its seed)
    and writes it to that path (default: <out_dir>/offline.jsonl).
    """
    configured = doc.get("offline_dataset")
    if configured and Path(configured).exists():
        return Path(configured)
    gen = doc.get("generate_offline")
    if gen is None:
        raise CliError(
            "no offline dataset: configured path missing and no generate_offline block"
        )
    grid = grid_from_doc(doc["env"])
    mdp, spec = build_cliff_grid(grid)
    behavior_name = gen.get("behavior", "uniform_safe")
    if behavior_name == "uniform_safe":
        behavior = uniform_safe_policy(spec)
    elif behavior_name == "uniform":
        behavior = uniform_policy(mdp.num_states, mdp.num_actions)
    else:
        raise CliError(f"unknown behavior {behavior_name!r} (use uniform_safe or uniform)")
    dataset = collect_offline_dataset(
        mdp,
        spec,
        behavior,
        n_episodes=int(gen.get("episodes", 100)),
        max_ep_len=int(gen.get("max_ep_len", 100)),
        seed=int(gen.get("seed", 0)),
        guardian_filter=bool(gen.get("guardian_filter", True)),
        start_state=grid.start_state,
    )
    path = Path(configured) if configured else out_dir / "offline.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.save_jsonl(path)
    return path


def _train_one(doc: dict, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset_path = prepare_offline_dataset(doc, out_dir)
    doc = dict(doc)
    doc["offline_dataset"] = str(dataset_path.resolve())
    cfg = run_config_from_doc(doc)
    log = run_training(cfg, OfflineDataset.load_jsonl(dataset_path))
    log.save(out_dir)
    (out_dir / "effective_config.json").write_text(json.dumps(doc, indent=2) + "\n")
    return log.summary


def cmd_train(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.variant is not None:
        doc["variant"] = args.variant
    if args.steps is not None:
        doc["total_steps"] = args.steps
    out_dir = Path(args.out if args.out is not None else doc.get("output_dir", "runs/run"))
    summary = _train_one(doc, out_dir)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _sweep_worker(payload: tuple[dict, str]) -> str:
    doc, out_dir = payload
    _train_one(doc, Path(out_dir))
    return out_dir


def cmd_sweep(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    sweep = doc.get("sweep")
    if not sweep or not sweep.get("variants") or not sweep.get("seeds"):
        raise CliError("config needs a sweep block with non-empty variants and seeds")
    base_out = Path(args.out if args.out is not None else doc.get("output_dir", "runs/sweep"))
    jobs = []
    for variant in sweep["variants"]:
        for seed in sweep["seeds"]:
            run_doc = dict(doc)
            run_doc["variant"] = variant
            run_doc["seed"] = int(seed)
            jobs.append((run_doc, str(base_out / f"{variant}_seed{seed}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for done in pool.map(_sweep_worker, jobs):
                print(done)
    else:
        for payload in jobs:
            print(_sweep_worker(payload))
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    if "random_mdp" in doc:
        rm = doc["random_mdp"]
        mdp, spec = build_random_safe_mdp(
            num_states=int(rm["num_states"]),
            num_actions=int(rm["num_actions"]),
            safe_fraction=float(rm.get("safe_fraction", 0.7)),
            seed=int(rm.get("seed", 0)),
            gamma=float(rm.get("gamma", 0.9)),
        )
    elif "env" in doc:
        mdp, spec = build_cliff_grid(grid_from_doc(doc["env"]))
    else:
        raise CliError("solve config needs an env or random_mdp block")
    tol = float(doc.get("tol", 1e-8))
    gap_tolerance = float(doc.get("gap_tolerance", 1e-6))
    out_dir = Path(args.out if args.out is not None else doc.get("output_dir", "runs/solve"))
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = solve_guarded_value_iteration(mdp, spec, tol=tol)
        oracle = solve_pruned_value_iteration(mdp, spec, tol=tol)
    except ConvergenceError as exc:
        print(f"solver failed to converge: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    gap = max_norm_distance(result.q, oracle)
    save_problem(out_dir / "problem.json", mdp, spec)
    (out_dir / "q_guarded.json").write_text(json.dumps({"q": result.q.tolist()}))
    (out_dir / "q_pruned_oracle.json").write_text(json.dumps({"q": oracle.tolist()}))
    solution = {
        "gap": gap,
        "gap_tolerance": gap_tolerance,
        "iterations": result.iterations,
        "tol": tol,
        "within_tolerance": gap <= gap_tolerance,
    }
    (out_dir / "solution.json").write_text(json.dumps(solution, indent=2) + "\n")
    print(json.dumps(solution, indent=2))
    return EXIT_OK if gap <= gap_tolerance else EXIT_RUNTIME


def cmd_report(args: argparse.Namespace) -> int:
    by_variant: dict[str, list[dict]] = {}
    for run_dir in args.run_dirs:
        directory = Path(run_dir)
        try:
            log = RunLog.load(directory)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise CliError(f"missing or corrupt run log in {directory}: {exc}") from exc
        if not log.summary or not log.records:
            raise CliError(f"missing or corrupt run log in {directory}: empty log")
        by_variant.setdefault(log.summary.get("variant", "unknown"), []).append(log.summary)
    lines = ["variant,runs," + ",".join(REPORT_FIELDS)]
    for variant in sorted(by_variant):
        summaries = by_variant[variant]
        cells = [variant, str(len(summaries))]
        for fieldname in REPORT_FIELDS:
            values = [s[fieldname] for s in summaries if s.get(fieldname) is not None]
            cells.append(repr(float(statistics.median(values))) if values else "")
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guardedrl",
        description="Batch experiments for projection-guarded tabular RL",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="exact guarded solve + pruned-MDP cross-check")
    p_solve.add_argument("config")
    p_solve.add_argument("--out", default=None, help="output directory")
    p_solve.set_defaults(func=cmd_solve)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("config")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--variant", default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run the config's variant x seed sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker slots")
    p_sweep.add_argument("--out", default=None, help="base output directory")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="aggregate run directories into a CSV")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--out", default=None, help="CSV output path (default stdout)")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except json.JSONDecodeError as exc:
        print(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
