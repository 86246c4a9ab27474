"""Command-line pipeline: generate, solve, export, evaluate, and check theory.

Every command derives its inputs from (config, seed) alone, so a rerun with
the same config and seed reproduces every artifact byte for byte; only the
per-command manifests differ (they carry a wall-clock timestamp).  Run
directories are laid out as

    <out>/tasks/task_0000.json ...      (gen)
    <out>/solutions/solution_0000.json  (solve)
    <out>/corpus/{sft,dpt}.jsonl[+manifest]  (export)
    <out>/reports/*.json|*.csv          (eval, theory-sim, darkroom)
    <out>/<command>.manifest.json       (every command)

Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 a
--check'd replication test failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .core import Rng
from .dataset import (build_dpt_dataset, build_sft_corpus, corpus_manifest,
                      save_corpus)
from .envs import (AmbiguityConfig, DarkroomTask, EnergyParams, all_darkroom_goals,
                   load_task, save_task, split_goals)
from .evaluation import (DegenerateOptimum, GridSpec, darkroom_eval,
                         darkroom_rows_to_csv, evaluation_policy, generate_tasks,
                         grid_rows_to_csv, optimality_gap, reference_policy,
                         run_experiment_grid)
from .rollout import ExternalPolicyClient
from .solvers import BeliefSolverConfig, MdpSolution
from .theory import E2Config, e2_rows_to_csv, run_e2_simulation

# stream indices hung off the root generator, one per pipeline stage
STREAM_TASKS, STREAM_EVAL, STREAM_CORPUS, STREAM_THEORY, STREAM_DARKROOM = range(5)


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "setting": "mdp",
    "seed": 0,
    "out": "runs/default",
    "num_tasks": 20,
    "env": {
        "energy_cap": 9, "charge_cost": -0.02, "success_prob": None,
        "p_range": [0.5, 1.0], "obs_prob": 0.8, "horizon": 10, "discount": 0.95,
    },
    "ambiguity": {
        "num_models": 3, "kl_radius": 0.2, "concentration": 50.0,
        "max_attempts": 10000, "alpha": 0.5,
    },
    "solver": {
        "quantization": 1e-3, "node_budget": 5_000_000, "obs_prune": 1e-12,
        "expansion_chunk": 4096,
    },
    "dataset": {
        "format": "sft", "trajectories_per_task": 15, "records_per_task": 15,
        "context_trajectories": 2,
    },
    "eval": {
        "policy": "random", "rollouts_per_task": None,
        "external": {"transport": "tcp", "host": "127.0.0.1", "port": 0,
                     "argv": [], "timeout": 60.0},
    },
    "grid": {
        "settings": ["mdp"], "horizons": [5, 10, 15],
        "obs_probs": [0.5, 0.8, 1.0], "model_counts": [1, 3, 5],
        "alphas": [0.5], "policies": ["random"], "num_tasks": 20,
    },
    "theory": {
        "dim": 10, "num_actions": 5, "horizon": 10, "discount": 0.95,
        "prompt_lengths": [10, 20, 50, 100, 200, 500, 1000],
        "train_lengths": [100, 1000, 10000], "condition_numbers": [1, 5, 25],
        "tasks_per_cell": 500, "coverage": 1.0,
    },
    "darkroom": {
        "size": 10, "horizon": 100, "subset": "test", "train_fraction": 0.8,
        "rollouts_per_goal": 5,
    },
}

_SETTINGS = ("mdp", "pomdp", "apomdp", "darkroom")
_POLICIES = ("oracle", "random", "qmdp", "external")


def _merge_section(base: dict, override: dict, path: str) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown field {path}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge_section(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _validate_config(cfg: dict):
    def require(cond, field, why):
        if not cond:
            raise ConfigError(f"field {field!r}: {why}")

    require(cfg["setting"] in _SETTINGS, "setting", f"must be one of {_SETTINGS}")
    require(isinstance(cfg["seed"], int), "seed", "must be an integer")
    require(isinstance(cfg["num_tasks"], int) and cfg["num_tasks"] >= 1,
            "num_tasks", "must be a positive integer")
    env = cfg["env"]
    require(env["energy_cap"] >= 1, "env.energy_cap", "must be >= 1")
    require(env["horizon"] >= 1, "env.horizon", "must be >= 1")
    require(0.0 < env["discount"] <= 1.0, "env.discount", "must lie in (0, 1]")
    require(0.0 < env["obs_prob"] <= 1.0, "env.obs_prob", "must lie in (0, 1]")
    lo, hi = env["p_range"]
    require(0.0 < lo <= hi <= 1.0, "env.p_range", "must satisfy 0 < lo <= hi <= 1")
    amb = cfg["ambiguity"]
    require(amb["num_models"] >= 1, "ambiguity.num_models", "must be >= 1")
    require(amb["kl_radius"] > 0.0, "ambiguity.kl_radius", "must be positive")
    require(0.0 <= amb["alpha"] <= 1.0, "ambiguity.alpha", "must lie in [0, 1]")
    sol = cfg["solver"]
    require(0.0 < sol["quantization"] <= 0.5, "solver.quantization",
            "must lie in (0, 0.5]")
    require(sol["node_budget"] >= 1, "solver.node_budget", "must be >= 1")
    ds = cfg["dataset"]
    require(ds["format"] in ("sft", "dpt"), "dataset.format", "must be sft or dpt")
    require(ds["trajectories_per_task"] >= 1, "dataset.trajectories_per_task",
            "must be >= 1")
    ev = cfg["eval"]
    require(ev["policy"] in _POLICIES, "eval.policy", f"must be one of {_POLICIES}")
    if ev["rollouts_per_task"] is not None:
        require(ev["rollouts_per_task"] >= 1, "eval.rollouts_per_task", "must be >= 1")
    require(ev["external"]["transport"] in ("tcp", "child"),
            "eval.external.transport", "must be tcp or child")
    dk = cfg["darkroom"]
    require(dk["subset"] in ("train", "test", "all"), "darkroom.subset",
            "must be train, test, or all")


def load_config(path: str | None, overrides: dict) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge_section(DEFAULT_CONFIG, user, "")
    for key, value in overrides.items():
        if value is not None:
            if key == "policy":
                cfg["eval"] = dict(cfg["eval"], policy=value)
            else:
                cfg[key] = value
    _validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# shared plumbing


def _energy_params(cfg: dict) -> EnergyParams:
    env = cfg["env"]
    return EnergyParams(
        energy_cap=env["energy_cap"], charge_cost=env["charge_cost"],
        success_prob=env["success_prob"], p_range=tuple(env["p_range"]),
        obs_prob=env["obs_prob"], horizon=env["horizon"], discount=env["discount"])


def _ambiguity(cfg: dict) -> AmbiguityConfig:
    amb = cfg["ambiguity"]
    return AmbiguityConfig(
        num_models=amb["num_models"], kl_radius=amb["kl_radius"],
        concentration=amb["concentration"], max_attempts=amb["max_attempts"],
        alpha=amb["alpha"])


def _solver(cfg: dict) -> BeliefSolverConfig:
    sol = cfg["solver"]
    return BeliefSolverConfig(
        quantization=sol["quantization"], node_budget=sol["node_budget"],
        obs_prune=sol["obs_prune"], expansion_chunk=sol["expansion_chunk"])


def _darkroom_goals(cfg: dict) -> list[tuple[int, int]]:
    dk = cfg["darkroom"]
    if dk["subset"] == "all":
        return all_darkroom_goals(dk["size"])
    rng = Rng(cfg["seed"]).split(STREAM_DARKROOM)
    train, test = split_goals(rng, dk["size"], dk["train_fraction"])
    return train if dk["subset"] == "train" else test


def _build_tasks(cfg: dict) -> tuple[list, list[dict]]:
    """Tasks plus per-task audit metadata, derived from (config, seed)."""
    rng = Rng(cfg["seed"]).split(STREAM_TASKS)
    if cfg["setting"] == "darkroom":
        dk = cfg["darkroom"]
        tasks = [DarkroomTask(goal, dk["size"], dk["horizon"])
                 for goal in _darkroom_goals(cfg)]
        metas = [{"setting": "darkroom", "goal": list(t.goal)} for t in tasks]
        return tasks, metas
    tasks = generate_tasks(cfg["setting"], cfg["num_tasks"], _energy_params(cfg),
                           _ambiguity(cfg), rng)
    metas = []
    for i, task in enumerate(tasks):
        child = rng.split(i)
        meta = {"setting": cfg["setting"], "stream": [child.seed, child.stream]}
        tr = task.models[0].transition if cfg["setting"] == "apomdp" \
            else (task.transition if cfg["setting"] == "mdp" else task.mdp.transition)
        meta["success_prob"] = float(tr[0, 0, 1])
        metas.append(meta)
    return tasks, metas


def _load_or_build_tasks(cfg: dict, out: Path) -> tuple[list, list[dict]]:
    """Prefer task files written by ``gen`` (audit trail); else re-derive."""
    tasks_dir = out / "tasks"
    paths = sorted(tasks_dir.glob("task_*.json")) if tasks_dir.is_dir() else []
    if paths:
        tasks, metas = [], []
        for p in paths:
            task, meta = load_task(p)
            tasks.append(task)
            metas.append(meta)
        return tasks, metas
    return _build_tasks(cfg)


def _write_manifest(out: Path, command: str, cfg: dict, artifacts: list[str]):
    manifest = {
        "command": command,
        "package_version": __version__,
        "created_unix": time.time(),
        "config": cfg,
        "artifacts": sorted(artifacts),
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def _external_client(cfg: dict) -> ExternalPolicyClient:
    ext = cfg["eval"]["external"]
    if ext["transport"] == "tcp":
        return ExternalPolicyClient.tcp(ext["host"], int(ext["port"]),
                                        timeout=float(ext["timeout"]))
    if not ext["argv"]:
        raise ConfigError("eval.external.argv must be set for the child transport")
    return ExternalPolicyClient.child_process(list(ext["argv"]),
                                              timeout=float(ext["timeout"]))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    tasks_dir = out / "tasks"
    tasks_dir.mkdir(parents=True, exist_ok=True)
    tasks, metas = _build_tasks(cfg)
    artifacts = []
    for i, (task, meta) in enumerate(zip(tasks, metas)):
        path = tasks_dir / f"task_{i:04d}.json"
        save_task(path, task, meta)
        artifacts.append(str(path.relative_to(out)))
    _write_manifest(out, "gen", cfg, artifacts)
    print(f"gen: wrote {len(tasks)} {cfg['setting']} task(s) to {tasks_dir}")
    return 0


def cmd_solve(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    sol_dir = out / "solutions"
    sol_dir.mkdir(parents=True, exist_ok=True)
    tasks, _ = _load_or_build_tasks(cfg, out)
    artifacts = []
    fallbacks = 0
    for i, task in enumerate(tasks):
        handle, ref = reference_policy(task, _solver(cfg))
        record = {"task_index": i, "reference": ref}
        if ref == "exact" and isinstance(handle.solution, MdpSolution):
            sol = handle.solution
            record.update(kind="mdp", expected_return=sol.expected_return(),
                          values=sol.values.tolist(), policy=sol.policy.tolist())
        elif ref == "exact" and isinstance(handle.solution, DarkroomTask):
            record.update(kind="darkroom",
                          oracle_return=handle.solution.oracle_return())
        elif ref == "exact":
            record.update(kind="belief", **handle.solution.to_summary())
        else:
            fallbacks += 1
        path = sol_dir / f"solution_{i:04d}.json"
        path.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
        artifacts.append(str(path.relative_to(out)))
    _write_manifest(out, "solve", cfg, artifacts)
    note = f" ({fallbacks} fell back to qmdp)" if fallbacks else ""
    print(f"solve: wrote {len(tasks)} solution record(s) to {sol_dir}{note}")
    return 0


def cmd_export(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    corpus_dir = out / "corpus"
    corpus_dir.mkdir(parents=True, exist_ok=True)
    tasks, metas = _load_or_build_tasks(cfg, out)
    oracles = [reference_policy(task, _solver(cfg))[0] for task in tasks]
    rng = Rng(cfg["seed"]).split(STREAM_CORPUS)
    ds = cfg["dataset"]
    if ds["format"] == "sft":
        records = build_sft_corpus(tasks, oracles, rng,
                                   trajectories_per_task=ds["trajectories_per_task"],
                                   metas=metas)
        path = corpus_dir / "sft.jsonl"
        extra = {"trajectories_per_task": ds["trajectories_per_task"],
                 "setting": cfg["setting"]}
    else:
        records = build_dpt_dataset(tasks, oracles, rng,
                                    records_per_task=ds["records_per_task"],
                                    context_trajectories=ds["context_trajectories"],
                                    metas=metas)
        path = corpus_dir / "dpt.jsonl"
        extra = {"records_per_task": ds["records_per_task"],
                 "context_trajectories": ds["context_trajectories"],
                 "setting": cfg["setting"]}
    manifest = corpus_manifest(records, ds["format"], cfg["seed"], extra)
    manifest_path = save_corpus(path, records, manifest)
    _write_manifest(out, "export", cfg, [str(path.relative_to(out)),
                                         str(manifest_path.relative_to(out))])
    print(f"export: wrote {len(records)} {ds['format']} record(s) to {path}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg["seed"]).split(STREAM_EVAL)
    jobs = args.jobs or 1
    if args.grid:
        g = cfg["grid"]
        spec = GridSpec(settings=tuple(g["settings"]), horizons=tuple(g["horizons"]),
                        obs_probs=tuple(g["obs_probs"]),
                        model_counts=tuple(g["model_counts"]),
                        alphas=tuple(g["alphas"]), policies=tuple(g["policies"]),
                        num_tasks=g["num_tasks"], params=_energy_params(cfg),
                        ambiguity=_ambiguity(cfg), solver=_solver(cfg))
        rows = run_experiment_grid(spec, rng, jobs=jobs)
        path = reports / "grid.csv"
        grid_rows_to_csv(rows, path)
        _write_manifest(out, "eval", cfg, [str(path.relative_to(out))])
        print(f"eval: wrote {len(rows)} grid row(s) to {path}")
        return 0
    if cfg["setting"] == "darkroom":
        return _eval_darkroom(cfg, args, reports, out, rng)
    tasks, _ = _load_or_build_tasks(cfg, out)
    oracles, refs = [], []
    for task in tasks:
        handle, ref = reference_policy(task, _solver(cfg))
        oracles.append(handle)
        refs.append(ref)
    client = None
    policy_kind = cfg["eval"]["policy"]
    try:
        if policy_kind == "external":
            client = _external_client(cfg)
            jobs = 1
        handles = [evaluation_policy(policy_kind, task, oracle, client)
                   for task, oracle in zip(tasks, oracles)]
        rollouts = cfg["eval"]["rollouts_per_task"] or \
            (90 if cfg["setting"] == "apomdp" else 30)
        reference = "exact" if all(r == "exact" for r in refs) else "qmdp-fallback"
        report = optimality_gap(tasks, oracles, handles, rng, rollouts,
                                reference=reference, jobs=jobs)
    finally:
        if client is not None:
            client.close()
    path = reports / "eval.json"
    payload = {
        "setting": cfg["setting"], "policy": policy_kind,
        "num_tasks": report.num_tasks, "rollouts_per_task": report.rollouts_per_task,
        "mean_gap": report.mean_gap, "ci_low": report.ci_low,
        "ci_high": report.ci_high, "degenerate_count": report.degenerate_count,
        "invalid_actions": report.invalid_actions, "reference": report.reference,
        "task_gaps": report.task_gaps, "opt_returns": report.opt_returns,
        "eval_returns": report.eval_returns,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    _write_manifest(out, "eval", cfg, [str(path.relative_to(out))])
    print(f"eval: {cfg['setting']}/{policy_kind} mean gap {report.mean_gap:.4f} "
          f"[{report.ci_low:.4f}, {report.ci_high:.4f}] "
          f"({report.reference}) -> {path}")
    return 0


def _eval_darkroom(cfg: dict, args, reports: Path, out: Path, rng: Rng) -> int:
    dk = cfg["darkroom"]
    goals = _darkroom_goals(cfg)
    policy_kind = cfg["eval"]["policy"]
    if policy_kind == "qmdp":
        raise ConfigError("field 'eval.policy': qmdp does not apply to darkroom")
    client = None
    try:
        if policy_kind == "external":
            client = _external_client(cfg)
        summary = darkroom_eval(goals, policy_kind, rng,
                                rollouts_per_goal=dk["rollouts_per_goal"],
                                size=dk["size"], horizon=dk["horizon"],
                                client=client)
    finally:
        if client is not None:
            client.close()
    csv_path = reports / "darkroom.csv"
    darkroom_rows_to_csv(summary["rows"], csv_path)
    json_path = reports / "darkroom.json"
    json_path.write_text(json.dumps(
        {k: v for k, v in summary.items() if k != "rows"},
        sort_keys=True, indent=1) + "\n")
    _write_manifest(out, "eval", cfg, [str(csv_path.relative_to(out)),
                                       str(json_path.relative_to(out))])
    print(f"eval: darkroom/{policy_kind} mean return {summary['mean_return']:.3f} "
          f"over {summary['num_goals']} goal(s) -> {csv_path}")
    if getattr(args, "check", False):
        ok = True
        if policy_kind == "oracle":
            ok = all(abs(r["mean_return"] - r["oracle_return"]) == 0.0
                     for r in summary["rows"])
        elif policy_kind == "random":
            ok = summary["mean_return"] < 2.0
        print(f"darkroom check: {'pass' if ok else 'FAIL'}")
        if not ok:
            return 3
    return 0


def cmd_theory_sim(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    t = cfg["theory"]
    e2 = E2Config(dim=t["dim"], num_actions=t["num_actions"], horizon=t["horizon"],
                  discount=t["discount"], prompt_lengths=tuple(t["prompt_lengths"]),
                  train_lengths=tuple(t["train_lengths"]),
                  condition_numbers=tuple(t["condition_numbers"]),
                  tasks_per_cell=t["tasks_per_cell"], coverage=t["coverage"],
                  seed=cfg["seed"])
    rows = run_e2_simulation(e2, jobs=args.jobs or 1)
    path = reports / "theory_e2.csv"
    e2_rows_to_csv(rows, path)
    _write_manifest(out, "theory-sim", cfg, [str(path.relative_to(out))])
    violations = sum(1 for r in rows if r["violated"])
    print(f"theory-sim: {len(rows)} cell(s), {violations} bound violation(s) -> {path}")
    if args.check and violations:
        print("theory check: FAIL (suboptimality bound violated)")
        return 3
    if args.check:
        print("theory check: pass")
    return 0


def cmd_darkroom(cfg: dict, args) -> int:
    out = Path(cfg["out"])
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    cfg = dict(cfg, setting="darkroom")
    rng = Rng(cfg["seed"]).split(STREAM_EVAL)
    return _eval_darkroom(cfg, args, reports, out, rng)


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the config-error code on bad usage."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decisionlab",
                     description="tasks, oracles, corpora, and theory checks "
                                 "for in-context decision-making")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults applied)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--jobs", type=int, help="worker processes (default 1)")

    common(sub.add_parser("gen", help="write task files"))
    common(sub.add_parser("solve", help="write solution records"))
    common(sub.add_parser("export", help="write an SFT or DPT corpus"))
    p_eval = sub.add_parser("eval", help="optimality-gap evaluation")
    common(p_eval)
    p_eval.add_argument("--policy", choices=_POLICIES,
                        help="override eval.policy from the config")
    p_eval.add_argument("--grid", action="store_true",
                        help="run the full experiment grid from the config")
    p_theory = sub.add_parser("theory-sim", help="suboptimality bound grid")
    common(p_theory)
    p_theory.add_argument("--check", action="store_true",
                          help="exit 3 if any cell violates the bound")
    p_dark = sub.add_parser("darkroom", help="darkroom goal-set evaluation")
    common(p_dark)
    p_dark.add_argument("--policy", choices=("oracle", "random", "external"),
                        help="override eval.policy from the config")
    p_dark.add_argument("--check", action="store_true",
                        help="exit 3 if the policy misses its expected value")
    return parser


_COMMANDS = {
    "gen": cmd_gen,
    "solve": cmd_solve,
    "export": cmd_export,
    "eval": cmd_eval,
    "theory-sim": cmd_theory_sim,
    "darkroom": cmd_darkroom,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {"seed": args.seed, "out": args.out,
                     "policy": getattr(args, "policy", None)}
        cfg = load_config(args.config, overrides)
        Path(cfg["out"]).mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DegenerateOptimum as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
