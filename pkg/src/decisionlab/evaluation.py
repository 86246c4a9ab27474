"""Policy evaluation by oracle-relative optimality gap.

For every task the oracle and the evaluated policy are rolled out on the same
environment streams (one paired generator per episode), so the oracle's own
gap is exactly zero rather than Monte-Carlo noise.  The per-task gap is

    (OPT - EVAL) / OPT,   OPT = mean oracle return, EVAL = mean policy return,

with discounted returns; tasks whose OPT is not meaningfully positive are
excluded and counted.  Reported intervals are two-sided 95% Student-t over
per-task gaps.

Belief tasks whose exact solve exceeds the node budget fall back to the QMDP
policy as the reference decision-maker; reports record which reference was
used, since a fallback reference makes "gap" relative to an approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import AmbiguousPOMDP, Rng, TabularMDP, TabularPOMDP
from .envs import (AmbiguityConfig, DarkroomTask, EnergyParams, gen_energy_apomdp,
                   gen_energy_mdp, gen_energy_pomdp)
from .rollout import ExternalPolicyClient, FewShotContext, PolicyHandle, rollout
from .solvers import (BeliefSolverConfig, BudgetExceeded, qmdp_policy, solve_apomdp,
                      solve_mdp, solve_pomdp)

DEGENERATE_OPT = 1e-9


class DegenerateOptimum(RuntimeError):
    """Every task was excluded: no positive oracle value to normalize by."""


# ---------------------------------------------------------------------------
# gap evaluation


@dataclass
class EvalReport:
    num_tasks: int
    rollouts_per_task: int
    mean_gap: float
    ci_low: float
    ci_high: float
    task_gaps: list[float]
    opt_returns: list[float]
    eval_returns: list[float]
    degenerate_count: int
    invalid_actions: int
    reference: str = "exact"


def _t_interval(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    mean = float(values.mean())
    if n < 2:
        return mean, mean
    half = float(stats.t.ppf(0.975, n - 1) * values.std(ddof=1) / math.sqrt(n))
    return mean - half, mean + half


def _paired_rngs(rng: Rng, task_index: int, episode: int) -> tuple[Rng, Rng]:
    pair = rng.split(task_index).split(episode)
    return Rng(pair.seed, pair.stream), Rng(pair.seed, pair.stream)


def _task_gap_sums(args) -> tuple[float, float, int]:
    """Mean oracle and policy returns for one task (episode-paired streams)."""
    (task, oracle, handle, context, task_id, seed, stream, task_index,
     rollouts_per_task) = args
    rng = Rng(seed, stream)
    opt_sum, eval_sum, invalid = 0.0, 0.0, 0
    for j in range(rollouts_per_task):
        rng_a, rng_b = _paired_rngs(rng, task_index, j)
        opt_sum += rollout(task, oracle, rng_a, task_id=task_id).online_return
        result = rollout(task, handle, rng_b, context=context, task_id=task_id)
        eval_sum += result.online_return
        invalid += result.invalid_actions
    return opt_sum / rollouts_per_task, eval_sum / rollouts_per_task, invalid


def optimality_gap(tasks: list, oracles: list[PolicyHandle],
                   policy: list[PolicyHandle] | PolicyHandle, rng: Rng,
                   rollouts_per_task: int = 30,
                   contexts: list[FewShotContext] | None = None,
                   task_ids: list[str] | None = None,
                   reference: str = "exact", jobs: int = 1) -> EvalReport:
    """Mean oracle-relative gap of ``policy`` across tasks, with a t-interval.

    ``policy`` may be a single handle (shared across tasks) or one per task.
    Episode j of task i uses one generator pair for both the oracle and the
    evaluated policy, so environment draws are identical.  ``jobs > 1``
    distributes tasks over processes; per-task streams are derived from the
    task index, so results are identical to the serial run.  External-policy
    handles hold live connections and must be evaluated with ``jobs=1``.
    """
    if len(tasks) != len(oracles):
        raise ValueError("tasks and oracles must align")
    handles = policy if isinstance(policy, list) else [policy] * len(tasks)
    if len(handles) != len(tasks):
        raise ValueError("one policy handle per task (or a single shared one)")
    work = []
    for i, task in enumerate(tasks):
        task_id = task_ids[i] if task_ids else f"task_{i:04d}"
        context = contexts[i] if contexts else None
        work.append((task, oracles[i], handles[i], context, task_id,
                     rng.seed, rng.stream, i, rollouts_per_task))
    if jobs > 1:
        if any(h.kind == "external" for h in handles):
            raise ValueError("external policies require jobs=1")
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task_gap_sums, work))
    else:
        results = [_task_gap_sums(w) for w in work]
    gaps, opts, evals = [], [], []
    degenerate = 0
    invalid = 0
    for opt, ev, bad in results:
        invalid += bad
        if opt <= DEGENERATE_OPT:
            degenerate += 1
            continue
        gaps.append((opt - ev) / opt)
        opts.append(opt)
        evals.append(ev)
    if not gaps:
        raise DegenerateOptimum("all tasks have non-positive oracle value")
    arr = np.array(gaps)
    lo, hi = _t_interval(arr)
    return EvalReport(len(gaps), rollouts_per_task, float(arr.mean()), lo, hi,
                      gaps, opts, evals, degenerate, invalid, reference)


# ---------------------------------------------------------------------------
# task batteries and reference policies


def generate_tasks(setting: str, num_tasks: int, params: EnergyParams,
                   ambiguity: AmbiguityConfig, rng: Rng) -> list:
    """One energy task per split stream; reproducible independent of order."""
    gens = {
        "mdp": lambda r: gen_energy_mdp(params, r),
        "pomdp": lambda r: gen_energy_pomdp(params, r),
        "apomdp": lambda r: gen_energy_apomdp(params, ambiguity, r),
    }
    if setting not in gens:
        raise ValueError(f"unknown setting {setting!r}")
    return [gens[setting](rng.split(i)) for i in range(num_tasks)]


def reference_policy(task, solver_config: BeliefSolverConfig | None = None,
                     allow_fallback: bool = True) -> tuple[PolicyHandle, str]:
    """Best available reference decision-maker for a task.

    Exact backward induction where feasible; for belief tasks whose tree
    exceeds the node budget, the QMDP policy on the (nominal) model if
    ``allow_fallback`` else the BudgetExceeded propagates.
    """
    if isinstance(task, TabularMDP):
        return PolicyHandle.oracle(solve_mdp(task)), "exact"
    if isinstance(task, DarkroomTask):
        return PolicyHandle.oracle(task), "exact"
    if isinstance(task, TabularPOMDP):
        try:
            return PolicyHandle.oracle(solve_pomdp(task, solver_config)), "exact"
        except BudgetExceeded:
            if not allow_fallback:
                raise
            return PolicyHandle.qmdp(qmdp_policy(task)), "qmdp-fallback"
    if isinstance(task, AmbiguousPOMDP):
        try:
            return PolicyHandle.oracle(solve_apomdp(task, solver_config)), "exact"
        except BudgetExceeded:
            if not allow_fallback:
                raise
            return PolicyHandle.qmdp(qmdp_policy(task.base_pomdp())), "qmdp-fallback"
    raise TypeError(f"unsupported task type {type(task).__name__}")


def evaluation_policy(kind: str, task, reference: PolicyHandle,
                      client: ExternalPolicyClient | None = None) -> PolicyHandle:
    if kind == "oracle":
        return reference
    if kind == "random":
        return PolicyHandle.random()
    if kind == "qmdp":
        if isinstance(task, TabularPOMDP):
            return PolicyHandle.qmdp(qmdp_policy(task))
        if isinstance(task, AmbiguousPOMDP):
            return PolicyHandle.qmdp(qmdp_policy(task.base_pomdp()))
        raise ValueError("qmdp evaluation requires a belief task")
    if kind == "external":
        if client is None:
            raise ValueError("external evaluation requires a client")
        return PolicyHandle.external(client)
    raise ValueError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# experiment grid


@dataclass
class GridSpec:
    """Axes of an evaluation sweep over energy-task settings.

    Axis values that do not apply to a setting (observation noise for the MDP,
    model-set size for non-ambiguous tasks) are skipped in the product and
    reported as empty columns.  Default episode counts follow the convention
    of 30 evaluation rollouts per task, tripled for ambiguous tasks.
    """

    settings: tuple = ("mdp", "pomdp", "apomdp")
    horizons: tuple = (5, 10, 15)
    obs_probs: tuple = (0.5, 0.8, 1.0)
    model_counts: tuple = (1, 3, 5)
    alphas: tuple = (0.5,)
    policies: tuple = ("random",)
    num_tasks: int = 20
    rollouts_mdp: int = 30
    rollouts_apomdp: int = 90
    params: EnergyParams = field(default_factory=EnergyParams)
    ambiguity: AmbiguityConfig = field(default_factory=AmbiguityConfig)
    solver: BeliefSolverConfig = field(default_factory=BeliefSolverConfig)


GRID_CSV_COLUMNS = ("setting", "policy", "horizon", "obs_prob", "num_models",
                    "alpha", "num_tasks", "rollouts_per_task", "reference",
                    "mean_gap", "ci_low", "ci_high", "degenerate_count",
                    "invalid_actions")


def _grid_cells(spec: GridSpec):
    for setting in spec.settings:
        horizons = spec.horizons
        obs = spec.obs_probs if setting in ("pomdp", "apomdp") else (None,)
        counts = spec.model_counts if setting == "apomdp" else (None,)
        alphas = spec.alphas if setting == "apomdp" else (None,)
        for policy in spec.policies:
            for T in horizons:
                for q in obs:
                    for nm in counts:
                        for alpha in alphas:
                            yield setting, policy, T, q, nm, alpha


def run_experiment_grid(spec: GridSpec, rng: Rng,
                        client: ExternalPolicyClient | None = None,
                        jobs: int = 1) -> list[dict]:
    """Evaluate every grid cell; one row per (setting, policy, axes) cell."""
    rows = []
    for cell_index, cell in enumerate(_grid_cells(spec)):
        setting, policy_kind, T, q, nm, alpha = cell
        params = EnergyParams(
            energy_cap=spec.params.energy_cap, charge_cost=spec.params.charge_cost,
            success_prob=spec.params.success_prob, p_range=spec.params.p_range,
            obs_prob=(q if q is not None else spec.params.obs_prob),
            horizon=T, discount=spec.params.discount)
        ambiguity = AmbiguityConfig(
            num_models=(nm if nm is not None else spec.ambiguity.num_models),
            kl_radius=spec.ambiguity.kl_radius,
            concentration=spec.ambiguity.concentration,
            max_attempts=spec.ambiguity.max_attempts,
            alpha=(alpha if alpha is not None else spec.ambiguity.alpha))
        cell_rng = rng.split(cell_index)
        tasks = generate_tasks(setting, spec.num_tasks, params, ambiguity,
                               cell_rng.split(0))
        oracles, references = [], []
        for task in tasks:
            handle, ref = reference_policy(task, spec.solver)
            oracles.append(handle)
            references.append(ref)
        handles = [evaluation_policy(policy_kind, task, oracle, client)
                   for task, oracle in zip(tasks, oracles)]
        rollouts_per_task = (spec.rollouts_apomdp if setting == "apomdp"
                             else spec.rollouts_mdp)
        reference = "exact" if all(r == "exact" for r in references) else "qmdp-fallback"
        report = optimality_gap(tasks, oracles, handles, cell_rng.split(1),
                                rollouts_per_task, reference=reference, jobs=jobs)
        rows.append({
            "setting": setting, "policy": policy_kind, "horizon": T,
            "obs_prob": q, "num_models": nm, "alpha": alpha,
            "num_tasks": report.num_tasks,
            "rollouts_per_task": rollouts_per_task,
            "reference": report.reference,
            "mean_gap": report.mean_gap,
            "ci_low": report.ci_low, "ci_high": report.ci_high,
            "degenerate_count": report.degenerate_count,
            "invalid_actions": report.invalid_actions,
        })
    return rows


def grid_rows_to_csv(rows: list[dict], path):
    with open(path, "w") as fh:
        fh.write(",".join(GRID_CSV_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in GRID_CSV_COLUMNS:
                val = row[col]
                if val is None:
                    cells.append("")
                elif isinstance(val, float):
                    cells.append(repr(val))
                else:
                    cells.append(str(val))
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# darkroom


DARKROOM_CSV_COLUMNS = ("goal_row", "goal_col", "policy", "mean_return",
                        "oracle_return", "rollouts")


def darkroom_eval(goals: list[tuple[int, int]], policy_kind: str, rng: Rng,
                  rollouts_per_goal: int = 5, size: int = 10, horizon: int = 100,
                  client: ExternalPolicyClient | None = None) -> dict:
    """Mean cumulative reward per goal (and overall) for one policy kind.

    The oracle's exact value ``horizon - distance(goal)`` is reported alongside
    for reference.  The interval is Student-t over per-goal means.
    """
    rows = []
    per_goal = []
    for i, goal in enumerate(goals):
        task = DarkroomTask(goal, size, horizon)
        if policy_kind == "oracle":
            handle = PolicyHandle.oracle(task)
        elif policy_kind == "random":
            handle = PolicyHandle.random()
        elif policy_kind == "external":
            if client is None:
                raise ValueError("external evaluation requires a client")
            handle = PolicyHandle.external(client)
        else:
            raise ValueError(f"unknown policy kind {policy_kind!r}")
        goal_rng = rng.split(i)
        returns = [rollout(task, handle, goal_rng.split(j),
                           task_id=f"darkroom_{goal[0]}_{goal[1]}").online_return
                   for j in range(rollouts_per_goal)]
        mean_return = float(np.mean(returns))
        per_goal.append(mean_return)
        rows.append({"goal_row": goal[0], "goal_col": goal[1],
                     "policy": policy_kind, "mean_return": mean_return,
                     "oracle_return": task.oracle_return(),
                     "rollouts": rollouts_per_goal})
    arr = np.array(per_goal)
    lo, hi = _t_interval(arr)
    return {"rows": rows, "mean_return": float(arr.mean()),
            "ci_low": lo, "ci_high": hi, "policy": policy_kind,
            "num_goals": len(goals)}


def darkroom_rows_to_csv(rows: list[dict], path):
    with open(path, "w") as fh:
        fh.write(",".join(DARKROOM_CSV_COLUMNS) + "\n")
        for row in rows:
            cells = [repr(row[c]) if isinstance(row[c], float) else str(row[c])
                     for c in DARKROOM_CSV_COLUMNS]
            fh.write(",".join(cells) + "\n")
