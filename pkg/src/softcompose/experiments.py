"""Experiment commands behind the ``softcompose`` CLI.

Every command takes an ``ExperimentConfig``, writes its artifacts into
``config.out`` and returns the report dictionary it also saves as
``report.json``. Reports embed the full config and contain no timestamps, so
identical configs give byte-identical outputs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .compose import (
    and_value_gap, and_policy_gap, check_weights, compose_and_average, compose_max, compose_or,
    compose_or_reward, renyi_half_rows,
)
from .gridworld import (
    GridSpec, GridTask, Item, TemporalAgent, _Sampler, build_library, build_mdp,
    collect_all_mdp, random_items,
)
from .mdp import deterministic_policy, two_state_mdp, uniform_policy
from .numerics import soft_max
from .render import render_trajectory, render_value_heatmap
from .serialize import (
    fmt, layout_from_dict, layout_to_dict, library_from_dict, library_to_dict, read_json,
    read_table_csv, write_json, write_table_csv,
)
from .solver import (
    SolverDivergenceError, boltzmann_policy, greedy_policy, policy_evaluation, solve,
    soft_q_learning, soft_value_iteration, standard_value_iteration,
)

RNG_ALGORITHM = "numpy.random.PCG64 seeded by SeedSequence([seed, ...])"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    tasks: list = field(default_factory=list)
    tau: float = 1.0
    weights: list | None = None
    mode: str = "or"
    episodes: int = 1000
    max_steps: int | None = None
    tol: float = 1e-10
    seed: int = 0
    layout: dict | None = None
    layout_seed: int = 0
    width: int = 10
    height: int = 10
    allow_disconnected: bool = False
    off_goal_reward: float = -10.0
    eval_task: str | None = None
    q_file: str | None = None
    library_dir: str | None = None
    policy: str = "auto"
    weight_step: float = 0.05
    runs: int = 80
    heatmaps: bool = True
    trajectories: int = 3
    learn: bool = False
    learn_episodes: int = 20000
    baseline: bool = False
    out: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if not (math.isfinite(self.tau) and self.tau >= 0):
            raise ConfigError("tau must be finite and nonnegative")
        if self.weights is not None:
            try:
                check_weights(self.weights)
            except ValueError as e:
                raise ConfigError(str(e)) from e
        if self.mode not in ("or", "max", "and"):
            raise ConfigError(f"mode must be or/max/and, got {self.mode!r}")
        if self.policy not in ("auto", "greedy", "boltzmann"):
            raise ConfigError(f"policy must be auto/greedy/boltzmann, got {self.policy!r}")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")

    def layout_objects(self) -> tuple[GridSpec, list[Item]]:
        if self.layout is not None:
            grid, items = layout_from_dict(self.layout)
        else:
            grid = GridSpec(self.width, self.height)
            items = random_items(grid, self.layout_seed)
        if not self.allow_disconnected and not grid.is_connected():
            raise ConfigError("layout interior is not connected")
        return grid, items

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def lib_dir(self) -> Path:
        return Path(self.library_dir) if self.library_dir else Path(self.out)


def _report(cfg: ExperimentConfig, command: str, **results) -> dict:
    rep = {
        "command": command,
        "config": cfg.to_dict(),
        "rng": RNG_ALGORITHM,
        "version": __version__,
    }
    rep.update(results)
    write_json(cfg.out_dir / "report.json", rep)
    return rep


def _library(cfg: ExperimentConfig, grid, items, tasks=None):
    tasks = [GridTask.parse(t) for t in (tasks or cfg.tasks)]
    if not tasks:
        raise ConfigError("config lists no tasks")
    return build_library(grid, items, tasks, cfg.tau, off_goal_reward=cfg.off_goal_reward,
                         require_connected=not cfg.allow_disconnected)


def _soft_values(q, ref, tau):
    return q.max(axis=1) if tau == 0 else soft_max(q, ref, tau)


def _pick_policy(cfg: ExperimentConfig, q, ref):
    kind = cfg.policy
    if kind == "auto":
        kind = "greedy" if cfg.tau == 0 else "boltzmann"
    if kind == "greedy":
        return greedy_policy(q)
    if cfg.tau == 0:
        raise ConfigError("Boltzmann evaluation needs tau > 0")
    return boltzmann_policy(q, ref, cfg.tau)


def _free_starts(grid: GridSpec, items) -> np.ndarray:
    occupied = {it.cell for it in items}
    return np.array([i for i, c in enumerate(grid.cells) if c not in occupied], dtype=np.int64)


def run_episodes(mdp, policy, starts, episodes: int, max_steps: int, seed, *key) -> list:
    """Episode ``i`` draws its start and actions from ``SeedSequence([seed, *key, i])``."""
    sampler = _Sampler(mdp, policy)
    out = []
    for i in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key), i]))
        start = int(starts[rng.integers(len(starts))])
        out.append(sampler.run(start, max_steps, rng))
    return out


def summarize(returns) -> dict:
    r = np.asarray(returns, dtype=float)
    q1, med, q3 = np.percentile(r, [25, 50, 75])
    return {"n": int(r.size), "median": float(med), "q1": float(q1), "q3": float(q3),
            "min": float(r.min()), "max": float(r.max()), "mean": float(r.mean())}


def _max_steps(cfg, grid):
    return cfg.max_steps if cfg.max_steps is not None else 4 * grid.width * grid.height


# -- commands -------------------------------------------------------------------

def cmd_solve(cfg: ExperimentConfig) -> dict:
    """Solve every base task of the library and write its tables."""
    grid, items = cfg.layout_objects()
    lib = _library(cfg, grid, items)
    out = cfg.out_dir
    layout = layout_to_dict(grid, items)
    write_json(out / "library.json", library_to_dict(lib, layout))
    solved = {}
    for k, name in enumerate(lib.names):
        mdp = lib.task_mdp(k)
        try:
            if cfg.learn:
                q = soft_q_learning(mdp, lib.reference, cfg.tau, cfg.learn_episodes,
                                    seed=int(np.random.SeedSequence([cfg.seed, k]).generate_state(1)[0]))
                v = _soft_values(q, lib.reference, cfg.tau)
                v[mdp.virtual_goal] = 0.0
                pi = _pick_policy(cfg, q, lib.reference)
                info = {"method": "soft_q_learning", "episodes": cfg.learn_episodes}
            else:
                res = solve(mdp, lib.reference, cfg.tau, cfg.tol)
                q, v, pi = res.q, res.value, res.policy
                info = {"method": "value_iteration", "iterations": res.iterations,
                        "residual": res.residual}
                write_json(out / f"solve_{name}.json", res.to_dict())
        except SolverDivergenceError as e:
            raise SolverDivergenceError(f"task {name}: {e}", e.last, e.residual, e.iterations) from e
        write_table_csv(out / f"q_{name}.csv", q)
        write_table_csv(out / f"v_{name}.csv", v)
        write_table_csv(out / f"policy_{name}.csv", pi)
        if cfg.heatmaps:
            render_value_heatmap(v, grid, out / f"v_{name}.pgm")
        solved[name] = info
    return _report(cfg, "solve", tasks=solved, n_states=lib.base.n_states)


def _load_library(cfg: ExperimentConfig):
    d = read_json(cfg.lib_dir / "library.json")
    lib = library_from_dict(d)
    grid, items = layout_from_dict(d["layout"])
    qs = [read_table_csv(cfg.lib_dir / f"q_{n}.csv") for n in lib.names]
    return lib, grid, items, qs


def cmd_compose(cfg: ExperimentConfig) -> dict:
    lib, grid, items, qs = _load_library(cfg)
    out = cfg.out_dir
    tau = lib.temperature
    results: dict = {"mode": cfg.mode, "tasks": list(lib.names), "temperature": tau}
    if cfg.mode == "or":
        if tau <= 0:
            raise ConfigError("or-composition needs a library solved at tau > 0")
        w = cfg.weights if cfg.weights is not None else [1.0 / len(qs)] * len(qs)
        w = check_weights(w, len(qs))
        q = compose_or(qs, w, tau)
        r = compose_or_reward(lib.task_rewards, w, tau, lib.base.absorbing)
        write_table_csv(out / "composite_reward.csv", r)
        results["weights"] = w.tolist()
    elif cfg.mode == "max":
        q = compose_max(qs)
    else:
        if len(qs) != 2:
            raise ConfigError("and-composition takes exactly two tasks")
        if tau <= 0:
            raise ConfigError("and-composition bounds need tau > 0")
        q = compose_and_average(qs)
        results["bounds"] = _and_bounds_files(lib, qs, q, tau, cfg.tol, out)
    write_table_csv(out / "composed_q.csv", q)
    if cfg.heatmaps:
        v = _soft_values(q, lib.reference, tau if cfg.mode != "max" else 0.0)
        render_value_heatmap(v, grid, out / "composed_v.pgm")
    return _report(cfg, "compose", **results)


def _and_bounds_files(lib, qs, q_ave, tau, tol, out: Path) -> dict:
    mdp = lib.base.with_rewards(0.5 * (lib.task_rewards[0] + lib.task_rewards[1]))
    ref = lib.reference
    pi1, pi2 = (boltzmann_policy(q, ref, tau) for q in qs)
    pi_ave = boltzmann_policy(q_ave, ref, tau)
    d = renyi_half_rows(pi1, pi2)
    d[mdp.virtual_goal] = 0.0
    write_table_csv(out / "and_divergence.csv", np.where(np.isfinite(d), d, 0.0))
    info = {"unbounded": bool(np.any(np.isinf(d[~mdp.terminal])))}
    try:
        c = and_value_gap(mdp, pi1, pi2, tau, tol)
    except SolverDivergenceError as e:
        info.update(value_gap_status="diverged", value_gap_message=str(e), policy_gap_status="unavailable")
        write_json(out / "and_bounds.json", info)
        return info
    info["value_gap_status"] = "converged"
    write_table_csv(out / "and_value_gap.csv", c)
    try:
        f = and_policy_gap(mdp, c, pi_ave, tau, tol)
        info["policy_gap_status"] = "converged"
        write_table_csv(out / "and_policy_gap.csv", f)
    except SolverDivergenceError as e:
        info.update(policy_gap_status="diverged", policy_gap_message=str(e))
    write_json(out / "and_bounds.json", info)
    return info


def cmd_eval(cfg: ExperimentConfig, q=None) -> dict:
    """Roll out a Q table's policy on ``eval_task`` from random item-free starts."""
    if q is None:
        lib, grid, items, _ = _load_library(cfg)
        path = Path(cfg.q_file) if cfg.q_file else cfg.lib_dir / "composed_q.csv"
        q = read_table_csv(path)
    else:
        grid, items = cfg.layout_objects()
    if not cfg.eval_task:
        raise ConfigError("eval needs eval_task")
    mdp = build_mdp(grid, items, GridTask.parse(cfg.eval_task))
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(f"Q table shape {q.shape} does not match the layout")
    ref = uniform_policy(mdp.n_states, mdp.n_actions)
    pi = _pick_policy(cfg, q, ref)
    starts = _free_starts(grid, items)
    eps = run_episodes(mdp, pi, starts, cfg.episodes, _max_steps(cfg, grid), cfg.seed)
    out = cfg.out_dir
    _write_returns(out / "returns.csv", eps)
    returns = [t.ret for t in eps]
    summary = summarize(returns)
    summary["terminal_fraction"] = float(np.mean([t.terminal for t in eps]))
    return _report(cfg, "eval", summary=summary)


def _write_returns(path: Path, eps: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "start", "return", "steps", "terminal"])
        for i, t in enumerate(eps):
            start = t.states[0] if t.states else t.final_state
            w.writerow([i, start, fmt(t.ret), len(t), int(t.terminal)])


def read_returns(path) -> list[float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [float(r["return"]) for r in csv.DictReader(fh)]


def weight_grid(step: float) -> np.ndarray:
    n = round(1.0 / step)
    if n < 1 or not math.isclose(n * step, 1.0, rel_tol=0, abs_tol=1e-12):
        raise ConfigError(f"weight step {step} does not divide 1")
    return np.array([k / n for k in range(n + 1)])


def cmd_sweep(cfg: ExperimentConfig) -> dict:
    """Vary the weight on the first of two tasks and count which object gets collected."""
    if len(cfg.tasks) != 2:
        raise ConfigError("sweep takes exactly two tasks")
    if cfg.tau <= 0:
        raise ConfigError("sweep composes with log-sum-exp and needs tau > 0")
    grid, items = cfg.layout_objects()
    lib = _library(cfg, grid, items)
    tau = lib.temperature
    qs = [solve(lib.task_mdp(k), lib.reference, tau, cfg.tol).q for k in range(2)]
    tasks = [GridTask.parse(t) for t in cfg.tasks]
    index = grid.index()
    goal_of = np.full(lib.base.n_states, -1)
    for k in (1, 0):
        for it in items:
            if tasks[k].matches(it):
                goal_of[index[it.cell]] = k
    starts = _free_starts(grid, items)
    max_steps = _max_steps(cfg, grid)
    out = cfg.out_dir
    rows = []
    n_eps = cfg.runs * cfg.episodes
    for wi, w in enumerate(weight_grid(cfg.weight_step)):
        weights = np.array([w, 1.0 - w])
        q = compose_or(qs, weights, tau)
        pi = _pick_policy(cfg, q, lib.reference)
        mdp = lib.base.with_rewards(compose_or_reward(lib.task_rewards, weights, tau,
                                                      lib.base.absorbing))
        eps = run_episodes(mdp, pi, starts, n_eps, max_steps, cfg.seed, wi)
        counts = np.zeros(2)
        for t in eps:
            if t.terminal and t.states:
                k = goal_of[t.states[-1]]
                if k >= 0:
                    counts[k] += 1
        rows.append((float(w), counts[0] / n_eps, counts[1] / n_eps))
        if cfg.heatmaps:
            render_value_heatmap(soft_max(q, lib.reference, tau), grid, out / f"sweep_w{w:.2f}.pgm")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["weight", "fraction_task1", "fraction_task2"])
        for w, f1, f2 in rows:
            wr.writerow([fmt(w), fmt(f1), fmt(f2)])
    ws = [r[0] for r in rows]
    f1 = [r[1] for r in rows]
    rho = float(stats.spearmanr(ws, f1).statistic) if np.ptp(f1) > 0 else float("nan")
    return _report(cfg, "sweep", spearman=None if math.isnan(rho) else rho,
                   episodes_per_weight=n_eps,
                   fractions=[{"weight": w, "task1": a, "task2": b} for w, a, b in rows])


def cmd_temporal(cfg: ExperimentConfig) -> dict:
    """Collect every item by greedy recomposition; optionally compare to the exact optimum.

    ``mode="or"`` composes with log-sum-exp at ``tau > 0``; at ``tau = 0`` and
    for any other mode the entrywise max is used.
    """
    grid, items = cfg.layout_objects()
    tau = cfg.tau
    mode = "or" if cfg.mode == "or" and tau > 0 else "max"
    agent = TemporalAgent(grid, items, tau, mode, cfg.tol)
    free = [grid.cells[i] for i in _free_starts(grid, items)]
    cap = grid.width * grid.height * len(items) if cfg.max_steps is None else cfg.max_steps
    out = cfg.out_dir
    baseline = None
    if cfg.baseline:
        full = collect_all_mdp(grid, items)
        baseline = standard_value_iteration(full, cfg.tol, stall_window=None).value
        full_mask = (1 << len(items)) - 1
    index = grid.index()
    rows = []
    for i in range(cfg.episodes):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        start = free[int(rng.integers(len(free)))]
        run = agent.run(start, int(rng.integers(2**63 - 1)), cap)
        opt = None
        if baseline is not None:
            opt = float(baseline[full_mask * grid.n_cells + index[start]])
        rows.append((i, start, run, opt))
        if i < cfg.trajectories:
            render_trajectory(run.trajectory, grid, out / f"temporal_{i}.ppm", tuple(items))
    with open(out / "returns.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["episode", "start_x", "start_y", "return", "steps", "collected", "complete",
                     "optimal_return"])
        for i, start, run, opt in rows:
            wr.writerow([i, start[0], start[1], fmt(run.trajectory.ret), len(run.trajectory),
                         len(run.collected), int(run.complete), "" if opt is None else fmt(opt)])
    returns = [r[2].trajectory.ret for r in rows]
    results = {
        "summary": summarize(returns),
        "complete_fraction": float(np.mean([r[2].complete for r in rows])),
        "max_steps_used": int(max(len(r[2].trajectory) for r in rows)),
        "step_cap": cap,
    }
    if baseline is not None:
        gaps = [r[3] - r[2].trajectory.ret for r in rows]
        results["baseline"] = {"summary": summarize([r[3] for r in rows]),
                               "min_gap": float(min(gaps)),
                               "fraction_not_above_optimum": float(np.mean([g >= -1e-9 for g in gaps]))}
    return _report(cfg, "temporal", **results)


def counterexample_values(tau: float) -> dict:
    if not tau > 0:
        raise ConfigError("the counterexample needs tau > 0")
    mdp = two_state_mdp()
    ref = uniform_policy(2, 2)
    eps = 0.5 * tau * (math.log(2) - 0.5) / (2 + tau)
    right = deterministic_policy([1, 1], 2)
    mixed = np.array([[eps, 1 - eps], [0.5, 0.5]])
    v_det = float(policy_evaluation(mdp, right, ref, tau)[0])
    v_eps = float(policy_evaluation(mdp, mixed, ref, tau)[0])
    v_star = float(soft_value_iteration(mdp, ref, tau, tol=1e-13).value[0])
    return {"tau": tau, "epsilon": eps, "epsilon_bound": tau * (math.log(2) - 0.5) / (2 + tau),
            "v_deterministic": v_det, "v_stochastic": v_eps, "v_optimal": v_star,
            "stochastic_better": v_eps > v_det}


class ClaimViolated(RuntimeError):
    """A checked inequality did not hold; the report is still written."""


def cmd_counterexample(cfg: ExperimentConfig) -> dict:
    vals = counterexample_values(cfg.tau)
    rep = _report(cfg, "counterexample", **vals)
    if not vals["stochastic_better"]:
        raise ClaimViolated(
            f"at tau={cfg.tau} the mixed policy (eps={vals['epsilon']:.6g}) scores "
            f"{vals['v_stochastic']:.10g}, not above {vals['v_deterministic']:.10g}")
    return rep


COMMANDS = {
    "solve": cmd_solve,
    "compose": cmd_compose,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "temporal": cmd_temporal,
    "counterexample": cmd_counterexample,
}
