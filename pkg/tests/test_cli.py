import csv
import json

import numpy as np
import pytest

from softcompose.cli import main
from softcompose.experiments import ExperimentConfig, read_returns, summarize, weight_grid
from softcompose.gridworld import GridTask, bfs_distances, build_library
from softcompose.serialize import layout_from_dict, read_json, read_table_csv, write_table_csv
from softcompose.solver import standard_value_iteration


def run(tmp_path, command, cfg, *extra):
    path = tmp_path / f"{command}-{len(list(tmp_path.iterdir()))}.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *extra])


@pytest.fixture
def library(tmp_path):
    out = tmp_path / "lib"
    assert run(tmp_path, "solve", {"tasks": ["Purple", "Blue"], "tau": 1.0, "out": str(out)}) == 0
    return out


@pytest.fixture
def hard_library(tmp_path):
    out = tmp_path / "lib0"
    assert run(tmp_path, "solve", {"tasks": ["Purple", "Blue"], "tau": 0.0, "out": str(out)}) == 0
    return out


def test_solve_writes_tables(library):
    for name in ("Purple", "Blue"):
        for kind in ("q", "v", "policy"):
            assert (library / f"{kind}_{name}.csv").exists()
    rep = read_json(library / "report.json")
    assert rep["config"]["tasks"] == ["Purple", "Blue"] and "rng" in rep


def test_solve_divergence_exit_code(tmp_path, capsys):
    cfg = {"tasks": ["Blue"], "allow_disconnected": True, "out": str(tmp_path / "d"),
           "layout": {"width": 3, "height": 1, "walls": [[1, 0]],
                      "items": [{"shape": "square", "color": "blue", "cell": [2, 0]}]}}
    assert run(tmp_path, "solve", cfg) == 3
    assert "Blue" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [
    {"tasks": ["Blue"], "episodes": 0},
    {"tasks": ["Blue"], "weights": [0.3, 0.3]},
    {"tasks": ["Blue"], "bogus": 1},
    {"tasks": ["Green"]},
    {"tasks": []},
])
def test_validation_exit_code(tmp_path, cfg):
    cfg["out"] = str(tmp_path / "v")
    assert run(tmp_path, "solve", cfg) == 2


def test_counterexample(tmp_path):
    assert main(["counterexample", "--tau", "1", "--out", str(tmp_path / "c")]) == 0
    rep = read_json(tmp_path / "c" / "report.json")
    assert rep["v_deterministic"] == pytest.approx(-1 - np.log(2), abs=1e-10)
    assert rep["v_optimal"] == pytest.approx(-np.log(2 * np.e - 1), abs=1e-9)
    assert rep["v_stochastic"] > rep["v_deterministic"]
    assert main(["counterexample", "--tau", "0", "--out", str(tmp_path / "z")]) == 2


def test_compose_one_hot_copies(tmp_path, library):
    out = tmp_path / "c"
    cfg = {"library_dir": str(library), "mode": "or", "weights": [0.0, 1.0], "out": str(out)}
    assert run(tmp_path, "compose", cfg) == 0
    assert np.array_equal(read_table_csv(out / "composed_q.csv"),
                          read_table_csv(library / "q_Blue.csv"))
    assert (out / "composite_reward.csv").exists()


def test_compose_weight_length_mismatch(tmp_path, library):
    cfg = {"library_dir": str(library), "mode": "or", "weights": [0.2, 0.3, 0.5],
           "out": str(tmp_path / "c")}
    assert run(tmp_path, "compose", cfg) == 2


def test_compose_max_matches_union_solve(tmp_path, hard_library):
    out = tmp_path / "m"
    assert run(tmp_path, "compose", {"library_dir": str(hard_library), "mode": "max",
                                     "out": str(out)}) == 0
    d = read_json(hard_library / "library.json")
    grid, items = layout_from_dict(d["layout"])
    lib = build_library(grid, items, [GridTask.parse("Purple"), GridTask.parse("Blue")], 0.0)
    union = lib.base.with_rewards(np.maximum(*lib.task_rewards))
    direct = standard_value_iteration(union, stall_window=None).q
    assert np.max(np.abs(read_table_csv(out / "composed_q.csv") - direct)) < 1e-6


def test_compose_and_writes_bounds(tmp_path):
    lib = tmp_path / "bs"
    assert run(tmp_path, "solve", {"tasks": ["Blue", "Square"], "tau": 0.5, "out": str(lib)}) == 0
    out = tmp_path / "a"
    assert run(tmp_path, "compose", {"library_dir": str(lib), "mode": "and", "out": str(out)}) == 0
    assert (out / "and_bounds.json").exists() and (out / "and_divergence.csv").exists()


def test_eval_returns_match_distances(tmp_path, hard_library):
    comp = tmp_path / "m"
    run(tmp_path, "compose", {"library_dir": str(hard_library), "mode": "max", "out": str(comp)})
    out = tmp_path / "e"
    cfg = {"library_dir": str(hard_library), "q_file": str(comp / "composed_q.csv"),
           "eval_task": "PurpleOrBlue", "policy": "greedy", "episodes": 200, "out": str(out)}
    assert run(tmp_path, "eval", cfg) == 0
    grid, items = layout_from_dict(read_json(hard_library / "library.json")["layout"])
    task = GridTask.parse("PurpleOrBlue")
    dist = bfs_distances(grid, [it.cell for it in items if task.matches(it)])
    with open(out / "returns.csv") as fh:
        for row in csv.DictReader(fh):
            cell = grid.cells[int(row["start"])]
            assert float(row["return"]) == pytest.approx(1 - 0.1 * dist[cell])
    rep = read_json(out / "report.json")
    assert rep["summary"] == {**summarize(read_returns(out / "returns.csv")),
                              "terminal_fraction": 1.0}

    rand_q = tmp_path / "zero.csv"
    q = read_table_csv(comp / "composed_q.csv")
    write_table_csv(rand_q, np.zeros_like(q))
    out2 = tmp_path / "r"
    cfg.update(q_file=str(rand_q), policy="boltzmann", tau=1.0, out=str(out2))
    assert run(tmp_path, "eval", cfg) == 0
    assert read_json(out2 / "report.json")["summary"]["median"] < rep["summary"]["median"]


def test_learn_flag(tmp_path):
    out = tmp_path / "l"
    cfg = {"tasks": ["Blue"], "tau": 1.0, "out": str(out), "learn_episodes": 200,
           "layout": {"width": 4, "height": 1, "walls": [],
                      "items": [{"shape": "square", "color": "blue", "cell": [3, 0]}]}}
    assert run(tmp_path, "solve", cfg, "--learn") == 0
    assert read_json(out / "report.json")["tasks"]["Blue"]["method"] == "soft_q_learning"


def test_sweep_small(tmp_path):
    out = tmp_path / "s"
    cfg = {"tasks": ["BeigeSquare", "PurpleCircle"], "tau": 1.0, "weight_step": 0.25,
           "runs": 2, "episodes": 20, "out": str(out)}
    assert run(tmp_path, "sweep", cfg) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "weight,fraction_task1,fraction_task2" and len(lines) == 6
    assert (out / "sweep_w0.50.pgm").exists()
    assert run(tmp_path, "sweep", {**cfg, "tasks": ["Blue", "Purple", "Beige"]}) == 2


@pytest.mark.parametrize("step,n", [(0.05, 21), (0.25, 5), (1.0, 2)])
def test_weight_grid(step, n):
    g = weight_grid(step)
    assert len(g) == n and g[0] == 0.0 and g[-1] == 1.0


def test_weight_grid_rejects_non_divisor():
    with pytest.raises(ValueError):
        weight_grid(0.3)


def test_temporal_with_baseline(tmp_path):
    out = tmp_path / "t"
    cfg = {"tau": 0.0, "episodes": 20, "width": 5, "height": 5, "out": str(out)}
    assert run(tmp_path, "temporal", cfg, "--baseline") == 0
    rep = read_json(out / "report.json")
    assert rep["complete_fraction"] == 1.0
    assert rep["baseline"]["fraction_not_above_optimum"] == 1.0
    assert (out / "temporal_0.ppm").exists()


def test_config_defaults():
    cfg = ExperimentConfig.from_dict({"tasks": ["Blue"]})
    assert cfg.episodes == 1000 and cfg.weight_step == 0.05 and cfg.runs == 80


def test_counterexample_reports_violation(tmp_path):
    # The prescribed epsilon is too large at small temperatures; see test_solver.
    assert main(["counterexample", "--tau", "0.1", "--out", str(tmp_path / "c")]) == 1
    assert read_json(tmp_path / "c" / "report.json")["stochastic_better"] is False
