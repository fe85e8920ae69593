import numpy as np
import pytest

from softcompose.compose import compose_max, compose_or
from softcompose.gridworld import (
    GridSpec, GridTask, Item, TemporalAgent, bfs_distances, build_library, build_mdp,
    collect_all_mdp, default_grid, random_grid, random_items, rollout, rollout_many,
    rollout_temporal, step,
)
from softcompose.solver import greedy_policy, soft_value_iteration, standard_value_iteration

CORRIDOR = GridSpec(4, 1)
FAR_ITEM = [Item("square", "blue", (3, 0))]


def corridor_mdp():
    return build_mdp(CORRIDOR, FAR_ITEM, GridTask.parse("Blue"))


@pytest.mark.parametrize("name,clauses", [
    ("Purple", (("purple", None),)),
    ("Square", ((None, "square"),)),
    ("BeigeSquare", (("beige", "square"),)),
    ("PurpleOrBlue", (("purple", None), ("blue", None))),
    ("BlueAndSquare", (("blue", "square"),)),
])
def test_task_parse(name, clauses):
    assert GridTask.parse(name).clauses == clauses


@pytest.mark.parametrize("bad", ["purple", "Green", "BlueBlue", ""])
def test_task_parse_rejects(bad):
    with pytest.raises(ValueError):
        GridTask.parse(bad)


def test_corridor_value_at_distance_three():
    res = standard_value_iteration(corridor_mdp(), stall_window=None)
    assert res.value[0] == pytest.approx(0.7)
    assert res.value[1] == pytest.approx(0.8)


def test_task_without_items_rejected():
    with pytest.raises(ValueError):
        build_mdp(CORRIDOR, FAR_ITEM, GridTask.parse("Purple"))


def test_purple_goal_set_on_six_item_layout():
    grid = default_grid()
    items = random_items(grid, 0)
    assert len(items) == 6
    mdp = build_mdp(grid, items, GridTask.parse("Purple"))
    assert int(mdp.absorbing.sum()) == 2


def test_step_conventions():
    mdp = corridor_mdp()
    assert step(mdp, 0, 3) == (0, -0.1, False)      # west into the boundary
    assert step(mdp, 0, 2) == (1, -0.1, False)      # east
    nxt, r, done = step(mdp, 3, 1)
    assert nxt == mdp.virtual_goal and r == 1.0 and done
    with pytest.raises(ValueError):
        step(mdp, 0, 4)


def test_rollout_corridor():
    mdp = corridor_mdp()
    pi = greedy_policy(standard_value_iteration(mdp, stall_window=None).q)
    traj = rollout(mdp, pi, 1, 100, seed=0)
    assert len(traj) == 3 and traj.terminal
    assert traj.ret == pytest.approx(0.8)
    empty = rollout(mdp, pi, 1, 0, seed=0)
    assert len(empty) == 0 and empty.ret == 0.0 and not empty.terminal


def test_rollout_deterministic_given_seed():
    grid = default_grid()
    items = random_items(grid, 3)
    mdp = build_mdp(grid, items, GridTask.parse("Blue"))
    pi = np.full((mdp.n_states, mdp.n_actions), 0.25)
    a = rollout_many(mdp, pi, [0, 5, 9], 50, base_seed=11)
    b = rollout_many(mdp, pi, [0, 5, 9], 50, base_seed=11)
    assert a == b
    assert rollout(mdp, pi, 0, 50, 1) != rollout(mdp, pi, 0, 50, 2)


def test_returns_match_bfs_distances():
    grid = random_grid(8, 8, 4)
    items = random_items(grid, 4)
    task = GridTask.parse("PurpleOrBlue")
    mdp = build_mdp(grid, items, task)
    pi = greedy_policy(standard_value_iteration(mdp, stall_window=None).q)
    dist = bfs_distances(grid, [it.cell for it in items if task.matches(it)])
    index = grid.index()
    for cell in grid.cells[::5]:
        traj = rollout(mdp, pi, index[cell], 500, 0)
        assert traj.ret == pytest.approx(1 - 0.1 * dist[cell])


def test_random_grid_connected_and_seeded():
    for seed in range(5):
        g = random_grid(7, 6, seed)
        assert g.is_connected()
        assert g == random_grid(7, 6, seed)


def test_library_shares_absorbing_set():
    grid = default_grid()
    items = random_items(grid, 1)
    lib = build_library(grid, items, [GridTask.parse("Purple"), GridTask.parse("Blue")], 1.0)
    assert int(lib.base.absorbing.sum()) == 4
    r0, r1 = lib.task_rewards
    diff = np.any(r0 != r1, axis=1)
    assert np.array_equal(diff, lib.base.absorbing)


def test_composed_value_peaks_at_targets():
    grid = default_grid()
    items = random_items(grid, 2)
    lib = build_library(grid, items, [GridTask.parse("Purple"), GridTask.parse("Blue")], 1.0)
    qs = [soft_value_iteration(lib.task_mdp(k), lib.reference, 1.0).q for k in range(2)]
    v = compose_or(qs, [0.5, 0.5], 1.0).max(axis=1)
    index = grid.index()
    for it in items:
        if it.color in ("purple", "blue"):
            c = index[it.cell]
            for a in range(4):
                n = index[grid.move(it.cell, a)]
                assert v[c] >= v[n]


def test_temporal_single_item_matches_rollout():
    items = [Item("circle", "beige", (3, 0))]
    run = rollout_temporal(CORRIDOR, items, 0.0, (0, 0), seed=0)
    mdp = build_mdp(CORRIDOR, items, GridTask.exact(items[0]))
    pi = greedy_policy(standard_value_iteration(mdp, stall_window=None).q)
    traj = rollout(mdp, pi, 0, 100, 0)
    assert run.complete and run.trajectory.rewards == traj.rewards


def test_temporal_nearest_first():
    grid = GridSpec(5, 1)
    items = [Item("square", "blue", (3, 0)), Item("circle", "purple", (1, 0)),
             Item("square", "beige", (2, 0))]
    run = rollout_temporal(grid, items, 0.0, (0, 0), seed=0)
    assert [it.cell for it in run.collected] == [(1, 0), (2, 0), (3, 0)]


def test_temporal_six_items_complete():
    grid = default_grid()
    items = random_items(grid, 0)
    agent = TemporalAgent(grid, items)
    for seed in range(5):
        run = agent.run((0, 0) if (0, 0) not in {i.cell for i in items} else (9, 9), seed)
        assert run.complete and len(run.collected) == 6
        assert len(run.trajectory) <= grid.width * grid.height * 6


def test_collect_all_baseline_bounds_greedy():
    grid = GridSpec(5, 4)
    items = random_items(grid, 5, kinds=[("square", "blue"), ("circle", "purple"),
                                         ("square", "beige")])
    full = collect_all_mdp(grid, items)
    v = standard_value_iteration(full, stall_window=None).value
    agent = TemporalAgent(grid, items)
    index = grid.index()
    occupied = {it.cell for it in items}
    for cell in grid.cells:
        if cell in occupied:
            continue
        run = agent.run(cell, 0)
        assert run.trajectory.ret <= v[7 * grid.n_cells + index[cell]] + 1e-9


def test_max_composition_equals_union_solve():
    grid = random_grid(6, 6, 2)
    items = random_items(grid, 2)
    lib = build_library(grid, items, [GridTask.parse("Purple"), GridTask.parse("Blue")], 0.0)
    qs = [standard_value_iteration(lib.task_mdp(k), stall_window=None).q for k in range(2)]
    union = lib.base.with_rewards(np.maximum(*lib.task_rewards))
    direct = standard_value_iteration(union, stall_window=None).q
    assert np.max(np.abs(compose_max(qs) - direct)) < 1e-6
