import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softcompose.compose import (
    and_bounds, check_weights, compose_and_average, compose_max, compose_or, compose_or_reward,
    desirability, desirability_residual, renyi_half, renyi_half_rows,
)
from softcompose.mdp import InvalidMdpError, build_composite_reward_mdp
from softcompose.solver import SolverDivergenceError, boltzmann_policy, soft_value_iteration

from conftest import seeded_library


def _solve_lib(lib):
    return [soft_value_iteration(lib.task_mdp(k), lib.reference, lib.temperature).q
            for k in range(len(lib))]


def test_or_composition_is_optimal():
    _, _, lib = seeded_library(0, tau=0.5, size=6)
    qs = _solve_lib(lib)
    w = np.array([0.3, 0.7])
    r = compose_or_reward(lib.task_rewards, w, 0.5, lib.base.absorbing)
    direct = soft_value_iteration(build_composite_reward_mdp(lib, r), lib.reference, 0.5).q
    assert np.max(np.abs(compose_or(qs, w, 0.5) - direct)) < 1e-6


def test_one_hot_weights_copy_table():
    _, _, lib = seeded_library(1, size=5)
    qs = _solve_lib(lib)
    assert np.array_equal(compose_or(qs, [0.0, 1.0], 1.0), qs[1])
    assert np.array_equal(compose_or(qs, [1.0, 0.0], 1.0), qs[0])


def test_or_order_invariant():
    rng = np.random.default_rng(0)
    qs = [rng.normal(size=(5, 4)) for _ in range(3)]
    w = np.array([0.2, 0.5, 0.3])
    a = compose_or(qs, w, 0.7)
    b = compose_or(qs[::-1], w[::-1], 0.7)
    assert np.allclose(a, b, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 0.1, 0.01]))
def test_or_close_to_max(seed, tau):
    rng = np.random.default_rng(seed)
    qs = [rng.normal(scale=5, size=(6, 4)) for _ in range(3)]
    w = rng.dirichlet(np.ones(3))
    gap = np.abs(compose_or(qs, w, tau) - compose_max(qs))
    assert np.all(gap <= tau * math.log(1 / w.min()) + 1e-12)


def test_or_stable_at_large_values():
    qs = [np.full((2, 2), 1e4), np.full((2, 2), -1e4)]
    out = compose_or(qs, [0.5, 0.5], 1e-2)
    assert np.allclose(out, 1e4 + 1e-2 * math.log(0.5))


@pytest.mark.parametrize("w,n", [([0.5, 0.4], 2), ([1.2, -0.2], 2), ([0.5, 0.5], 3)])
def test_bad_weights(w, n):
    with pytest.raises(ValueError):
        check_weights(w, n)


def test_or_reward_requires_shared_non_absorbing_rewards():
    r1 = np.zeros((3, 2))
    r2 = np.zeros((3, 2))
    r2[0, 0] = 1.0
    with pytest.raises(InvalidMdpError):
        compose_or_reward([r1, r2], [0.5, 0.5], 1.0, np.array([False, True, False]))


def test_or_reward_on_absorbing_set():
    r1 = np.array([[-0.1, -0.1], [1.0, 1.0]])
    r2 = np.array([[-0.1, -0.1], [-10.0, -10.0]])
    r = compose_or_reward([r1, r2], [0.5, 0.5], 1.0, np.array([False, True]))
    assert r[0, 0] == -0.1
    assert r[1, 0] == pytest.approx(math.log(0.5 * math.e + 0.5 * math.exp(-10)))


def test_desirability_overflow():
    with pytest.raises(OverflowError):
        desirability(np.array([1000.0]), 1.0)
    assert desirability(np.array([0.0]), 1.0)[0] == 1.0


def test_desirability_fixed_point():
    _, _, lib = seeded_library(2, tau=0.5, size=5)
    qs = _solve_lib(lib)
    w = np.full(len(qs), 1.0 / len(qs))
    r = compose_or_reward(lib.task_rewards, w, 0.5, lib.base.absorbing)
    for k, q in enumerate(qs):
        assert desirability_residual(lib, lib.task_rewards[k], desirability(q, 0.5)) < 1e-8
    z = desirability(compose_or(qs, w, 0.5), 0.5)
    assert desirability_residual(lib, r, z) < 1e-8


def test_and_average():
    a, b = np.ones((2, 2)), np.zeros((2, 2))
    assert np.array_equal(compose_and_average([a, b]), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        compose_and_average([a, b, a])


@pytest.mark.parametrize("p,q,expected", [
    ([0.5, 0.5], [0.5, 0.5], 0.0),
    ([1.0, 0.0], [0.5, 0.5], -2 * math.log(math.sqrt(0.5))),
    ([1.0, 0.0], [0.0, 1.0], math.inf),
])
def test_renyi_half(p, q, expected):
    assert renyi_half(p, q) == pytest.approx(expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_renyi_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(4), 2)
    assert renyi_half(p, q) >= -1e-15
    assert renyi_half(p, q) == pytest.approx(renyi_half(q, p))
    assert renyi_half_rows(p[None], q[None])[0] == pytest.approx(renyi_half(p, q))


def test_and_upper_bound_holds():
    """The averaged table never underestimates the intersection optimum."""
    from softcompose.gridworld import GridTask, build_library, random_grid, random_items

    grid = random_grid(5, 5, 0)
    items = random_items(grid, 0)
    tasks = [GridTask.parse("Blue"), GridTask.parse("Square"), GridTask.parse("BlueSquare")]
    lib = build_library(grid, items, tasks, 0.5)
    qs = _solve_lib(lib)
    q_ave = compose_and_average(qs[:2])
    # The intersection task shares the absorbing set and its reward is at most the mean of the two.
    assert np.all(lib.task_rewards[2] <= 0.5 * (lib.task_rewards[0] + lib.task_rewards[1]) + 1e-12)
    assert np.all(q_ave >= qs[2] - 1e-9)


def _and_inputs(tau):
    _, _, lib = seeded_library(0, tau=tau, size=4)
    qs = _solve_lib(lib)
    mdp = lib.base.with_rewards(0.5 * (lib.task_rewards[0] + lib.task_rewards[1]))
    pis = [boltzmann_policy(q, lib.reference, tau) for q in qs[:2]]
    pi_ave = boltzmann_policy(compose_and_average(qs[:2]), lib.reference, tau)
    return mdp, pis, pi_ave


def test_and_bounds_converge_at_low_temperature():
    mdp, pis, pi_ave = _and_inputs(0.5)
    b = and_bounds(mdp, pis[0], pis[1], pi_ave, 0.5)
    assert b.divergence.shape == (mdp.n_states,)
    assert not b.unbounded
    assert np.all(b.value_gap >= -1e-12)
    assert np.all(b.value_gap[mdp.terminal] == 0.0)


def test_and_value_gap_diverges_at_unit_temperature():
    """On a cyclic grid the C recursion at tau = 1 has no contraction."""
    mdp, pis, pi_ave = _and_inputs(1.0)
    with pytest.raises(SolverDivergenceError):
        and_bounds(mdp, pis[0], pis[1], pi_ave, 1.0)
