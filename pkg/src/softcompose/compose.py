"""Composing library Q-functions.

``compose_or`` is the weighted log-sum-exp of library Q tables, optimal for
the task whose absorbing-set rewards are the same log-sum-exp of the library
rewards. ``compose_max`` is its zero-temperature limit. ``compose_and_average``
approximates the intersection of two tasks, with the bound tables computed by
``and_value_gap`` and ``and_policy_gap``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import InvalidMdpError, TabularMdp, TaskLibrary, Violation, check_policy
from .numerics import weighted_logsumexp
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, _check_tau, _iterate

WEIGHT_TOL = 1e-12
OVERFLOW_LIMIT = 700.0


def check_weights(weights, n: int | None = None) -> np.ndarray:
    """Validate a nonnegative weight vector with unit 1-norm."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty 1-d sequence")
    if n is not None and w.size != n:
        raise ValueError(f"expected {n} weights, got {w.size}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if abs(w.sum() - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    return w


def _stack(tables, what="Q tables"):
    if len(tables) == 0:
        raise ValueError(f"need at least one of {what}")
    arrs = [np.asarray(t, dtype=float) for t in tables]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError(f"{what} differ in shape")
    return np.stack(arrs)


def desirability(q, tau: float) -> np.ndarray:
    """``exp(Q / tau)``; raises when that would overflow."""
    tau = _check_tau(tau)
    scaled = np.asarray(q, dtype=float) / tau
    if np.any(scaled > OVERFLOW_LIMIT):
        raise OverflowError(
            f"Q / tau reaches {scaled.max():.1f}; rescale rewards or raise the temperature"
        )
    return np.exp(scaled)


def compose_or(q_list, weights, tau: float) -> np.ndarray:
    """``tau * log sum_k w_k exp(Q_k / tau)`` entrywise."""
    tau = _check_tau(tau)
    qs = _stack(q_list)
    w = check_weights(weights, qs.shape[0])
    return tau * weighted_logsumexp(qs / tau, w.reshape(-1, *([1] * (qs.ndim - 1))), axis=0)


def compose_or_reward(r_list, weights, tau: float, absorbing) -> np.ndarray:
    """Reward table of the task that ``compose_or`` solves.

    On absorbing states the rewards are combined with the same weighted
    log-sum-exp; elsewhere the (shared) library rewards are copied.
    """
    tau = _check_tau(tau)
    rs = _stack(r_list, "reward tables")
    w = check_weights(weights, rs.shape[0])
    absorbing = np.asarray(absorbing, dtype=bool)
    off = ~absorbing
    bad = np.argwhere(np.any(rs[:, off] != rs[0, off], axis=0))
    if bad.size:
        states = np.flatnonzero(off)[bad[:, 0]]
        raise InvalidMdpError([
            Violation("off-absorbing-reward", int(s), int(a),
                      "library rewards differ outside the absorbing set")
            for s, a in zip(states[:5], bad[:5, 1])
        ])
    out = rs[0].copy()
    if absorbing.any():
        out[absorbing] = tau * weighted_logsumexp(rs[:, absorbing] / tau,
                                                  w.reshape(-1, 1, 1), axis=0)
    return out


def compose_max(q_list) -> np.ndarray:
    return _stack(q_list).max(axis=0)


def compose_and_average(q_list) -> np.ndarray:
    if len(q_list) != 2:
        raise ValueError(f"AND-composition takes exactly two tables, got {len(q_list)}")
    qs = _stack(q_list)
    return 0.5 * (qs[0] + qs[1])


def renyi_half(p, q) -> float:
    """Renyi divergence of order 1/2, ``-2 log sum sqrt(p q)``; ``inf`` for disjoint supports."""
    bc = float(np.sum(np.sqrt(np.asarray(p, dtype=float) * np.asarray(q, dtype=float))))
    if bc <= 0.0:
        return math.inf
    return max(-2.0 * math.log(min(bc, 1.0)), 0.0)


def renyi_half_rows(p, q) -> np.ndarray:
    bc = np.sum(np.sqrt(np.asarray(p, dtype=float) * np.asarray(q, dtype=float)), axis=-1)
    with np.errstate(divide="ignore"):
        return np.maximum(-2.0 * np.log(np.minimum(bc, 1.0)), 0.0)


@dataclass(frozen=True, eq=False)
class AndBounds:
    """Error tables for the averaged composition.

    ``q_ave - value_gap <= q_opt <= q_ave`` and ``q_{pi_ave} >= q_opt - policy_gap``,
    where ``q_opt`` solves the task with the averaged reward.
    ``unbounded`` is set when the two policies have disjoint support somewhere,
    which makes the bound vacuous (infinite entries in ``value_gap``).
    """

    value_gap: np.ndarray
    policy_gap: np.ndarray
    divergence: np.ndarray
    unbounded: bool


def _state_divergence(mdp: TabularMdp, pi1, pi2) -> np.ndarray:
    d = renyi_half_rows(pi1, pi2)
    d[mdp.virtual_goal] = 0.0
    return d


def _pin_terminal(mdp: TabularMdp, table: np.ndarray) -> np.ndarray:
    table[mdp.terminal] = 0.0
    return table


def and_value_gap(mdp: TabularMdp, pi1, pi2, tau: float, tol: float = DEFAULT_TOL,
                  max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Fixed point of ``gap <- tau * E_{s'}[div(s') + max_a' gap(s', a')]`` from zero.

    ``div(s')`` is the order-1/2 Renyi divergence between the two policies at
    ``s'``. Rows of absorbing states and the virtual goal are held at zero.
    """
    tau = _check_tau(tau)
    shape = (mdp.n_states, mdp.n_actions)
    div = _state_divergence(mdp, check_policy(pi1, shape), check_policy(pi2, shape))

    def update(gap):
        nxt = div + gap.max(axis=1)
        with np.errstate(invalid="ignore"):
            new = tau * mdp.expected_next(nxt)
        return _pin_terminal(mdp, new)

    gap, _, _ = _iterate(update, np.zeros(shape), tol, max_iter, "AND value-gap bound")
    return gap


def and_policy_gap(mdp: TabularMdp, value_gap, pi_ave, tau: float, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Fixed point of ``pg <- tau * E_{s'}[E_{a' ~ pi_ave}[value_gap - pg](s', a')]`` from zero."""
    tau = _check_tau(tau)
    shape = (mdp.n_states, mdp.n_actions)
    pi = check_policy(pi_ave, shape)
    vg = np.asarray(value_gap, dtype=float)
    if vg.shape != shape:
        raise ValueError(f"value_gap shape {vg.shape} does not match {shape}")

    def update(pg):
        nxt = np.sum(np.where(pi > 0, pi * (vg - pg), 0.0), axis=1)
        with np.errstate(invalid="ignore"):
            new = tau * mdp.expected_next(nxt)
        return _pin_terminal(mdp, new)

    pg, _, _ = _iterate(update, np.zeros(shape), tol, max_iter, "AND policy-gap bound")
    return pg


def and_bounds(mdp: TabularMdp, pi1, pi2, pi_ave, tau: float, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER) -> AndBounds:
    shape = (mdp.n_states, mdp.n_actions)
    div = _state_divergence(mdp, check_policy(pi1, shape), check_policy(pi2, shape))
    vg = and_value_gap(mdp, pi1, pi2, tau, tol, max_iter)
    unbounded = bool(np.any(np.isinf(vg)))
    if unbounded:
        pg = _pin_terminal(mdp, np.full(shape, np.inf))
    else:
        pg = and_policy_gap(mdp, vg, pi_ave, tau, tol, max_iter)
    return AndBounds(vg, pg, div, unbounded)


def desirability_residual(library: TaskLibrary, composite_rewards, z) -> float:
    """Sup-norm distance between ``z`` and its image under the linear desirability backup.

    The backup maps ``z`` to ``exp(r(s, a) / tau) * sum_a' ref(a' | s') z(s', a')``
    where ``s'`` is the successor of ``(s, a)`` and the virtual goal counts as
    desirability 1. The virtual goal row is excluded.
    """
    base = library.base
    tau = _check_tau(library.temperature)
    z = np.asarray(z, dtype=float)
    shape = (base.n_states, base.n_actions)
    if z.shape != shape:
        raise ValueError(f"z shape {z.shape} does not match {shape}")
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise ValueError("desirability entries must be positive and finite")
    r = np.asarray(composite_rewards, dtype=float)
    if r.shape != shape:
        raise ValueError(f"reward shape {r.shape} does not match {shape}")
    z_state = np.sum(library.reference * z, axis=1)
    z_state[base.virtual_goal] = 1.0
    backed = desirability(r, tau) * z_state[base.next_state]
    keep = np.arange(base.n_states) != base.virtual_goal
    return float(np.max(np.abs(backed - z)[keep]))
