"""Entropy-regularised dynamic programming for total-reward MDPs.

All backups are Jacobi sweeps over the previous iterate. The value of the
virtual goal is pinned to zero throughout.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mdp import TabularMdp, check_policy, is_proper, kl_rows
from .numerics import soft_max, softmax_weights

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
STALL_WINDOW = 100
EXACT_EVAL_MAX_STATES = 2000
# Properness gate used before policy evaluation; matrix powers make a long
# horizon cheap, and any proper policy on a finite MDP decays geometrically.
PROPER_GATE_HORIZON = 1 << 20


class SolverDivergenceError(RuntimeError):
    """A fixed-point iteration failed to converge.

    Attributes:
        last: the last iterate.
        residual: sup-norm of the last update.
        iterations: number of sweeps performed.
    """

    def __init__(self, message, last=None, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.last = last
        self.residual = residual
        self.iterations = iterations


class ImproperPolicyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SolveResult:
    value: np.ndarray
    q: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float

    def to_dict(self) -> dict:
        return {
            "value": self.value.tolist(),
            "q": self.q.tolist(),
            "policy": self.policy.tolist(),
            "iterations": int(self.iterations),
            "residual": float(self.residual),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SolveResult":
        return cls(np.asarray(d["value"], dtype=float), np.asarray(d["q"], dtype=float),
                   np.asarray(d["policy"], dtype=float), int(d["iterations"]),
                   float(d["residual"]))


def _check_tau(tau: float, allow_zero=False) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau < 0:
        raise ValueError(f"temperature must be finite and nonnegative, got {tau}")
    if tau == 0 and not allow_zero:
        raise ValueError("temperature must be positive here; use the standard (max) backup for tau = 0")
    return tau


def _check_values(mdp: TabularMdp, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"value table shape {v.shape} does not match ({mdp.n_states},)")
    return v


def q_from_v(mdp: TabularMdp, v) -> np.ndarray:
    """``Q(s, a) = r(s, a) + E[V(s')]`` with ``V(g) = 0``."""
    v = _check_values(mdp, v).copy()
    v[mdp.virtual_goal] = 0.0
    return mdp.rewards + mdp.expected_next(v)


def _pin(mdp, v):
    v[mdp.virtual_goal] = 0.0
    return v


def bellman_policy_op(mdp: TabularMdp, pi, ref, tau: float, v) -> np.ndarray:
    """Expected Q under ``pi`` minus ``tau * KL(pi_s || ref_s)``."""
    tau = _check_tau(tau, allow_zero=True)
    shape = (mdp.n_states, mdp.n_actions)
    pi = check_policy(pi, shape)
    q = q_from_v(mdp, v)
    out = np.sum(np.where(pi > 0, pi * q, 0.0), axis=1)
    if tau > 0:
        out -= tau * kl_rows(pi, check_policy(ref, shape))
    return _pin(mdp, out)


def soft_bellman_op(mdp: TabularMdp, ref, tau: float, v) -> np.ndarray:
    """Soft (log-sum-exp) backup weighted by the reference policy."""
    tau = _check_tau(tau)
    return _pin(mdp, soft_max(q_from_v(mdp, v), ref, tau))


def standard_bellman_op(mdp: TabularMdp, v) -> np.ndarray:
    return _pin(mdp, q_from_v(mdp, v).max(axis=1))


def boltzmann_policy(q, ref, tau: float) -> np.ndarray:
    """Policy proportional to ``ref * exp(Q / tau)``."""
    tau = _check_tau(tau)
    return softmax_weights(q, ref, tau)


def greedy_policy(q, atol: float = 1e-9) -> np.ndarray:
    """Deterministic argmax policy; near-ties within ``atol`` go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    best = q >= q.max(axis=1, keepdims=True) - atol
    actions = np.argmax(best, axis=1)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), actions] = 1.0
    return pi


def _iterate(update: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, tol: float,
             max_iter: int, what: str, stall_window: int | None = STALL_WINDOW):
    """Run ``x <- update(x)`` until the sup-norm change drops below ``tol``.

    Raises SolverDivergenceError when the budget runs out or when the residual
    has not shrunk over the last ``stall_window`` sweeps (``None`` disables
    the stall check).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.array(x0, dtype=float)
    history: deque = deque(maxlen=stall_window or 1)
    residual = np.inf
    for it in range(1, max_iter + 1):
        new = update(x)
        both = np.isfinite(new) & np.isfinite(x)
        if np.any(np.isnan(new)):
            raise SolverDivergenceError(f"{what}: NaN encountered", x, residual, it)
        same_inf = (~both) & (new == x)
        diff = np.where(both, np.abs(new - x), np.where(same_inf, 0.0, np.inf))
        residual = float(diff.max()) if diff.size else 0.0
        x = new
        if residual < tol:
            return x, it, residual
        if stall_window and len(history) == stall_window and residual >= history[0]:
            raise SolverDivergenceError(
                f"{what}: residual {residual:.3g} stopped decreasing after {it} sweeps "
                "(no proper policy, or the recursion is not contractive)",
                x, residual, it,
            )
        history.append(residual)
    raise SolverDivergenceError(
        f"{what}: no convergence in {max_iter} sweeps (residual {residual:.3g})",
        x, residual, max_iter,
    )


def soft_value_iteration(mdp: TabularMdp, ref, tau: float, tol: float = DEFAULT_TOL,
                         max_iter: int = DEFAULT_MAX_ITER, v0=None,
                         stall_window: int | None = STALL_WINDOW) -> SolveResult:
    tau = _check_tau(tau)
    ref = check_policy(ref, (mdp.n_states, mdp.n_actions))
    v0 = np.zeros(mdp.n_states) if v0 is None else _check_values(mdp, v0)
    v, it, res = _iterate(lambda v: soft_bellman_op(mdp, ref, tau, v), _pin(mdp, v0.copy()),
                          tol, max_iter, "soft value iteration", stall_window)
    q = q_from_v(mdp, v)
    return SolveResult(v, q, boltzmann_policy(q, ref, tau), it, res)


def standard_value_iteration(mdp: TabularMdp, tol: float = DEFAULT_TOL,
                             max_iter: int = DEFAULT_MAX_ITER, v0=None,
                             stall_window: int | None = STALL_WINDOW) -> SolveResult:
    """The ``tau = 0`` solver: max backups and a greedy, lowest-index tie-break policy."""
    v0 = np.zeros(mdp.n_states) if v0 is None else _check_values(mdp, v0)
    v, it, res = _iterate(lambda v: standard_bellman_op(mdp, v), _pin(mdp, v0.copy()),
                          tol, max_iter, "value iteration", stall_window)
    q = q_from_v(mdp, v)
    return SolveResult(v, q, greedy_policy(q), it, res)


def solve(mdp: TabularMdp, ref, tau: float, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> SolveResult:
    """Soft value iteration for ``tau > 0``, standard value iteration for ``tau == 0``."""
    if _check_tau(tau, allow_zero=True) == 0:
        return standard_value_iteration(mdp, tol, max_iter)
    return soft_value_iteration(mdp, ref, tau, tol, max_iter)


def _policy_reward(mdp, pi, ref, tau):
    c = np.sum(np.where(pi > 0, pi * mdp.rewards, 0.0), axis=1)
    if tau > 0:
        c = c - tau * kl_rows(pi, ref)
    return c


def policy_evaluation(mdp: TabularMdp, pi, ref, tau: float, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, method: str = "auto",
                      check_proper: bool = True) -> np.ndarray:
    """Value of ``pi`` under the regularised total-reward criterion.

    ``method`` is ``"exact"`` (sparse linear solve), ``"iterative"`` (repeated
    application of the policy backup) or ``"auto"`` (exact up to
    ``EXACT_EVAL_MAX_STATES`` states).
    """
    tau = _check_tau(tau, allow_zero=True)
    shape = (mdp.n_states, mdp.n_actions)
    pi = check_policy(pi, shape)
    ref = check_policy(ref, shape)
    if check_proper:
        ok, residual = is_proper(pi, mdp, horizon=PROPER_GATE_HORIZON)
        if not ok:
            raise ImproperPolicyError(
                f"policy is improper (mass {residual:.3g} never reaches the absorbing set)"
            )
    if method == "auto":
        method = "exact" if mdp.n_states <= EXACT_EVAL_MAX_STATES else "iterative"
    if method == "iterative":
        v, _, _ = _iterate(lambda v: bellman_policy_op(mdp, pi, ref, tau, v),
                           np.zeros(mdp.n_states), tol, max_iter, "policy evaluation")
        return v
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    c = _policy_reward(mdp, pi, ref, tau)
    keep = np.arange(mdp.n_states) != mdp.virtual_goal
    p = mdp.policy_matrix(pi)[keep][:, keep]
    a = (sp.identity(int(keep.sum()), format="csc") - p).tocsc()
    v = np.zeros(mdp.n_states)
    v[keep] = spla.spsolve(a, c[keep])
    if not np.all(np.isfinite(v)):
        raise ImproperPolicyError("policy evaluation system is singular; policy is improper")
    return v


def soft_policy_iteration(mdp: TabularMdp, ref, tau: float, pi0, tol: float = DEFAULT_TOL,
                          max_iter: int = 1000) -> SolveResult:
    """Alternate exact policy evaluation and Boltzmann improvement."""
    tau = _check_tau(tau)
    shape = (mdp.n_states, mdp.n_actions)
    ref = check_policy(ref, shape)
    pi = check_policy(pi0, shape)
    v_prev = None
    for it in range(1, max_iter + 1):
        v = policy_evaluation(mdp, pi, ref, tau, tol=tol)
        q = q_from_v(mdp, v)
        pi = boltzmann_policy(q, ref, tau)
        if v_prev is not None:
            residual = float(np.max(np.abs(v - v_prev)))
            if residual < tol:
                return SolveResult(v, q, pi, it, residual)
        v_prev = v
    raise SolverDivergenceError(f"soft policy iteration: no convergence in {max_iter} rounds",
                                v_prev, float("nan"), max_iter)


def soft_q_learning(mdp: TabularMdp, ref, tau: float, episodes: int, seed: int = 0,
                    learning_rate: Callable[[int], float] | None = None,
                    max_steps: int | None = None, starts=None,
                    epsilon: float = 0.1) -> np.ndarray:
    """Tabular one-step TD learning with a soft (or, at ``tau = 0``, max) target.

    The behaviour policy is Boltzmann in the current table at ``tau``, or
    epsilon-greedy when ``tau = 0``. ``learning_rate`` maps the visit count of
    a state-action pair (starting at 1) to a step size.

    Args:
        starts: candidate start states, sampled uniformly per episode. Defaults
            to every state except the virtual goal.
        max_steps: per-episode step cap, default ``10 * n_states``.
    """
    tau = _check_tau(tau, allow_zero=True)
    n, m = mdp.n_states, mdp.n_actions
    ref = check_policy(ref, (n, m))
    if learning_rate is None:
        learning_rate = lambda k: k ** -0.7  # noqa: E731
    if max_steps is None:
        max_steps = 10 * n
    if starts is None:
        starts = np.flatnonzero(np.arange(n) != mdp.virtual_goal)
    starts = np.asarray(starts, dtype=np.int64)
    rng = np.random.default_rng(seed)
    q = np.zeros((n, m))
    visits = np.zeros((n, m), dtype=np.int64)
    g = mdp.virtual_goal
    t = mdp.transitions

    def backup(s):
        if s == g:
            return 0.0
        if tau == 0:
            return float(q[s].max())
        return float(soft_max(q[s:s + 1], ref[s:s + 1], tau)[0])

    for _ in range(episodes):
        s = int(starts[rng.integers(starts.size)])
        for _ in range(max_steps):
            if s == g:
                break
            if tau > 0:
                probs = softmax_weights(q[s:s + 1], ref[s:s + 1], tau)[0]
                a = int(rng.choice(m, p=probs))
            elif rng.random() < epsilon:
                a = int(rng.integers(m))
            else:
                a = int(np.argmax(q[s]))
            row = s * m + a
            lo, hi = t.indptr[row], t.indptr[row + 1]
            if hi - lo == 1:
                s2 = int(t.indices[lo])
            else:
                s2 = int(rng.choice(t.indices[lo:hi], p=t.data[lo:hi]))
            visits[s, a] += 1
            target = mdp.rewards[s, a] + backup(s2)
            q[s, a] += learning_rate(int(visits[s, a])) * (target - q[s, a])
            s = s2
    return q
