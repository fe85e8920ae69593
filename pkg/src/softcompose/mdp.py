"""Finite total-reward MDPs with an absorbing set and a virtual terminal state.

Transitions are stored as a sparse ``(n_states * n_actions, n_states)`` matrix,
row ``s * n_actions + a`` holding the next-state distribution of ``(s, a)``.
Value tables, Q tables and policies are plain numpy arrays of shape
``(n_states,)`` and ``(n_states, n_actions)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-12


class InvalidMdpError(ValueError):
    """Raised when an MDP or task library breaks a structural invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:5])
        more = "" if len(self.violations) <= 5 else f" (+{len(self.violations) - 5} more)"
        super().__init__(f"{len(self.violations)} violation(s): {lines}{more}")


class AbsoluteContinuityError(ValueError):
    """KL divergence is undefined: p puts mass where q has none."""


class Violation(NamedTuple):
    kind: str
    state: int | None
    action: int | None
    message: str

    def __str__(self):
        where = []
        if self.state is not None:
            where.append(f"state {self.state}")
        if self.action is not None:
            where.append(f"action {self.action}")
        loc = f" at {', '.join(where)}" if where else ""
        return f"[{self.kind}]{loc}: {self.message}"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with absorbing set and virtual goal state.

    Args:
        transitions: sparse matrix of shape ``(n_states * n_actions, n_states)``.
        rewards: ``(n_states, n_actions)`` reward for taking ``a`` in ``s``.
        absorbing: boolean mask of the absorbing set (the goal states). Every
            action from an absorbing state leads to ``virtual_goal``.
        virtual_goal: index of the zero-reward terminal state.
    """

    transitions: sp.csr_matrix
    rewards: np.ndarray
    absorbing: np.ndarray
    virtual_goal: int
    _next_state: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        t = sp.csr_matrix(self.transitions, dtype=float, copy=True)
        t.sum_duplicates()
        t.eliminate_zeros()
        r = np.asarray(self.rewards, dtype=float)
        if r.ndim != 2:
            raise ValueError(f"rewards must be 2-d, got shape {r.shape}")
        n_states, n_actions = r.shape
        if t.shape != (n_states * n_actions, n_states):
            raise ValueError(
                f"transitions shape {t.shape} does not match rewards shape {r.shape}"
            )
        absorbing = np.asarray(self.absorbing, dtype=bool)
        if absorbing.shape != (n_states,):
            raise ValueError(f"absorbing mask must have shape ({n_states},)")
        if not 0 <= int(self.virtual_goal) < n_states:
            raise ValueError(f"virtual_goal {self.virtual_goal} out of range")
        t.data.setflags(write=False)
        object.__setattr__(self, "transitions", t)
        object.__setattr__(self, "rewards", _readonly(r))
        object.__setattr__(self, "absorbing", _readonly(absorbing))
        object.__setattr__(self, "virtual_goal", int(self.virtual_goal))
        nnz = np.diff(t.indptr)
        if np.all(nnz == 1) and np.all(t.data == 1.0):
            nxt = t.indices.reshape(n_states, n_actions)
            object.__setattr__(self, "_next_state", _readonly(nxt))

    @classmethod
    def from_dense(cls, transitions, rewards, absorbing, virtual_goal) -> "TabularMdp":
        """Build from a dense ``(S, A, S)`` kernel."""
        p = np.asarray(transitions, dtype=float)
        s, a, _ = p.shape
        return cls(sp.csr_matrix(p.reshape(s * a, s)), rewards, absorbing, virtual_goal)

    @classmethod
    def from_next_state(cls, next_state, rewards, absorbing, virtual_goal) -> "TabularMdp":
        """Build a deterministic MDP from an ``(S, A)`` array of successor indices."""
        nxt = np.asarray(next_state, dtype=np.int64)
        s, a = nxt.shape
        t = sp.csr_matrix(
            (np.ones(s * a), nxt.ravel(), np.arange(s * a + 1)), shape=(s * a, s)
        )
        return cls(t, rewards, absorbing, virtual_goal)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    @property
    def deterministic(self) -> bool:
        return self._next_state is not None

    @property
    def next_state(self) -> np.ndarray:
        """Successor table ``f(s, a)``; only defined for deterministic kernels."""
        if self._next_state is None:
            raise ValueError("next_state is only defined for deterministic MDPs")
        return self._next_state

    @property
    def terminal(self) -> np.ndarray:
        """Mask of the absorbing set plus the virtual goal."""
        m = self.absorbing.copy()
        m[self.virtual_goal] = True
        return m

    def dense_transitions(self) -> np.ndarray:
        return self.transitions.toarray().reshape(self.n_states, self.n_actions, self.n_states)

    def expected_next(self, v: np.ndarray) -> np.ndarray:
        """``E[v(s') | s, a]`` as an ``(S, A)`` array."""
        return (self.transitions @ v).reshape(self.n_states, self.n_actions)

    def with_rewards(self, rewards) -> "TabularMdp":
        return TabularMdp(self.transitions, rewards, self.absorbing, self.virtual_goal)

    def policy_matrix(self, policy: np.ndarray) -> sp.csr_matrix:
        """State-to-state transition matrix under ``policy``."""
        pi = np.asarray(policy, dtype=float)
        n, m = self.n_states, self.n_actions
        mix = sp.csr_matrix(
            (pi.ravel(), np.arange(n * m), np.arange(0, n * m + 1, m)), shape=(n, n * m)
        )
        return (mix @ self.transitions).tocsr()


def validate(mdp: TabularMdp) -> list[Violation]:
    """Check every structural invariant; return the list of violations (empty if valid)."""
    out: list[Violation] = []
    n, m = mdp.n_states, mdp.n_actions
    t = mdp.transitions
    g = mdp.virtual_goal

    if t.data.size and np.any(t.data < 0):
        rows = np.unique(np.repeat(np.arange(n * m), np.diff(t.indptr))[t.data < 0])
        for row in rows:
            out.append(Violation("negative-probability", int(row // m), int(row % m),
                                 "transition row has a negative entry"))
    sums = np.asarray(t.sum(axis=1)).ravel()
    for row in np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL):
        out.append(Violation("row-sum", int(row // m), int(row % m),
                             f"transition row sums to {sums[row]!r}, not 1"))

    g_col = np.asarray(t[:, g].todense()).ravel().reshape(n, m)
    for s in np.flatnonzero(mdp.terminal):
        for a in range(m):
            if g_col[s, a] != 1.0:
                label = "virtual goal" if s == g else "absorbing state"
                out.append(Violation("absorbing-exit", int(s), a,
                                     f"{label} must move to the virtual goal with probability 1"))

    for a in np.flatnonzero(mdp.rewards[g] != 0.0):
        out.append(Violation("goal-reward", g, int(a), "reward at the virtual goal must be 0"))

    bad = np.argwhere(~np.isfinite(mdp.rewards))
    for s, a in bad:
        out.append(Violation("nonfinite-reward", int(s), int(a), "reward is not finite"))
    return out


def require_valid(mdp: TabularMdp) -> TabularMdp:
    report = validate(mdp)
    if report:
        raise InvalidMdpError(report)
    return mdp


# -- policies ---------------------------------------------------------------

def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def deterministic_policy(actions: Sequence[int], n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    pi = np.zeros((actions.size, n_actions))
    pi[np.arange(actions.size), actions] = 1.0
    return pi


def check_policy(policy, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Return ``policy`` as a float array after checking it is row-stochastic."""
    pi = np.asarray(policy, dtype=float)
    if pi.ndim != 2:
        raise ValueError(f"policy must be 2-d, got shape {pi.shape}")
    if shape is not None and pi.shape != tuple(shape):
        raise ValueError(f"policy shape {pi.shape} does not match {tuple(shape)}")
    if np.any(pi < 0) or not np.all(np.isfinite(pi)):
        raise ValueError("policy has negative or non-finite entries")
    rows = np.flatnonzero(np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL)
    if rows.size:
        raise ValueError(f"policy rows {rows[:5].tolist()} do not sum to 1")
    return pi


def kl_divergence(p, q) -> float:
    """``KL(p || q)`` with the convention ``0 log(0/q) = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    if np.any(q[support] <= 0):
        raise AbsoluteContinuityError("p is not absolutely continuous with respect to q")
    ps, qs = p[support], q[support]
    return max(float(np.sum(ps * np.log(ps / qs))), 0.0)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p_s || q_s)`` for two ``(S, A)`` policies."""
    support = p > 0
    if np.any(support & (q <= 0)):
        rows = np.flatnonzero(np.any(support & (q <= 0), axis=1))
        raise AbsoluteContinuityError(
            f"policy is not absolutely continuous w.r.t. the reference at states {rows[:5].tolist()}"
        )
    ratio = np.where(support, p, 1.0) / np.where(support, q, 1.0)
    terms = np.where(support, p * np.log(ratio), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


class ProperCheck(NamedTuple):
    proper: bool
    residual: float


def is_proper(policy, mdp: TabularMdp, horizon: int | None = None,
              threshold: float = 1e-9) -> ProperCheck:
    """Check properness by pushing every start state forward ``horizon`` steps.

    ``residual`` is the largest probability, over start states, of being
    outside the absorbing set and the virtual goal after ``horizon`` steps.
    The default horizon is ``10 * n_states``.
    """
    pi = check_policy(policy, (mdp.n_states, mdp.n_actions))
    if horizon is None:
        horizon = 10 * mdp.n_states
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    p = mdp.policy_matrix(pi).toarray()
    occupancy = np.linalg.matrix_power(p, int(horizon))
    outside = ~mdp.terminal
    residual = float(np.clip(occupancy[:, outside].sum(axis=1), 0.0, 1.0).max())
    return ProperCheck(residual < threshold, residual)


# -- task libraries ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TaskLibrary:
    """Tasks sharing deterministic dynamics and differing only on the absorbing set.

    ``base`` carries the shared dynamics; its own reward table is ignored.
    """

    base: TabularMdp
    reference: np.ndarray
    task_rewards: tuple
    temperature: float
    names: tuple = ()

    def __post_init__(self):
        ref = check_policy(self.reference, (self.base.n_states, self.base.n_actions))
        rewards = tuple(_readonly(np.asarray(r, dtype=float)) for r in self.task_rewards)
        names = tuple(self.names) or tuple(f"task{i}" for i in range(len(rewards)))
        object.__setattr__(self, "reference", _readonly(ref))
        object.__setattr__(self, "task_rewards", rewards)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "temperature", float(self.temperature))
        if len(names) != len(rewards):
            raise ValueError("names and task_rewards differ in length")
        if not self.temperature >= 0 or not math.isfinite(self.temperature):
            raise ValueError("temperature must be finite and nonnegative")
        problems = library_violations(self)
        if problems:
            raise InvalidMdpError(problems)

    def __len__(self):
        return len(self.task_rewards)

    def task_mdp(self, k: int) -> TabularMdp:
        return self.base.with_rewards(self.task_rewards[k])


def library_violations(library: TaskLibrary) -> list[Violation]:
    out: list[Violation] = []
    base = library.base
    if not base.deterministic:
        out.append(Violation("nondeterministic", None, None,
                             "library dynamics must be deterministic"))
    shape = (base.n_states, base.n_actions)
    off = ~base.absorbing
    first = None
    for k, r in enumerate(library.task_rewards):
        if r.shape != shape:
            out.append(Violation("shape", None, None, f"task {k} rewards have shape {r.shape}"))
            continue
        if first is None:
            first = r
            continue
        diff = np.argwhere((r != first) & off[:, None])
        for s, a in diff[:5]:
            out.append(Violation("off-absorbing-reward", int(s), int(a),
                                 f"task {k} reward differs from task 0 outside the absorbing set"))
    return out


def build_composite_reward_mdp(library: TaskLibrary, rewards) -> TabularMdp:
    """Assemble a full MDP from the library dynamics and one reward table."""
    r = np.asarray(rewards, dtype=float)
    if r.shape != (library.base.n_states, library.base.n_actions):
        raise ValueError(
            f"reward shape {r.shape} does not match "
            f"({library.base.n_states}, {library.base.n_actions})"
        )
    return require_valid(library.base.with_rewards(r))


def two_state_mdp(left_reward: float = -1.0, right_reward: float = -1.0) -> TabularMdp:
    """State 0 loops under action 0 and exits to the terminal state 1 under action 1."""
    return TabularMdp.from_next_state(
        [[0, 1], [1, 1]],
        [[left_reward, right_reward], [0.0, 0.0]],
        [False, False],
        1,
    )
