"""Item-collection gridworld as exact tabular MDPs.

States are the non-wall cells in row-major order followed by the virtual goal.
An item cell that matches the task is an absorbing state: every action from
it collects the item (reward +1) and ends the episode. Every other transition
costs -0.1. Cells holding non-matching items are ordinary floor.

For composition, ``build_library`` puts the goal cells of every library task
into one shared absorbing set; a task that does not want an item in that set
receives ``off_goal_reward`` for collecting it.
"""

from __future__ import annotations

import bisect
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .compose import compose_max, compose_or
from .mdp import TabularMdp, TaskLibrary, require_valid, uniform_policy
from .solver import boltzmann_policy, greedy_policy, solve

ACTIONS = ("N", "S", "E", "W")
MOVES = ((0, -1), (0, 1), (1, 0), (-1, 0))
SHAPES = ("square", "circle")
COLORS = ("blue", "beige", "purple")

STEP_REWARD = -0.1
GOAL_REWARD = 1.0
OFF_GOAL_REWARD = -10.0

Cell = tuple[int, int]


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    walls: frozenset = frozenset()
    rng_seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        object.__setattr__(self, "walls", frozenset(tuple(map(int, w)) for w in self.walls))
        for x, y in self.walls:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"wall {(x, y)} is outside the grid")

    @property
    def cells(self) -> list[Cell]:
        return [(x, y) for y in range(self.height) for x in range(self.width)
                if (x, y) not in self.walls]

    @property
    def n_cells(self) -> int:
        return self.width * self.height - len(self.walls)

    def index(self) -> dict[Cell, int]:
        return {c: i for i, c in enumerate(self.cells)}

    def move(self, cell: Cell, action: int) -> Cell:
        dx, dy = MOVES[action]
        x, y = cell[0] + dx, cell[1] + dy
        if 0 <= x < self.width and 0 <= y < self.height and (x, y) not in self.walls:
            return (x, y)
        return cell

    def is_connected(self) -> bool:
        cells = self.cells
        if not cells:
            return False
        return len(bfs_distances(self, [cells[0]])) == len(cells)


@dataclass(frozen=True)
class Item:
    shape: str
    color: str
    cell: Cell

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown colour {self.color!r}")
        object.__setattr__(self, "cell", tuple(map(int, self.cell)))

    @property
    def name(self) -> str:
        return self.color.capitalize() + self.shape.capitalize()


_TOKEN = re.compile(r"[A-Z][a-z]*")


@dataclass(frozen=True)
class GridTask:
    """A disjunction of (colour, shape) clauses; ``None`` matches anything.

    Names parse as CamelCase: ``Purple``, ``Square``, ``BeigeSquare``,
    ``PurpleOrBlue``, ``BlueAndSquare``.
    """

    name: str
    clauses: tuple = field(default=())

    def __post_init__(self):
        if not self.clauses:
            object.__setattr__(self, "clauses", _parse_clauses(self.name))

    @classmethod
    def parse(cls, name: str) -> "GridTask":
        return cls(name, _parse_clauses(name))

    @classmethod
    def exact(cls, item: Item) -> "GridTask":
        return cls(item.name, ((item.color, item.shape),))

    @classmethod
    def any_of(cls, items: Iterable[Item]) -> "GridTask":
        items = list(items)
        return cls("Or".join(i.name for i in items) or "Nothing",
                   tuple((i.color, i.shape) for i in items))

    def matches(self, item: Item) -> bool:
        return any((c is None or c == item.color) and (s is None or s == item.shape)
                   for c, s in self.clauses)


def _parse_clauses(name: str) -> tuple:
    clauses = []
    for part in name.split("Or"):
        colour = shape = None
        tokens = _TOKEN.findall(part)
        if not tokens or "".join(tokens) != part:
            raise ValueError(f"cannot parse task name {name!r}")
        for tok in tokens:
            low = tok.lower()
            if tok == "And":
                continue
            if low in COLORS and colour is None:
                colour = low
            elif low in SHAPES and shape is None:
                shape = low
            else:
                raise ValueError(f"cannot parse task name {name!r} (token {tok!r})")
        clauses.append((colour, shape))
    return tuple(clauses)


def check_layout(grid: GridSpec, items: Sequence[Item], require_connected: bool = True) -> None:
    cells = [it.cell for it in items]
    if len(set(cells)) != len(cells):
        raise ValueError("items must occupy distinct cells")
    for c in cells:
        if c in grid.walls or not (0 <= c[0] < grid.width and 0 <= c[1] < grid.height):
            raise ValueError(f"item cell {c} is a wall or outside the grid")
    if require_connected and not grid.is_connected():
        raise ValueError("grid interior is not connected")


def bfs_distances(grid: GridSpec, sources: Iterable[Cell]) -> dict[Cell, int]:
    """Multi-source shortest-path move counts over non-wall cells."""
    dist = {}
    queue = deque()
    for s in sources:
        s = tuple(s)
        if s not in dist:
            dist[s] = 0
            queue.append(s)
    while queue:
        c = queue.popleft()
        for a in range(len(MOVES)):
            n = grid.move(c, a)
            if n not in dist:
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def _successors(grid: GridSpec, goal_cells: set) -> tuple[np.ndarray, np.ndarray]:
    cells = grid.cells
    index = grid.index()
    n = len(cells)
    g = n
    nxt = np.full((n + 1, len(ACTIONS)), g, dtype=np.int64)
    absorbing = np.zeros(n + 1, dtype=bool)
    for i, c in enumerate(cells):
        if c in goal_cells:
            absorbing[i] = True
            continue
        for a in range(len(ACTIONS)):
            nxt[i, a] = index[grid.move(c, a)]
    return nxt, absorbing


def build_mdp(grid: GridSpec, items: Sequence[Item], task: GridTask,
              step_reward: float = STEP_REWARD, goal_reward: float = GOAL_REWARD,
              require_connected: bool = True) -> TabularMdp:
    """Single-task MDP: matching item cells are absorbing, other items are floor."""
    check_layout(grid, items, require_connected)
    goals = {it.cell for it in items if task.matches(it)}
    if not goals:
        raise ValueError(f"task {task.name!r} matches no item in the layout")
    nxt, absorbing = _successors(grid, goals)
    rewards = np.full(nxt.shape, step_reward)
    rewards[absorbing] = goal_reward
    rewards[-1] = 0.0
    return require_valid(TabularMdp.from_next_state(nxt, rewards, absorbing, nxt.shape[0] - 1))


def build_library(grid: GridSpec, items: Sequence[Item], tasks: Sequence[GridTask],
                  tau: float, reference=None, step_reward: float = STEP_REWARD,
                  goal_reward: float = GOAL_REWARD,
                  off_goal_reward: float = OFF_GOAL_REWARD,
                  require_connected: bool = True) -> TaskLibrary:
    """Library over a shared absorbing set: the goal cells of every task.

    Collecting an item in the shared set pays ``goal_reward`` if the task
    wants it and ``off_goal_reward`` otherwise.
    """
    check_layout(grid, items, require_connected)
    goal_sets = []
    for t in tasks:
        cells = {it.cell for it in items if t.matches(it)}
        if not cells:
            raise ValueError(f"task {t.name!r} matches no item in the layout")
        goal_sets.append(cells)
    shared = set().union(*goal_sets)
    nxt, absorbing = _successors(grid, shared)
    index = grid.index()
    base_rewards = np.full(nxt.shape, step_reward)
    base_rewards[-1] = 0.0
    rewards = []
    for cells in goal_sets:
        r = base_rewards.copy()
        for c in shared:
            r[index[c]] = goal_reward if c in cells else off_goal_reward
        rewards.append(r)
    base = TabularMdp.from_next_state(nxt, base_rewards, absorbing, nxt.shape[0] - 1)
    if reference is None:
        reference = uniform_policy(base.n_states, base.n_actions)
    return TaskLibrary(base, reference, tuple(rewards), tau, tuple(t.name for t in tasks))


def default_grid() -> GridSpec:
    return GridSpec(10, 10)


def random_grid(width: int, height: int, seed: int, wall_fraction: float = 0.15) -> GridSpec:
    """Random walls, rejecting placements that disconnect the interior."""
    rng = np.random.default_rng(seed)
    walls: set = set()
    target = int(wall_fraction * width * height)
    order = rng.permutation(width * height)
    for k in order:
        if len(walls) >= target:
            break
        c = (int(k % width), int(k // width))
        trial = GridSpec(width, height, frozenset(walls | {c}), seed)
        if trial.n_cells >= 8 and trial.is_connected():
            walls.add(c)
    return GridSpec(width, height, frozenset(walls), seed)


def random_items(grid: GridSpec, seed: int, kinds: Sequence[tuple[str, str]] | None = None,
                 exclude: Iterable[Cell] = ()) -> list[Item]:
    """Place one item per (shape, colour) pair (all six by default) on distinct free cells."""
    if kinds is None:
        kinds = [(s, c) for c in COLORS for s in SHAPES]
    free = [c for c in grid.cells if c not in set(map(tuple, exclude))]
    if len(free) < len(kinds):
        raise ValueError("not enough free cells for the items")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(free), size=len(kinds), replace=False)
    return [Item(s, c, free[int(p)]) for (s, c), p in zip(kinds, picks)]


# -- simulation ---------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple
    rewards: tuple
    final_state: int
    terminal: bool

    @property
    def ret(self) -> float:
        return float(sum(self.rewards))

    def __len__(self):
        return len(self.actions)

    def visited(self, virtual_goal: int | None = None) -> list[int]:
        """States in visiting order, including the final one unless it is the virtual goal."""
        out = list(self.states)
        if self.final_state != virtual_goal:
            out.append(self.final_state)
        return out


def episode_rng(base_seed: int, episode: int) -> np.random.Generator:
    """Per-episode generator derived from ``(base_seed, episode)``."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(episode)]))


def step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator | None = None):
    """One transition: ``(next_state, reward, done)``; done iff leaving the absorbing set."""
    if not 0 <= action < mdp.n_actions:
        raise ValueError(f"invalid action {action}")
    if not 0 <= state < mdp.n_states:
        raise ValueError(f"invalid state {state}")
    if mdp.deterministic:
        nxt = int(mdp.next_state[state, action])
    else:
        row = state * mdp.n_actions + action
        t = mdp.transitions
        lo, hi = t.indptr[row], t.indptr[row + 1]
        rng = rng or np.random.default_rng()
        nxt = int(rng.choice(t.indices[lo:hi], p=t.data[lo:hi]))
    return nxt, float(mdp.rewards[state, action]), bool(mdp.absorbing[state])


class _Sampler:
    """Inverse-CDF sampling tables shared across many rollouts of one policy."""

    def __init__(self, mdp: TabularMdp, policy):
        pi = np.asarray(policy, dtype=float)
        if pi.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(f"policy shape {pi.shape} does not match the MDP")
        self.mdp = mdp
        self.cdf = np.cumsum(pi, axis=1).tolist()
        self.last = [int(np.flatnonzero(row > 0)[-1]) for row in pi]
        self.rewards = mdp.rewards.tolist()
        self.absorbing = mdp.absorbing.tolist()
        self.next = mdp.next_state.tolist() if mdp.deterministic else None

    def run(self, start: int, max_steps: int, rng: np.random.Generator) -> Trajectory:
        g = self.mdp.virtual_goal
        states, actions, rewards = [], [], []
        s = int(start)
        terminal = s == g
        draws = rng.random(2 * max_steps) if max_steps > 0 else ()
        for k in range(max_steps):
            if s == g:
                terminal = True
                break
            a = min(bisect.bisect_right(self.cdf[s], draws[2 * k]), self.last[s])
            states.append(s)
            actions.append(a)
            rewards.append(self.rewards[s][a])
            if self.next is not None:
                s = self.next[s][a]
            else:
                t = self.mdp.transitions
                row = s * self.mdp.n_actions + a
                lo, hi = t.indptr[row], t.indptr[row + 1]
                cdf = np.cumsum(t.data[lo:hi])
                j = min(int(np.searchsorted(cdf, draws[2 * k + 1], side="right")), hi - lo - 1)
                s = int(t.indices[lo + j])
        else:
            terminal = s == g
        return Trajectory(tuple(states), tuple(actions), tuple(rewards), s, terminal)


def rollout(mdp: TabularMdp, policy, start: int, max_steps: int, seed: int) -> Trajectory:
    """Sample actions from ``policy`` until the virtual goal or ``max_steps``."""
    return _Sampler(mdp, policy).run(start, max_steps, np.random.default_rng(seed))


def rollout_many(mdp: TabularMdp, policy, starts: Sequence[int], max_steps: int,
                 base_seed: int) -> list[Trajectory]:
    """Episode ``i`` uses ``episode_rng(base_seed, i)``, so results are order-independent."""
    sampler = _Sampler(mdp, policy)
    return [sampler.run(s, max_steps, episode_rng(base_seed, i)) for i, s in enumerate(starts)]


@dataclass
class TemporalRun:
    trajectory: Trajectory
    collected: list
    complete: bool


class TemporalAgent:
    """Collects every item by repeatedly composing the per-item library.

    After each collection the layout shrinks, so the remaining items' tasks
    are re-solved on the reduced layout (cached per remaining set) and
    recomposed with ``compose_max`` (``mode="max"``) or a uniform
    ``compose_or`` (``mode="or"``). Actions are greedy at ``tau = 0`` and
    Boltzmann otherwise.
    """

    def __init__(self, grid: GridSpec, items: Sequence[Item], tau: float = 0.0,
                 mode: str = "max", tol: float = 1e-10):
        if not items:
            raise ValueError("temporal composition needs at least one item")
        if mode not in ("max", "or"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "or" and tau <= 0:
            raise ValueError("mode 'or' needs tau > 0")
        check_layout(grid, items)
        self.grid, self.items = grid, tuple(items)
        self.tau, self.mode, self.tol = float(tau), mode, tol
        self._cache: dict = {}

    def plan(self, remaining: tuple) -> tuple[TabularMdp, np.ndarray]:
        """Environment and policy for the given remaining items."""
        if remaining not in self._cache:
            tasks = [GridTask.exact(it) for it in remaining]
            lib = build_library(self.grid, remaining, tasks, self.tau)
            qs = [solve(lib.task_mdp(k), lib.reference, self.tau, self.tol).q
                  for k in range(len(remaining))]
            if self.mode == "max":
                q = compose_max(qs)
            else:
                q = compose_or(qs, np.full(len(qs), 1.0 / len(qs)), self.tau)
            pi = greedy_policy(q) if self.tau == 0 else boltzmann_policy(q, lib.reference, self.tau)
            env = build_mdp(self.grid, remaining, GridTask.any_of(remaining))
            self._cache[remaining] = (env, pi)
        return self._cache[remaining]

    def run(self, start: Cell, seed: int, max_steps: int | None = None) -> TemporalRun:
        if max_steps is None:
            max_steps = self.grid.width * self.grid.height * len(self.items)
        index = self.grid.index()
        cells = self.grid.cells
        remaining = self.items
        cell = tuple(start)
        states, actions, rewards, collected = [], [], [], []
        rng = np.random.default_rng(seed)
        budget = max_steps
        while remaining and budget > 0:
            env, pi = self.plan(remaining)
            leg = _Sampler(env, pi).run(index[cell], budget, rng)
            states += leg.states
            actions += leg.actions
            rewards += leg.rewards
            budget -= len(leg)
            if not leg.terminal:
                cell = cells[leg.final_state]
                break
            cell = cells[leg.states[-1]]
            item = next(it for it in remaining if it.cell == cell)
            collected.append(item)
            remaining = tuple(it for it in remaining if it is not item)
        final = index[cell] if remaining else len(cells)
        traj = Trajectory(tuple(states), tuple(actions), tuple(rewards), final, not remaining)
        return TemporalRun(traj, collected, not remaining)


def rollout_temporal(grid: GridSpec, items: Sequence[Item], tau: float, start: Cell, seed: int,
                     mode: str = "max", max_steps: int | None = None) -> TemporalRun:
    return TemporalAgent(grid, items, tau, mode).run(start, seed, max_steps)


def collect_all_mdp(grid: GridSpec, items: Sequence[Item], step_reward: float = STEP_REWARD,
                    goal_reward: float = GOAL_REWARD) -> TabularMdp:
    """Exact MDP for collecting every item; state ``mask * n_cells + cell`` plus the virtual goal.

    Bit ``k`` of ``mask`` is set while item ``k`` is still on the board. On a
    cell holding a remaining item every action collects it.
    """
    check_layout(grid, items)
    cells = grid.cells
    index = grid.index()
    nc, k = len(cells), len(items)
    n = nc * (1 << k) + 1
    g = n - 1
    item_at = {index[it.cell]: j for j, it in enumerate(items)}
    moved = np.array([[index[grid.move(c, a)] for a in range(len(ACTIONS))] for c in cells])
    nxt = np.full((n, len(ACTIONS)), g, dtype=np.int64)
    rewards = np.zeros((n, len(ACTIONS)))
    absorbing = np.zeros(n, dtype=bool)
    for mask in range(1 << k):
        base = mask * nc
        if mask == 0:
            absorbing[base:base + nc] = True
            continue
        nxt[base:base + nc] = base + moved
        rewards[base:base + nc] = step_reward
        for ci, j in item_at.items():
            if mask >> j & 1:
                rest = mask & ~(1 << j)
                nxt[base + ci] = g if rest == 0 else rest * nc + ci
                rewards[base + ci] = goal_reward
    return require_valid(TabularMdp.from_next_state(nxt, rewards, absorbing, g))
