"""JSON and CSV formats for MDPs, task libraries, layouts and tables.

JSON floats are written with Python's shortest round-trip repr, so a
write/read cycle reproduces every value bit for bit. CSV tables use 17
significant digits, which also round-trips binary64 exactly.

MDP document::

    {"format": "softcompose.mdp/1", "n_states": S, "n_actions": A,
     "virtual_goal": g, "absorbing": [s, ...],
     "transitions": [[s, a, s_next, p], ...], "rewards": [[...], ...]}

Library document::

    {"format": "softcompose.library/1", "base": <MDP document without rewards>,
     "reference": [[...], ...], "temperature": tau, "names": [...],
     "task_rewards": [[[...], ...], ...], "layout": <layout document or null>}

Layout document::

    {"width": W, "height": H, "walls": [[x, y], ...],
     "items": [{"shape": ..., "color": ..., "cell": [x, y]}, ...]}
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .gridworld import GridSpec, Item
from .mdp import TabularMdp, TaskLibrary

MDP_FORMAT = "softcompose.mdp/1"
LIBRARY_FORMAT = "softcompose.library/1"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def mdp_to_dict(mdp: TabularMdp, rewards: bool = True) -> dict:
    coo = mdp.transitions.tocoo()
    m = mdp.n_actions
    triples = sorted(
        (int(r // m), int(r % m), int(c), float(p)) for r, c, p in zip(coo.row, coo.col, coo.data)
    )
    d = {
        "format": MDP_FORMAT,
        "n_states": mdp.n_states,
        "n_actions": m,
        "virtual_goal": mdp.virtual_goal,
        "absorbing": np.flatnonzero(mdp.absorbing).tolist(),
        "transitions": [list(t) for t in triples],
    }
    if rewards:
        d["rewards"] = mdp.rewards.tolist()
    return d


def mdp_from_dict(d: dict, rewards=None) -> TabularMdp:
    if d.get("format") != MDP_FORMAT:
        raise ValueError(f"not an MDP document (format {d.get('format')!r})")
    n, m = int(d["n_states"]), int(d["n_actions"])
    trip = np.asarray(d["transitions"], dtype=float).reshape(-1, 4)
    rows = trip[:, 0].astype(np.int64) * m + trip[:, 1].astype(np.int64)
    t = sp.csr_matrix((trip[:, 3], (rows, trip[:, 2].astype(np.int64))), shape=(n * m, n))
    absorbing = np.zeros(n, dtype=bool)
    absorbing[np.asarray(d["absorbing"], dtype=np.int64)] = True
    r = d.get("rewards") if rewards is None else rewards
    if r is None:
        r = np.zeros((n, m))
    return TabularMdp(t, np.asarray(r, dtype=float), absorbing, int(d["virtual_goal"]))


def layout_to_dict(grid: GridSpec, items) -> dict:
    return {
        "width": grid.width,
        "height": grid.height,
        "walls": sorted([list(w) for w in grid.walls]),
        "items": [{"shape": it.shape, "color": it.color, "cell": list(it.cell)} for it in items],
    }


def layout_from_dict(d: dict) -> tuple[GridSpec, list[Item]]:
    grid = GridSpec(int(d["width"]), int(d["height"]),
                    frozenset(tuple(w) for w in d.get("walls", [])), int(d.get("rng_seed", 0)))
    items = [Item(it["shape"], it["color"], tuple(it["cell"])) for it in d.get("items", [])]
    return grid, items


def library_to_dict(library: TaskLibrary, layout: dict | None = None) -> dict:
    return {
        "format": LIBRARY_FORMAT,
        "base": mdp_to_dict(library.base, rewards=False),
        "reference": library.reference.tolist(),
        "temperature": library.temperature,
        "names": list(library.names),
        "task_rewards": [r.tolist() for r in library.task_rewards],
        "layout": layout,
    }


def library_from_dict(d: dict) -> TaskLibrary:
    if d.get("format") != LIBRARY_FORMAT:
        raise ValueError(f"not a library document (format {d.get('format')!r})")
    base = mdp_from_dict(d["base"])
    return TaskLibrary(base, np.asarray(d["reference"], dtype=float),
                       tuple(np.asarray(r, dtype=float) for r in d["task_rewards"]),
                       float(d["temperature"]), tuple(d.get("names", ())))


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def table_to_csv(table) -> str:
    """``state,action,value`` rows; value tables leave the action column empty."""
    a = np.asarray(table, dtype=float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "action", "value"])
    if a.ndim == 1:
        for s, v in enumerate(a):
            w.writerow([s, "", fmt(v)])
    elif a.ndim == 2:
        for s in range(a.shape[0]):
            for act in range(a.shape[1]):
                w.writerow([s, act, fmt(a[s, act])])
    else:
        raise ValueError("tables must be 1-d or 2-d")
    return buf.getvalue()


def write_table_csv(path, table) -> None:
    Path(path).write_text(table_to_csv(table), encoding="utf-8")


def read_table_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros(0)
    if rows[0]["action"] == "":
        out = np.zeros(max(int(r["state"]) for r in rows) + 1)
        for r in rows:
            out[int(r["state"])] = float(r["value"])
        return out
    n = max(int(r["state"]) for r in rows) + 1
    m = max(int(r["action"]) for r in rows) + 1
    out = np.zeros((n, m))
    for r in rows:
        out[int(r["state"]), int(r["action"])] = float(r["value"])
    return out
