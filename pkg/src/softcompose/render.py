"""Plain-text image writers: PGM (P2) value heatmaps and PPM (P3) trajectory overlays."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .gridworld import GridSpec, Item, Trajectory
from .serialize import fmt

FLOOR = (192, 192, 192)
WALL = (0, 0, 0)
ITEM_RGB = {"blue": (40, 80, 220), "beige": (200, 180, 140), "purple": (128, 40, 160)}
# Path cells get red = 255; no base colour uses that value.
MARK_RED = 255


def _cell_values(values, grid: GridSpec) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    n = grid.n_cells
    if v.shape not in ((n,), (n + 1,)):
        raise ValueError(f"value table of shape {v.shape} does not fit a grid with {n} cells")
    return v[:n]


def heatmap_levels(values, grid: GridSpec) -> np.ndarray:
    """``(height, width)`` gray levels: min-max over free cells, walls 0, flat tables 128."""
    v = _cell_values(values, grid)
    img = np.zeros((grid.height, grid.width), dtype=np.int64)
    lo, hi = float(v.min()), float(v.max())
    for (x, y), val in zip(grid.cells, v):
        if hi > lo:
            img[y, x] = int(round(255 * (val - lo) / (hi - lo)))
        else:
            img[y, x] = 128
    return img


def render_value_heatmap(values, grid: GridSpec, path) -> Path:
    """Write a PGM heatmap and a ``.csv`` sidecar of the raw cell values."""
    path = Path(path)
    img = heatmap_levels(values, grid)
    lines = ["P2", f"{grid.width} {grid.height}", "255"]
    lines += [" ".join(str(int(p)) for p in row) for row in img]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    v = _cell_values(values, grid)
    with open(path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for (x, y), val in zip(grid.cells, v):
            w.writerow([x, y, fmt(val)])
    return path


def trajectory_pixels(traj: Trajectory, grid: GridSpec, items=()) -> np.ndarray:
    img = np.zeros((grid.height, grid.width, 3), dtype=np.int64)
    img[:, :] = FLOOR
    for x, y in grid.walls:
        img[y, x] = WALL
    for it in items:
        img[it.cell[1], it.cell[0]] = ITEM_RGB[it.color]
    cells = grid.cells
    for s in traj.visited(virtual_goal=len(cells)):
        x, y = cells[s]
        img[y, x, 0] = MARK_RED
    return img


def render_trajectory(traj: Trajectory, grid: GridSpec, path, items: tuple[Item, ...] = ()) -> Path:
    """Write a PPM with visited cells marked in the red channel, plus a ``.csv`` of the steps."""
    path = Path(path)
    img = trajectory_pixels(traj, grid, items)
    lines = ["P3", f"{grid.width} {grid.height}", "255"]
    lines += [" ".join(f"{r} {g} {b}" for r, g, b in row) for row in img]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    cells = grid.cells
    with open(path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "x", "y", "action", "reward"])
        for k, (s, a, r) in enumerate(zip(traj.states, traj.actions, traj.rewards)):
            x, y = cells[s]
            w.writerow([k, x, y, a, fmt(r)])
    return path


def read_pnm(path) -> tuple[str, np.ndarray]:
    """Parse a plain PGM/PPM written by this module; returns (magic, pixels)."""
    tokens = Path(path).read_text(encoding="ascii").split()
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if magic == "P2":
        return magic, data.reshape(h, w)
    return magic, data.reshape(h, w, 3)
