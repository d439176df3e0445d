"""Deterministic grid MDP over the workspace.

Demonstrations are snapped to cell centers and deduplicated into 8-connected
paths.  With the sparse reward 1(s' == goal) and an absorbing goal, the
optimal value has the closed form V*(s, g) = gamma^(d(s,g) - 1) where d is
the shortest-path step count, which replaces per-goal value-iteration sweeps
by one breadth-first search per candidate goal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

# 8-connected neighborhood (dx, dy), excluding "stay"
NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    h: float
    origin: tuple          # workspace min corner
    dims: tuple            # (nx, ny)
    blocked: np.ndarray    # bool (nx, ny)

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1]

    def snap(self, p) -> int:
        """Flat id of the cell whose center is nearest to point p."""
        ix = int(round((p[0] - self.origin[0]) / self.h))
        iy = int(round((p[1] - self.origin[1]) / self.h))
        if not (0 <= ix < self.dims[0] and 0 <= iy < self.dims[1]):
            raise GridError(f"point {tuple(p)} outside workspace")
        return ix * self.dims[1] + iy

    def center(self, cell: int) -> np.ndarray:
        ix, iy = divmod(cell, self.dims[1])
        return np.array([self.origin[0] + ix * self.h, self.origin[1] + iy * self.h])

    def centers(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=int)
        ix, iy = np.divmod(cells, self.dims[1])
        return np.stack([self.origin[0] + ix * self.h, self.origin[1] + iy * self.h], axis=-1)

    def neighbors(self, cell: int) -> list:
        ix, iy = divmod(cell, self.dims[1])
        out = []
        for dx, dy in NEIGHBORS:
            jx, jy = ix + dx, iy + dy
            if 0 <= jx < self.dims[0] and 0 <= jy < self.dims[1] and not self.blocked[jx, jy]:
                out.append(jx * self.dims[1] + jy)
        return out

    def is_blocked(self, cell: int) -> bool:
        ix, iy = divmod(cell, self.dims[1])
        return bool(self.blocked[ix, iy])


@dataclass(frozen=True)
class GridPath:
    """A demonstration snapped to the grid and deduplicated.

    cells: ordered cell ids, consecutive entries adjacent (8-connected) or
    bridge-inserted; frame_to_step maps every original frame to its path step.
    """

    demo_id: int
    cells: np.ndarray          # (L,) int
    frame_to_step: np.ndarray  # (N_d,) int
    candidates: np.ndarray     # unique visited cells, first-occurrence order

    def __len__(self) -> int:
        return len(self.cells)


def _bridge(grid: Grid, a: int, b: int) -> list:
    """Chebyshev walk from a to b, excluding a, including b."""
    ax, ay = divmod(a, grid.dims[1])
    bx, by = divmod(b, grid.dims[1])
    out = []
    while (ax, ay) != (bx, by):
        ax += int(np.sign(bx - ax))
        ay += int(np.sign(by - ay))
        out.append(ax * grid.dims[1] + ay)
    return out


def build_grid(oset, h: float, obstacles=()) -> tuple:
    """Discretize the workspace and snap every demonstration onto it.

    Runs of repeated cells are collapsed to one path step; jumps larger than
    one cell (possible for resampled hand-drawn input) are bridged with
    straight-line cells so consecutive path entries stay 8-connected.
    Returns (Grid, [GridPath]).
    """
    if h <= 0:
        raise GridError("resolution h must be > 0")
    (xmin, ymin), (xmax, ymax) = oset.workspace
    nx = int(round((xmax - xmin) / h)) + 1
    ny = int(round((ymax - ymin) / h)) + 1
    blocked = np.zeros((nx, ny), dtype=bool)
    for cell in obstacles:
        ix, iy = divmod(int(cell), ny)
        blocked[ix, iy] = True
    grid = Grid(h=h, origin=(xmin, ymin), dims=(nx, ny), blocked=blocked)

    paths = []
    for d in oset.demos:
        cells = []
        frame_to_step = np.empty(len(d), dtype=int)
        for fi, fr in enumerate(d.frames):
            try:
                c = grid.snap(fr.s)
            except GridError as e:
                raise GridError(f"demo {d.id} frame {fi}: {e}") from e
            if grid.is_blocked(c):
                raise GridError(f"demo {d.id} frame {fi}: state maps to a blocked cell")
            if not cells:
                cells.append(c)
            elif c != cells[-1]:
                for bc in _bridge(grid, cells[-1], c):
                    if grid.is_blocked(bc):
                        raise GridError(f"demo {d.id} frame {fi}: path crosses a blocked cell")
                    cells.append(bc)
            frame_to_step[fi] = len(cells) - 1
        cells = np.asarray(cells, dtype=int)
        _, first = np.unique(cells, return_index=True)
        candidates = cells[np.sort(first)]
        paths.append(GridPath(demo_id=d.id, cells=cells, frame_to_step=frame_to_step,
                              candidates=candidates))
    return grid, paths


def shortest_steps(grid: Grid, goal: int) -> np.ndarray:
    """BFS step counts from every cell to `goal`; -1 where unreachable."""
    dist = np.full(grid.n_cells, -1, dtype=int)
    dist[goal] = 0
    queue = [goal]
    while queue:
        nxt = []
        for c in queue:
            for nb in grid.neighbors(c):
                if dist[nb] < 0:
                    dist[nb] = dist[c] + 1
                    nxt.append(nb)
        queue = nxt
    return dist


class ValueTable:
    """Optimal values V*(cell, goal) for a set of candidate goal cells."""

    def __init__(self, grid: Grid, gamma: float):
        self.grid = grid
        self.gamma = gamma
        self._v: dict = {}

    def add_goal(self, goal: int) -> None:
        if goal in self._v:
            return
        if self.grid.is_blocked(goal):
            raise GridError(f"goal cell {goal} is blocked")
        d = shortest_steps(self.grid, goal)
        v = np.zeros(self.grid.n_cells)
        reach = d > 0
        v[reach] = self.gamma ** (d[reach] - 1)
        # value at the goal itself is 0: the goal is absorbing, reward is
        # collected on the transition into it
        self._v[goal] = v

    def values(self, goal: int) -> np.ndarray:
        return self._v[goal]

    def goals(self):
        return self._v.keys()


def precompute_goal_values(grid: Grid, candidates, gamma: float) -> ValueTable:
    """One BFS sweep per candidate goal cell."""
    candidates = list(candidates)
    if not candidates:
        raise GridError("no candidate goals")
    table = ValueTable(grid, gamma)
    for g in candidates:
        table.add_goal(int(g))
    return table


def optimality_score(path: GridPath, i: int, g: int, table: ValueTable) -> float:
    """How optimal the demonstrated suffix from step i is for goal cell g.

    Returns Q/V* in [0, 1]: 1 when the suffix is a shortest path to g, 0 when
    the path never reaches g after step i (or g is unreachable).  A step
    already at g scores 1 by convention.
    """
    cells = path.cells
    if cells[i] == g:
        return 1.0
    later = np.nonzero(cells[i + 1:] == g)[0]
    if len(later) == 0:
        return 0.0
    m = int(later[0]) + 1
    v = table.values(g)[cells[i]]
    if v <= 0.0:
        return 0.0
    q = table.gamma ** (m - 1)
    return min(q / v, 1.0)


def optimality_matrix(path: GridPath, table: ValueTable) -> np.ndarray:
    """(L, C) matrix of optimality scores over the path's candidate goals."""
    L, C = len(path.cells), len(path.candidates)
    eps = np.zeros((L, C))
    for j, g in enumerate(path.candidates):
        for i in range(L):
            eps[i, j] = optimality_score(path, i, int(g), table)
    return eps


def subgoal_loglik_matrix(path: GridPath, table: ValueTable, alpha: float) -> np.ndarray:
    """log p(s_i, a_i | g) per path step and candidate goal (softmax rows)."""
    scaled = alpha * optimality_matrix(path, table)
    return scaled - logsumexp(scaled, axis=1, keepdims=True)


def subgoal_loglik(path: GridPath, i: int, g: int, alpha: float, table: ValueTable) -> float:
    """Log-probability of step i's state-action under candidate goal g."""
    scores = np.array([optimality_score(path, i, int(c), table) for c in path.candidates])
    j = int(np.nonzero(path.candidates == g)[0][0])
    scaled = alpha * scores
    return float(scaled[j] - logsumexp(scaled))


def one_step_loglik_matrix(path: GridPath, table: ValueTable, alpha: float) -> np.ndarray:
    """Single-step action likelihood used by the subgoal-only ablation.

    Scores the observed action against all actions available in the cell via
    a softmax of alpha * Q*(s, a, g); ignores the rest of the demonstrated
    suffix entirely.
    """
    grid = table.grid
    L, C = len(path.cells), len(path.candidates)
    out = np.empty((L, C))
    for i in range(L):
        c = int(path.cells[i])
        moves = grid.neighbors(c) + [c]  # 8-connected plus stay
        observed = int(path.cells[i + 1]) if i + 1 < L else c
        for j, g in enumerate(path.candidates):
            g = int(g)
            v = table.values(g)
            qs = np.array([1.0 if m == g else table.gamma * v[m] for m in moves])
            q_obs = 1.0 if observed == g else table.gamma * v[observed]
            scaled = alpha * qs
            out[i, j] = alpha * q_obs - logsumexp(scaled)
    return out


def value_iteration(grid: Grid, goal: int, gamma: float, tol: float = 1e-12,
                    max_iter: int = 10000) -> np.ndarray:
    """Generic value iteration for the sparse indicator reward (test oracle).

    Kept independent of the closed form: full Bellman backups over the
    8-connected action set with an absorbing goal.
    """
    v = np.zeros(grid.n_cells)
    for _ in range(max_iter):
        vnew = np.zeros_like(v)
        for c in range(grid.n_cells):
            if c == goal or grid.is_blocked(c):
                continue
            best = 0.0
            for nb in grid.neighbors(c):
                r = 1.0 if nb == goal else 0.0
                best = max(best, r + gamma * v[nb])
            vnew[c] = best
        if np.max(np.abs(vnew - v)) < tol:
            return vnew
        v = vnew
    return v
