"""Hybrid A* over a heading-exact state lattice.

Turning primitives sweep exactly one heading bin at the minimum radius; the
straight primitive is the shortest whole number of cells at least that long,
so axis-aligned straights land on cell centers. End positions snap to the
cell center. The search graph is therefore finite and independent of
expansion order, which lets a plain breadth-first search over the same graph
serve as a reachability oracle. Goals are reached either by landing within
tolerance or by a collision-free Dubins shot.

Walls are inflated by half the vehicle width (plus a small clearance margin)
and every pose is checked along the vehicle's whole longitudinal axis, which
covers the rectangular footprint. The reference point must stay inside the
grid; axis points beyond the grid edge are not checked.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from ..errors import ConfigError
from .dubins import dubins_shortest, propagate


@dataclass(frozen=True)
class Vehicle:
    length: float = 4.5
    width: float = 1.9
    min_radius: float = 5.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.min_radius > 0):
            raise ConfigError("vehicle dimensions must be positive")

    def footprint(self, pose) -> np.ndarray:
        """Corners of the footprint rectangle centered on the pose."""
        x, y, th = pose
        c, s = math.cos(th), math.sin(th)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, s], [-s, c]]) + [x, y]


@dataclass(frozen=True)
class PlannerParams:
    cell: float = 0.25
    heading_bins: int = 36
    node_budget: int = 50_000
    analytic_radius: float = 12.0
    goal_tolerance: float = 0.5
    goal_heading_tolerance: float = math.radians(15.0)
    turn_penalty: float = 0.05

    def __post_init__(self):
        if not (self.cell > 0 and self.heading_bins >= 4 and self.node_budget >= 1):
            raise ConfigError("invalid planner parameters")


@dataclass
class OccupancyGrid:
    """Boolean grid over [x0, x1] x [y0, y1]; cell (i, j) is row i (y), column j (x)."""

    occupied: np.ndarray
    x0: float
    y0: float
    cell: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupied.shape

    @classmethod
    def empty(cls, bev_range, cell: float) -> "OccupancyGrid":
        x0, x1, y0, y1 = bev_range
        nx, ny = int(round((x1 - x0) / cell)), int(round((y1 - y0) / cell))
        return cls(np.zeros((ny, nx), dtype=bool), float(x0), float(y0), float(cell))

    @classmethod
    def from_polylines(cls, polylines, bev_range, cell: float, inflate: float) -> "OccupancyGrid":
        """Rasterize polylines as one-cell walls, then grow them by ``inflate`` meters."""
        grid = cls.empty(bev_range, cell)
        walls = np.zeros(grid.shape, dtype=np.uint8)
        for poly in polylines:
            pts = np.asarray(getattr(poly, "points", poly), dtype=float)
            px = np.round(((pts - [grid.x0, grid.y0]) / cell - 0.5) * 16).astype(np.int32)
            cv2.polylines(walls, [px.reshape(-1, 1, 2)], False, 1, 1, cv2.LINE_8, shift=4)
        grid.occupied = grid._inflate(walls.astype(bool), inflate)
        return grid

    def _inflate(self, walls: np.ndarray, radius: float) -> np.ndarray:
        if not walls.any():
            return walls
        dist = ndimage.distance_transform_edt(~walls) * self.cell
        return dist <= radius

    def index(self, xy) -> tuple[np.ndarray, np.ndarray]:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        j = np.floor((xy[:, 0] - self.x0) / self.cell).astype(int)
        i = np.floor((xy[:, 1] - self.y0) / self.cell).astype(int)
        return i, j

    def center(self, i: int, j: int) -> tuple[float, float]:
        return self.x0 + (j + 0.5) * self.cell, self.y0 + (i + 0.5) * self.cell

    def blocked(self, xy, outside: bool = True) -> np.ndarray:
        """Occupied cells; points outside the grid report ``outside``."""
        i, j = self.index(xy)
        ny, nx = self.shape
        inside = (i >= 0) & (i < ny) & (j >= 0) & (j < nx)
        out = np.full(len(i), outside, dtype=bool)
        out[inside] = self.occupied[i[inside], j[inside]]
        return out


@dataclass
class PlanningProblem:
    start: tuple[float, float, float]
    goals: list
    grid: OccupancyGrid
    vehicle: Vehicle = field(default_factory=Vehicle)

    def __post_init__(self):
        if not self.goals:
            raise ConfigError("planning needs at least one goal")

    @classmethod
    def from_map(cls, boundaries, start, goals, bev_range, vehicle: Vehicle | None = None,
                 cell: float = 0.25, margin: float | None = None) -> "PlanningProblem":
        """Walls from ``boundaries`` inflated by half the width plus ``margin`` (default one cell)."""
        vehicle = vehicle or Vehicle()
        margin = cell if margin is None else margin
        grid = OccupancyGrid.from_polylines(boundaries, bev_range, cell, vehicle.width / 2 + margin)
        return cls(tuple(map(float, start)), [_goal_tuple(g) for g in goals], grid, vehicle)


def _goal_tuple(g) -> tuple[float, float, float]:
    if hasattr(g, "heading"):
        return (float(g.x), float(g.y), float(g.heading))
    return tuple(float(v) for v in g)


@dataclass
class Trajectory:
    goal: tuple[float, float, float]
    status: str                      # reached | unreachable
    poses: np.ndarray                # (n, 3)
    expanded: int = 0
    reason: str = ""

    @property
    def reached(self) -> bool:
        return self.status == "reached"

    @property
    def length(self) -> float:
        if len(self.poses) < 2:
            return 0.0
        return float(np.hypot(*np.diff(self.poses[:, :2], axis=0).T).sum())

    def to_dict(self) -> dict:
        return {"goal": list(self.goal), "status": self.status, "reason": self.reason, "expanded": self.expanded,
                "poses": np.round(self.poses, 6).tolist()}


class _Lattice:
    """Shared successor and goal logic for Hybrid A* and the BFS oracle."""

    def __init__(self, problem: PlanningProblem, params: PlannerParams):
        self.p = problem
        self.params = params
        self.grid = problem.grid
        self.dth = 2.0 * math.pi / params.heading_bins
        self.step = problem.vehicle.min_radius * self.dth
        self.kappa = 1.0 / problem.vehicle.min_radius
        self.straight = math.ceil(self.step / self.grid.cell - 1e-9) * self.grid.cell
        half = self.grid.cell / 2
        self._s_arc = np.linspace(0.0, self.step, max(2, math.ceil(self.step / half)) + 1)[1:]
        self._s_straight = np.linspace(0.0, self.straight, max(2, math.ceil(self.straight / half)) + 1)[1:]
        L = problem.vehicle.length
        self._axis = np.linspace(-L / 2, L / 2, max(2, math.ceil(L / half)) + 1)

    def collides(self, poses) -> bool:
        """Any pose whose reference point leaves the grid or whose axis touches a wall."""
        poses = np.atleast_2d(np.asarray(poses, dtype=float))
        if self.grid.blocked(poses[:, :2]).any():
            return True
        c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
        ax = poses[:, None, :2] + self._axis[None, :, None] * np.stack([c, s], axis=1)[:, None, :]
        return bool(self.grid.blocked(ax.reshape(-1, 2), outside=False).any())

    def heading_bin(self, th: float) -> int:
        return int(round(th / self.dth)) % self.params.heading_bins

    def key(self, pose) -> tuple[int, int, int]:
        i, j = self.grid.index(pose[:2])
        return int(i[0]), int(j[0]), self.heading_bin(pose[2])

    def successors(self, pose):
        """(snapped pose, key, primitive samples) for each collision-free primitive."""
        x, y, th = pose
        out = []
        for turn in (1, 0, -1):
            pts = propagate(x, y, th, turn * self.kappa, self._s_straight if turn == 0 else self._s_arc)
            key = self.key(pts[-1])
            cx, cy = self.grid.center(key[0], key[1])
            snapped = (cx, cy, key[2] * self.dth)
            if self.collides(np.vstack([pts, snapped])):
                continue
            out.append((snapped, key, pts))
        return out

    def goal_shot(self, pose, goal):
        """Poses from ``pose`` to ``goal`` if the goal is reached from here, else None."""
        dxy = math.hypot(goal[0] - pose[0], goal[1] - pose[1])
        dh = abs(math.remainder(goal[2] - pose[2], 2.0 * math.pi))
        if dxy <= self.params.goal_tolerance and dh <= self.params.goal_heading_tolerance:
            return np.empty((0, 3))
        if dxy > self.params.analytic_radius:
            return None
        path = dubins_shortest(pose, goal, self.p.vehicle.min_radius)
        if path is None or path.length > 2.0 * self.params.analytic_radius:
            return None
        pts = path.sample(self.grid.cell / 2)
        if self.collides(pts):
            return None
        return pts[1:]


def obstacle_distance(grid: OccupancyGrid, goal_xy, tolerance: float = 0.0) -> np.ndarray:
    """8-connected shortest distance (m) from every free cell to the goal region; inf if cut off.

    The region is the goal's own cell plus every cell whose center lies within
    ``tolerance`` of the goal, restricted to free cells. Corner cutting is
    allowed, so the value never exceeds what any sampled continuous path needs
    and an infinite value proves unreachability.
    """
    ny, nx = grid.shape
    free = ~grid.occupied
    gi, gj = grid.index(goal_xy)
    ii, jj = np.mgrid[0:ny, 0:nx]
    cx, cy = grid.x0 + (jj + 0.5) * grid.cell, grid.y0 + (ii + 0.5) * grid.cell
    region = np.hypot(cx - goal_xy[0], cy - goal_xy[1]) <= tolerance
    if 0 <= gi[0] < ny and 0 <= gj[0] < nx:
        region[gi[0], gj[0]] = True
    region &= free
    dist = np.full((ny, nx), np.inf)
    if not region.any():
        return dist
    idx = np.arange(ny * nx).reshape(ny, nx)
    rows, cols, w = [], [], []
    for di, dj in ((0, 1), (1, 0), (1, 1), (1, -1)):
        a = (_shift(di, ny, False), _shift(dj, nx, False))
        b = (_shift(di, ny, True), _shift(dj, nx, True))
        ok = free[a] & free[b]
        ia, ib = idx[a][ok], idx[b][ok]
        rows += [ia, ib]
        cols += [ib, ia]
        w.append(np.full(2 * len(ia), grid.cell * math.hypot(di, dj)))
    g = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(ny * nx, ny * nx))
    return dijkstra(g.tocsr(), indices=idx[region], min_only=True).reshape(ny, nx)


def _shift(d: int, n: int, moved: bool) -> slice:
    """Index range of cells k (moved=False) or k + d (moved=True) with both inside [0, n)."""
    return slice(max(0, d), n + min(0, d)) if moved else slice(max(0, -d), n - max(0, d))


def _reconstruct(lat: _Lattice, parents: dict, poses: dict, key, start, tail: np.ndarray) -> np.ndarray:
    chunks = [tail]
    while parents[key] is not None:
        pkey, pts = parents[key]
        chunks.append(np.vstack([pts, [poses[key]]]))
        key = pkey
    chunks.append(np.array([start], dtype=float))
    return np.vstack(chunks[::-1])


def hybrid_astar(problem: PlanningProblem, goal, params: PlannerParams | None = None) -> Trajectory:
    params = params or PlannerParams()
    goal = _goal_tuple(goal)
    lat = _Lattice(problem, params)
    start = problem.start
    empty = np.empty((0, 3))
    if lat.collides(start):
        return Trajectory(goal, "unreachable", empty, 0, "start_blocked")
    h2d = obstacle_distance(lat.grid, goal[:2], params.goal_tolerance)
    si, sj = lat.grid.index(start[:2])
    near = math.hypot(goal[0] - start[0], goal[1] - start[1]) <= params.goal_tolerance
    if not np.isfinite(h2d[si[0], sj[0]]) and not near:
        return Trajectory(goal, "unreachable", empty, 0, "disconnected")

    def h(pose):
        i, j = lat.grid.index(pose[:2])
        return max(math.hypot(goal[0] - pose[0], goal[1] - pose[1]), float(h2d[i[0], j[0]]))

    root = lat.key(start)
    poses = {root: tuple(map(float, start))}
    parents: dict = {root: None}
    g = {root: 0.0}
    heap = [(h(start), 0, root)]
    closed = set()
    counter = 1
    expanded = 0
    while heap:
        _, _, key = heapq.heappop(heap)
        if key in closed:
            continue
        closed.add(key)
        expanded += 1
        if expanded > params.node_budget:
            return Trajectory(goal, "unreachable", empty, expanded - 1, "node_budget")
        pose = poses[key]
        tail = lat.goal_shot(pose, goal)
        if tail is not None:
            return Trajectory(goal, "reached", _reconstruct(lat, parents, poses, key, start, tail), expanded)
        for snapped, k, pts in lat.successors(pose):
            if k in closed:
                continue
            gk = g[key] + math.hypot(snapped[0] - pose[0], snapped[1] - pose[1])
            if k[2] != key[2]:
                gk += params.turn_penalty
            if gk < g.get(k, math.inf):
                g[k] = gk
                poses[k] = snapped
                parents[k] = (key, pts)
                heapq.heappush(heap, (gk + h(snapped), counter, k))
                counter += 1
    return Trajectory(goal, "unreachable", empty, expanded, "exhausted")


def bfs_reachable(problem: PlanningProblem, goal, params: PlannerParams | None = None) -> bool:
    """Brute-force breadth-first reachability over the same lattice graph (no heuristic, no budget)."""
    params = params or PlannerParams()
    goal = _goal_tuple(goal)
    lat = _Lattice(problem, params)
    if lat.collides(problem.start):
        return False
    root = lat.key(problem.start)
    seen = {root}
    queue = deque([tuple(map(float, problem.start))])
    while queue:
        pose = queue.popleft()
        if lat.goal_shot(pose, goal) is not None:
            return True
        for snapped, k, _ in lat.successors(pose):
            if k not in seen:
                seen.add(k)
                queue.append(snapped)
    return False


def plan(problem: PlanningProblem, params: PlannerParams | None = None) -> list[Trajectory]:
    """One trajectory per goal, in goal order."""
    return [hybrid_astar(problem, g, params) for g in problem.goals]
