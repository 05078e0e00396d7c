"""Hybrid patch optimization: ranked positions, then sign-gradient PGD on a coarse cell pattern.

Gradients are central finite differences through the full pipeline
(composite -> oracle -> loss). The budget is counted in PGD iterations, so a
run spends exactly ``positions x iters_per_position`` units; the raw number of
oracle probes is recorded separately on the trace.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..interference import AttackConfig, PatchSpec, composite_footprints, patch_footprints
from ..render import RenderConfig
from .objectives import ObjectiveSpec, evaluate_objective
from .ranking import Candidate
from .search import SearchTrace

INITS = ("road", "random")


@dataclass(frozen=True)
class PgdParams:
    cell_grid: tuple[int, int] = (16, 16)
    step_size: float = 0.1
    iters_per_position: int = 5
    fd_epsilon: float = 0.05
    backtracking: bool = True
    max_backtracks: int = 3
    cell_px: int = 8
    init: str = "road"
    patch_width: float = 3.0
    patch_height: float = 2.0
    face_ego: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ConfigError("step_size must be > 0")
        if not self.fd_epsilon > 0:
            raise ConfigError("fd_epsilon must be > 0")
        if self.iters_per_position < 0 or self.max_backtracks < 0:
            raise ConfigError("iteration counts must be >= 0")
        if len(self.cell_grid) != 2 or min(self.cell_grid) < 1 or self.cell_px < 1:
            raise ConfigError("cell_grid and cell_px must be positive")
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}")
        object.__setattr__(self, "cell_grid", tuple(int(v) for v in self.cell_grid))


def facing_alpha(position) -> float:
    """Patch yaw whose plane normal points from the patch toward the ego origin."""
    return math.atan2(-position[0], position[1])


def upsample_cells(cells: np.ndarray, cell_px: int) -> np.ndarray:
    """Piecewise-constant pattern: every cell becomes a cell_px x cell_px block."""
    return np.repeat(np.repeat(np.asarray(cells, dtype=np.float32), cell_px, axis=0), cell_px, axis=1)


def initial_cells(params: PgdParams, rng: np.random.Generator | None = None,
                  road_color=RenderConfig().ground_color) -> np.ndarray:
    r, c = params.cell_grid
    if params.init == "road":
        return np.broadcast_to(np.asarray(road_color, dtype=np.float32), (r, c, 3)).copy()
    rng = rng or np.random.default_rng(params.seed)
    return rng.random((r, c, 3)).astype(np.float32)


def active_cells(footprints, params: PgdParams) -> np.ndarray:
    """(r, c) mask of cells sampled by any footprint, bilinear neighbours included."""
    r, c = params.cell_grid
    h, w = r * params.cell_px, c * params.cell_px
    act = np.zeros((r, c), dtype=bool)
    for fp in footprints:
        x0 = np.floor(fp.map_x.ravel()).astype(int)
        y0 = np.floor(fp.map_y.ravel()).astype(int)
        for dx in (0, 1):
            for dy in (0, 1):
                xi = np.clip(x0 + dx, 0, w - 1) // params.cell_px
                yi = np.clip(y0 + dy, 0, h - 1) // params.cell_px
                act[yi, xi] = True
    return act


class _Probe:
    """Loss of a cell pattern at a fixed position; counts oracle calls."""

    def __init__(self, oracle, frame, spec: ObjectiveSpec, footprints, cell_px: int):
        self.oracle, self.frame, self.spec = oracle, frame, spec
        self.footprints, self.cell_px = footprints, cell_px
        self.calls = 0

    def __call__(self, cells: np.ndarray) -> float:
        images = composite_footprints(self.frame.images, self.footprints, upsample_cells(cells, self.cell_px))
        self.calls += 1
        return float(evaluate_objective(self.oracle.predict(self.frame, images), self.spec))


def fd_gradient(probe, cells: np.ndarray, active: np.ndarray, eps: float) -> np.ndarray:
    """Central differences per active cell channel; inactive cells get exactly 0."""
    g = np.zeros_like(cells, dtype=np.float64)
    for i, j in zip(*np.nonzero(active)):
        for ch in range(cells.shape[2]):
            x = float(cells[i, j, ch])
            hi, lo = min(1.0, x + eps), max(0.0, x - eps)
            if hi <= lo:
                continue
            plus = cells.copy()
            plus[i, j, ch] = hi
            minus = cells.copy()
            minus[i, j, ch] = lo
            g[i, j, ch] = (probe(plus) - probe(minus)) / (hi - lo)
    return g


def _patch_spec(position, params: PgdParams, cells: np.ndarray) -> PatchSpec:
    alpha = facing_alpha(position) if params.face_ego else 0.0
    return PatchSpec(tuple(position), params.patch_width, params.patch_height, alpha,
                     upsample_cells(cells, params.cell_px))


def run_position(oracle, frame, spec: ObjectiveSpec, position, params: PgdParams, rank: int = 1) -> dict:
    """PGD at one position. Returns the best cells, its loss and one entry per iteration."""
    rng = np.random.default_rng([params.seed, rank])
    cells = initial_cells(params, rng)
    footprints = patch_footprints(frame.rig, _patch_spec(position, params, cells))
    active = active_cells(footprints, params)
    probe = _Probe(oracle, frame, spec, footprints, params.cell_px)
    loss = probe(cells)
    best_cells, best_loss = cells, loss
    step = params.step_size
    base = {"position": list(map(float, position)), "rank": rank, "active_cells": int(active.sum())}
    entries = [{**base, "iteration": 0, "loss": float(loss), "accepted": True, "step": float(step)}]
    for it in range(params.iters_per_position):
        g = fd_gradient(probe, cells, active, params.fd_epsilon)
        direction = np.sign(g).astype(np.float32)
        accepted = True
        if direction.any():
            trial_step = step
            trial = np.clip(cells - trial_step * direction, 0.0, 1.0)
            trial_loss = probe(trial)
            tries = 0
            while params.backtracking and trial_loss > loss and tries < params.max_backtracks:
                trial_step *= 0.5
                trial = np.clip(cells - trial_step * direction, 0.0, 1.0)
                trial_loss = probe(trial)
                tries += 1
            if params.backtracking and trial_loss > loss:
                accepted = False
                step = trial_step
            else:
                cells, loss, step = trial, trial_loss, trial_step
                if loss < best_loss:
                    best_cells, best_loss = cells, loss
        entries.append({**base, "iteration": it + 1, "loss": float(loss), "accepted": accepted,
                        "step": float(step)})
    return {"cells": best_cells, "loss": float(best_loss), "entries": entries, "probes": probe.calls,
            "active": active}


def optimize_patch(oracle, frame, spec: ObjectiveSpec, candidates: list[Candidate], pgd: PgdParams,
                   budget: int, jobs: int = 1) -> tuple[AttackConfig, SearchTrace]:
    """Hybrid search: PGD at each of the top floor(budget / iters) ranked positions.

    With zero iterations per position every candidate is scored at its
    initialization pattern and no budget is spent.
    """
    if not candidates:
        raise ConfigError("no candidates to search")
    iters = pgd.iters_per_position
    if iters > 0:
        if budget < iters:
            raise ConfigError(f"budget {budget} is below one position's {iters} PGD iterations")
        todo = candidates[:budget // iters]
    else:
        todo = list(candidates)

    def work(args):
        worker, items = args
        return [(k, run_position(worker, frame, spec, candidates[k].position, pgd, rank=k + 1)) for k in items]

    index = list(range(len(todo)))
    if jobs <= 1 or len(todo) < 2:
        results = dict(work((oracle, index)))
    else:
        clones = [oracle.clone() for _ in range(jobs)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, zip(clones, [index[j::jobs] for j in range(jobs)])))
        results = dict(kv for part in parts for kv in part)
        oracle.query_count += sum(c.query_count for c in clones)

    trace = SearchTrace("pgd", pgd.seed)
    used = 0
    best_k, best_loss = 0, math.inf
    for k in index:
        res = results[k]
        for e in res["entries"]:
            used += e["iteration"] > 0
            trace.entries.append({**e, "queries": used})
        trace.probes += res["probes"]
        if res["loss"] < best_loss:
            best_k, best_loss = k, res["loss"]
    trace.queries = used
    trace.finalize()
    patch = _patch_spec(todo[best_k].position, pgd, results[best_k]["cells"])
    trace.best = AttackConfig("patch", todo[best_k].position, patch=patch)
    return trace.best, trace
