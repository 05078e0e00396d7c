"""Black-box position search: ranked heuristic search plus random and PSO baselines."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..geometry import cumulative_length, point_to_polyline_distance
from ..interference import AttackConfig, FlashlightSpec, apply_attack
from .objectives import ObjectiveSpec, evaluate_objective
from .ranking import Candidate, RankingParams, outward_normals


@dataclass
class SearchTrace:
    strategy: str
    seed: int | None = None
    entries: list = field(default_factory=list)
    best: AttackConfig | None = None
    best_loss: float = math.inf
    best_index: int | None = None
    queries: int = 0
    probes: int = 0

    def record(self, cfg: AttackConfig, loss: float, queries: int, **extra):
        self.entries.append({"position": list(cfg.position), "loss": float(loss), "queries": int(queries), **extra})

    def finalize(self):
        if not self.entries:
            return
        losses = [e["loss"] for e in self.entries]
        self.best_index = int(np.argmin(losses))
        self.best_loss = float(losses[self.best_index])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def summary(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "best_loss": self.best_loss,
                "best_index": self.best_index, "queries": self.queries, "probes": self.probes,
                "best": self.best.to_dict() if self.best is not None else None}


def evaluate_config(oracle, frame, cfg: AttackConfig, spec: ObjectiveSpec):
    """One oracle query: attacked images -> prediction -> loss."""
    images = apply_attack(frame.images, frame.rig, cfg)
    pred = oracle.predict(frame, images)
    return evaluate_objective(pred, spec), pred


def _blinding(position, flashlight: FlashlightSpec | None) -> AttackConfig:
    return AttackConfig("blinding", tuple(position), flashlight=flashlight or FlashlightSpec())


def optimize_blackbox(oracle, frame, spec: ObjectiveSpec, candidates: list[Candidate], budget: int,
                      flashlight: FlashlightSpec | None = None, jobs: int = 1) -> tuple[AttackConfig, SearchTrace]:
    """Evaluate candidates in rank order within ``budget``; argmin, ties to the better rank."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    if not candidates:
        raise ConfigError("no candidates to search")
    todo = candidates[:budget]
    cfgs = [_blinding(c.position, flashlight) for c in todo]
    losses = _evaluate_many(oracle, frame, spec, cfgs, jobs)
    trace = SearchTrace("ranked")
    for i, (cfg, loss) in enumerate(zip(cfgs, losses)):
        trace.record(cfg, loss, i + 1, rank=i + 1, score=todo[i].score)
    trace.queries = len(cfgs)
    trace.finalize()
    trace.best = cfgs[trace.best_index]
    return trace.best, trace


def _evaluate_many(oracle, frame, spec, cfgs, jobs: int) -> list[float]:
    if jobs <= 1 or len(cfgs) < 2:
        return [evaluate_config(oracle, frame, c, spec)[0] for c in cfgs]
    chunks = [cfgs[i::jobs] for i in range(jobs)]
    clones = [oracle.clone() for _ in range(jobs)]

    def run(args):
        worker, chunk = args
        return [evaluate_config(worker, frame, c, spec)[0] for c in chunk]

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(run, zip(clones, chunks)))
    losses = [0.0] * len(cfgs)
    for j, part in enumerate(parts):
        for k, loss in enumerate(part):
            losses[j + k * jobs] = loss
    oracle.query_count += sum(c.query_count for c in clones)
    return losses


@dataclass(frozen=True)
class RoadsideRegion:
    """Continuous roadside region matching the candidate lattice's extent."""

    offset_range: tuple[float, float] = (0.5, 3.0)
    height_range: tuple[float, float] = (0.5, 2.0)
    min_clearance: float = 0.45
    forward_only: bool = True

    @classmethod
    def from_ranking(cls, params: RankingParams) -> "RoadsideRegion":
        return cls((min(params.lateral_offsets), max(params.lateral_offsets)),
                   (min(params.heights), max(params.heights)), params.min_clearance, params.forward_only)

    def _setup(self, frame):
        out = []
        for side, b in (("left", frame.left_boundary), ("right", frame.right_boundary)):
            s = cumulative_length(b.points)
            lo = 0.0
            if self.forward_only:
                ahead = np.flatnonzero(b.points[:, 1] >= frame.ego_pose[1])
                if not len(ahead):
                    continue
                lo = float(s[ahead[0]])
            out.append((side, b, s, lo, outward_normals(b, frame.ego_pose[:2])))
        return out

    def position(self, frame, u: np.ndarray, setup=None) -> tuple[float, float, float] | None:
        """Map u in [0,1]^4 (side, arc, offset, height) to a roadside point, or None if invalid."""
        setup = setup or self._setup(frame)
        side_i = min(int(u[0] * len(setup)), len(setup) - 1)
        _, b, s, lo, nrm = setup[side_i]
        st = lo + float(u[1]) * (s[-1] - lo)
        q = np.array([np.interp(st, s, b.points[:, 0]), np.interp(st, s, b.points[:, 1])])
        n = np.array([np.interp(st, s, nrm[:, 0]), np.interp(st, s, nrm[:, 1])])
        n /= max(np.hypot(*n), 1e-12)
        off = self.offset_range[0] + float(u[2]) * (self.offset_range[1] - self.offset_range[0])
        h = self.height_range[0] + float(u[3]) * (self.height_range[1] - self.height_range[0])
        xy = q + off * n
        x0, x1, y0, y1 = frame.bev_range
        if not (x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1):
            return None
        bounds = [e for e in frame.gt_map if e.class_tag == "boundary"]
        if min(float(point_to_polyline_distance(xy[None], e)[0]) for e in bounds) < self.min_clearance:
            return None
        return (float(xy[0]), float(xy[1]), float(h))

    def sample(self, frame, rng: np.random.Generator, max_tries: int = 1000):
        setup = self._setup(frame)
        for _ in range(max_tries):
            pos = self.position(frame, rng.random(4), setup)
            if pos is not None:
                return pos
        raise ConfigError(f"could not sample a roadside position for scene {frame.scene_id}")


def random_search(oracle, frame, spec: ObjectiveSpec, region: RoadsideRegion, budget: int, seed: int = 0,
                  flashlight: FlashlightSpec | None = None) -> tuple[AttackConfig, SearchTrace]:
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    trace = SearchTrace("random", seed)
    cfgs = []
    for i in range(budget):
        cfg = _blinding(region.sample(frame, rng), flashlight)
        loss, _ = evaluate_config(oracle, frame, cfg, spec)
        cfgs.append(cfg)
        trace.record(cfg, loss, i + 1)
    trace.queries = budget
    trace.finalize()
    trace.best = cfgs[trace.best_index]
    return trace.best, trace


def pso_search(oracle, frame, spec: ObjectiveSpec, region: RoadsideRegion, budget: int, seed: int = 0,
               flashlight: FlashlightSpec | None = None, n_particles: int = 20, inertia: float = 0.7,
               c_personal: float = 1.5, c_global: float = 1.5) -> tuple[AttackConfig, SearchTrace]:
    """Particle swarm over the unit box (side, arc, offset, height); invalid points cost no query."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    setup = region._setup(frame)
    n = min(n_particles, budget)
    x = rng.random((n, 4))
    v = (rng.random((n, 4)) - 0.5) * 0.2
    p_best = x.copy()
    p_loss = np.full(n, np.inf)
    g_best, g_loss = x[0].copy(), np.inf
    trace = SearchTrace("pso", seed)
    cfgs = []
    used = 0
    stall = 0
    while used < budget and stall < 50 * n:
        for i in range(n):
            if used >= budget:
                break
            pos = region.position(frame, x[i], setup)
            if pos is None:
                stall += 1
                loss = np.inf
            else:
                cfg = _blinding(pos, flashlight)
                loss, _ = evaluate_config(oracle, frame, cfg, spec)
                used += 1
                stall = 0
                cfgs.append(cfg)
                trace.record(cfg, loss, used)
            if loss < p_loss[i]:
                p_loss[i], p_best[i] = loss, x[i].copy()
            if loss < g_loss:
                g_loss, g_best = loss, x[i].copy()
        r1, r2 = rng.random((n, 4)), rng.random((n, 4))
        v = inertia * v + c_personal * r1 * (p_best - x) + c_global * r2 * (g_best - x)
        x = np.clip(x + v, 0.0, 1.0 - 1e-9)
    if not cfgs:
        raise ConfigError(f"PSO found no valid roadside position for scene {frame.scene_id}")
    trace.queries = used
    trace.finalize()
    trace.best = cfgs[trace.best_index]
    return trace.best, trace
