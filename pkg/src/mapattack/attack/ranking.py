"""Roadside candidate lattice and the position score S(p)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..geometry import Polyline2D, cumulative_length, left_normals, point_to_polyline_distance, project_onto_polyline
from ..interference import FlashlightSpec

log = logging.getLogger(__name__)

MIN_CAMERA_DISTANCE = 0.1


def default_phi_max(kind: str, flashlight: FlashlightSpec | None = None) -> float:
    if kind == "blinding":
        beam = (flashlight or FlashlightSpec()).beam_angle
        return math.radians(beam / 2 + 10.0)
    return math.radians(45.0)


@dataclass(frozen=True)
class RankingParams:
    phi_max: float = math.radians(30.0)
    lateral_offsets: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    longitudinal_step: float = 2.0
    heights: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    top_n: int = 20
    min_clearance: float = 0.45
    forward_only: bool = True

    def __post_init__(self):
        if not 0 < self.phi_max <= math.pi:
            raise ConfigError("phi_max must lie in (0, pi]")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if self.longitudinal_step <= 0 or not self.lateral_offsets or not self.heights:
            raise ConfigError("candidate grid must be non-empty with a positive step")


@dataclass(frozen=True)
class Candidate:
    position: tuple[float, float, float]
    score: float
    side: str
    arc: float
    offset: float

    @property
    def longitudinal(self) -> float:
        return self.position[1]

    @property
    def height(self) -> float:
        return self.position[2]

    def to_dict(self) -> dict:
        return {"position": list(self.position), "score": self.score, "side": self.side,
                "arc": self.arc, "offset": self.offset}


def score_position(p, camera_positions, anchors, phi_max: float) -> float:
    """Sum over cameras c and anchors d of (1 - phi/phi_max) / |p - c|^2 where phi < phi_max."""
    p = np.asarray(p, dtype=float)
    cams = np.atleast_2d(np.asarray(camera_positions, dtype=float))
    anc = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anc.shape[1] == 2:
        anc = np.column_stack([anc, np.zeros(len(anc))])
    total = 0.0
    for c in cams:
        vp = p - c
        dist = float(np.linalg.norm(vp))
        if dist < MIN_CAMERA_DISTANCE:
            log.info("score term skipped: candidate %s within %.2f m of camera", p.tolist(), MIN_CAMERA_DISTANCE)
            continue
        for d in anc:
            vd = d - c
            nd = float(np.linalg.norm(vd))
            if nd < 1e-12:
                continue
            cos_phi = float(np.dot(vp, vd) / (dist * nd))
            phi = math.acos(max(-1.0, min(1.0, cos_phi)))
            if phi < phi_max:
                total += (1.0 - phi / phi_max) / (dist * dist)
    return total


def _score_many(points: np.ndarray, cams: np.ndarray, anchors: np.ndarray, phi_max: float) -> np.ndarray:
    """Vectorized score_position over many candidates."""
    scores = np.zeros(len(points))
    for c in cams:
        vp = points - c
        dist = np.linalg.norm(vp, axis=1)
        ok = dist >= MIN_CAMERA_DISTANCE
        for d in anchors:
            vd = d - c
            nd = np.linalg.norm(vd)
            if nd < 1e-12:
                continue
            cos_phi = (vp @ vd) / (np.maximum(dist, 1e-300) * nd)
            phi = np.arccos(np.clip(cos_phi, -1.0, 1.0))
            term = np.where(ok & (phi < phi_max), (1.0 - phi / phi_max) / np.maximum(dist, 1e-300) ** 2, 0.0)
            scores += term
    return scores


def outward_normals(boundary: Polyline2D, ego_xy=(0.0, 0.0)) -> np.ndarray:
    """Unit normals pointing away from the side the ego is on."""
    _, lateral = project_onto_polyline(np.asarray(ego_xy, dtype=float), boundary)
    sign = -1.0 if lateral >= 0 else 1.0
    return sign * left_normals(boundary.points)


def candidate_lattice(frame, params: RankingParams) -> list[tuple[tuple[float, float, float], str, float, float]]:
    """Roadside lattice: (position, side, arc position, lateral offset) tuples."""
    boundaries = [e for e in frame.gt_map if e.class_tag == "boundary"]
    ego = np.asarray(frame.ego_pose[:2], dtype=float)
    x0, x1, y0, y1 = frame.bev_range
    out = []
    for side, b in (("left", frame.left_boundary), ("right", frame.right_boundary)):
        s = cumulative_length(b.points)
        stations = np.arange(0.0, s[-1] + 1e-9, params.longitudinal_step)
        base = np.column_stack([np.interp(stations, s, b.points[:, 0]), np.interp(stations, s, b.points[:, 1])])
        normals = outward_normals(b, ego)
        nx = np.interp(stations, s, normals[:, 0])
        ny = np.interp(stations, s, normals[:, 1])
        nrm = np.column_stack([nx, ny]) / np.maximum(np.hypot(nx, ny), 1e-12)[:, None]
        for si, (st, q, n) in enumerate(zip(stations, base, nrm)):
            if params.forward_only and q[1] < ego[1]:
                continue
            for off in params.lateral_offsets:
                xy = q + off * n
                if not (x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1):
                    continue
                clearance = min(float(point_to_polyline_distance(xy[None], e)[0]) for e in boundaries)
                if clearance < params.min_clearance:
                    continue
                for h in params.heights:
                    out.append(((float(xy[0]), float(xy[1]), float(h)), side, float(st), float(off)))
    return out


def rank_positions(frame, anchors, params: RankingParams | None = None, *, all_candidates: bool = False
                   ) -> list[Candidate]:
    """Score the lattice and return the top_n candidates (or all, sorted)."""
    params = params or RankingParams()
    lattice = candidate_lattice(frame, params)
    if not lattice:
        raise ConfigError(f"empty candidate lattice for scene {frame.scene_id}")
    anc = np.atleast_2d(np.asarray(anchors, dtype=float))
    if anc.size == 0:
        raise ConfigError("ranking needs at least one anchor")
    if anc.shape[1] == 2:
        anc = np.column_stack([anc, np.zeros(len(anc))])
    pts = np.array([c[0] for c in lattice])
    scores = _score_many(pts, frame.rig.positions, anc, params.phi_max)
    cands = [Candidate(c[0], float(sc), c[1], c[2], c[3]) for c, sc in zip(lattice, scores)]
    cands.sort(key=lambda c: (-c.score, c.longitudinal, c.height, c.position[0], c.side))
    return cands if all_candidates else cands[:params.top_n]


def pseudo_anchors(frame, spacing: float = 4.0) -> list[tuple[float, float]]:
    """Evenly spaced forward points on both boundaries, for scenes without anchors."""
    out = []
    for b in (frame.left_boundary, frame.right_boundary):
        s = cumulative_length(b.points)
        for st in np.arange(0.0, s[-1], spacing):
            q = (float(np.interp(st, s, b.points[:, 0])), float(np.interp(st, s, b.points[:, 1])))
            if q[1] >= frame.ego_pose[1]:
                out.append(q)
    return out
