"""Map AP over Chamfer thresholds and planning-impact metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ..geometry import Polyline2D, chamfer_fixed, point_to_polyline_distance, polygon_intersects_polyline, \
    resample_points
from .planner import Trajectory, Vehicle

log = logging.getLogger(__name__)

CLASSES = ("boundary", "divider", "ped_crossing")
DEFAULT_THRESHOLDS = (0.5, 1.0, 1.5)


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the PR curve; ``tp`` is in confidence order."""
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1][:-1]
    return float(np.sum((r[1:] - r[:-1]) * p))


def match_class(preds: list, gts: list, threshold: float) -> tuple[np.ndarray, int]:
    """Greedy confidence-ordered matching across frames.

    ``preds[f]`` is a list of (Polyline2D, confidence), ``gts[f]`` a list of
    Polyline2D. Each prediction takes the closest unmatched GT of its frame
    when that Chamfer distance is within the threshold.
    """
    order = sorted(((-conf, f, k) for f, plist in enumerate(preds) for k, (_, conf) in enumerate(plist)))
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(order))
    for n, (_, f, k) in enumerate(order):
        poly = preds[f][k][0]
        best, best_d = -1, np.inf
        for gi, gt in enumerate(gts[f]):
            if used[f][gi]:
                continue
            d = chamfer_fixed(poly, gt)
            if d < best_d:
                best, best_d = gi, d
        if best >= 0 and best_d <= threshold:
            used[f][best] = True
            tp[n] = 1.0
    return tp, sum(len(g) for g in gts)


def map_ap(preds, gts, thresholds=DEFAULT_THRESHOLDS, classes=CLASSES) -> dict:
    """Per-class AP averaged over thresholds, and mAP over classes present in the GT.

    ``preds``: one PredictedMap per frame; ``gts``: one list of GT Polyline2D per frame.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    per_class, skipped = {}, []
    for cls in classes:
        p = [[(e.polyline, e.confidence) for e in pm.elements if e.class_tag == cls] for pm in preds]
        g = [[e for e in frame_gt if e.class_tag == cls] for frame_gt in gts]
        if sum(len(x) for x in g) == 0:
            skipped.append(cls)
            log.info("class %s has no GT elements; skipped from mAP", cls)
            continue
        aps = []
        for t in thresholds:
            tp, n_gt = match_class(p, g, t)
            aps.append(average_precision(tp, n_gt))
        per_class[cls] = float(np.mean(aps))
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"ap": per_class, "mAP": m, "skipped": skipped, "thresholds": list(thresholds)}


def unreachable_goal_rate(results: list[list[Trajectory]]) -> float:
    """Fraction of frames with at least one unreachable goal."""
    if not results:
        return 0.0
    return sum(any(not t.reached for t in frame) for frame in results) / len(results)


def trajectory_unsafe(traj: Trajectory, boundaries, vehicle: Vehicle, tol: float = 1e-6) -> bool:
    """True when any pose's footprint touches a boundary polyline (closed test)."""
    if len(traj.poses) == 0:
        return False
    reach = 0.5 * float(np.hypot(vehicle.length, vehicle.width)) + tol
    for b in boundaries:
        pts = getattr(b, "points", b)
        near = point_to_polyline_distance(traj.poses[:, :2], Polyline2D(np.asarray(pts, dtype=float))) <= reach
        for pose in traj.poses[near]:
            if polygon_intersects_polyline(vehicle.footprint(pose), pts, tol):
                return True
    return False


def unsafe_trajectory_rate(results: list[list[Trajectory]], gt_boundaries: list, vehicle: Vehicle | None = None
                           ) -> float:
    """Fraction of frames where any planned trajectory's footprint touches a GT boundary."""
    if not results:
        return 0.0
    vehicle = vehicle or Vehicle()
    bad = 0
    for frame, bounds in zip(results, gt_boundaries):
        bad += any(t.reached and trajectory_unsafe(t, bounds, vehicle) for t in frame)
    return bad / len(results)


def ade(traj_a, traj_b) -> float:
    """Mean pointwise distance after resampling both paths to equal count by arc length."""
    a = np.asarray(getattr(traj_a, "poses", traj_a), dtype=float)[:, :2]
    b = np.asarray(getattr(traj_b, "poses", traj_b), dtype=float)[:, :2]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("ade needs two non-empty trajectories")
    n = max(len(a), len(b), 2)
    ra = resample_points(a, n) if len(a) > 1 else np.repeat(a, n, axis=0)
    rb = resample_points(b, n) if len(b) > 1 else np.repeat(b, n, axis=0)
    return float(np.mean(np.hypot(*(ra - rb).T)))


@dataclass
class MetricReport:
    ap_per_class: dict
    mAP: float
    ugr: float
    uptr: float
    ade: float | None
    counts: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("ugr", "uptr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {"ap_per_class": self.ap_per_class, "mAP": self.mAP, "ugr": self.ugr, "uptr": self.uptr,
                "ade": self.ade, "counts": self.counts, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(_rounded(self.to_dict()), indent=1, sort_keys=True) + "\n"

    def rows_csv(self) -> str:
        if not self.rows:
            return ""
        keys = sorted({k for r in self.rows for k in r})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(_rounded(r))
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'metric':<16}{'value':>10}"]
        for cls, v in sorted(self.ap_per_class.items()):
            lines.append(f"{'AP ' + cls:<16}{v:>10.4f}")
        lines.append(f"{'mAP':<16}{self.mAP:>10.4f}")
        lines.append(f"{'UGR':<16}{self.ugr:>10.4f}")
        lines.append(f"{'UPTR':<16}{self.uptr:>10.4f}")
        lines.append(f"{'ADE (m)':<16}{'n/a' if self.ade is None else format(self.ade, '.4f'):>10}")
        return "\n".join(lines) + "\n"


def _rounded(obj, digits: int = 9):
    """Round floats so reports are stable across platforms' last-bit noise."""
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: _rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, digits) for v in obj]
    return obj
