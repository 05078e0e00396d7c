"""Attack objectives: straightening, early turn, untargeted and scene flip."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..classify import RuleThresholds, aligned_profiles
from ..errors import ConfigError
from ..geometry import Polyline2D, chamfer_fixed, mirror_reference, resample_points
from ..oracle.base import PredictedMap

KINDS = ("straighten", "early_turn", "untargeted", "scene_flip")
DEFAULT_MISS_PENALTY = 50.0


@dataclass(frozen=True)
class StraighteningTarget:
    polyline: Polyline2D
    w_avg: float
    truncated: bool


def make_straightening_target(div: Polyline2D, ref: Polyline2D, anchor) -> StraighteningTarget:
    """Keep ``div`` up to the anchor, then follow ``ref`` shifted onto div's side by w_avg.

    ``anchor`` is a vertex index into ``div`` or a BEV point (nearest vertex).
    """
    if np.ndim(anchor) == 0:
        k = int(anchor)
    else:
        k = int(np.argmin(np.hypot(*(div.points - np.asarray(anchor, dtype=float)).T)))
    pts, w_avg, truncated = mirror_reference(div.points, ref.points, k)
    if len(pts) < 2:
        pts = np.vstack([pts, pts + [0.0, 1e-3]])
        truncated = True
    return StraighteningTarget(Polyline2D(pts, div.class_tag), w_avg, truncated)


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    target: Polyline2D | None = None
    alpha: float = 1.0
    beta: float = 1.0
    gt_div: Polyline2D | None = None
    centerline: Polyline2D | None = None
    flip_direction: str | None = None
    gt_left: Polyline2D | None = None
    gt_right: Polyline2D | None = None
    miss_penalty: float = DEFAULT_MISS_PENALTY
    corridor: float = 1.0
    thresholds: RuleThresholds = field(default_factory=RuleThresholds)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"objective kind must be one of {KINDS}, got {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        need = {"straighten": ("target", "gt_div"), "early_turn": ("gt_div", "centerline"),
                "untargeted": ("gt_left", "gt_right"), "scene_flip": ("flip_direction",)}[self.kind]
        for name in need:
            if getattr(self, name) is None:
                raise ConfigError(f"objective {self.kind!r} requires {name}")
        if self.kind == "scene_flip" and self.flip_direction not in ("to_symmetric", "to_asymmetric"):
            raise ConfigError("flip_direction must be 'to_symmetric' or 'to_asymmetric'")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "alpha": self.alpha, "beta": self.beta, "flip_direction": self.flip_direction,
             "miss_penalty": self.miss_penalty, "corridor": self.corridor}
        for name in ("target", "gt_div", "centerline", "gt_left", "gt_right"):
            v = getattr(self, name)
            d[name] = v.to_list() if v is not None else None
        return d


def match_boundary(pred: PredictedMap, gt: Polyline2D) -> Polyline2D | None:
    """Boundary-class prediction with the smallest Chamfer distance to ``gt``."""
    best, best_d = None, np.inf
    for poly in pred.boundaries():
        d = chamfer_fixed(poly, gt)
        if d < best_d:
            best, best_d = poly, d
    return best


def straightening_loss(pred: PredictedMap, spec: ObjectiveSpec) -> float:
    matched = match_boundary(pred, spec.gt_div)
    if matched is None:
        return spec.miss_penalty
    return chamfer_fixed(matched, spec.target)


def directional_offsets(matched: Polyline2D, gt_div: Polyline2D, centerline: Polyline2D,
                        n: int | None = None) -> np.ndarray:
    """Signed outward offsets (v' - v) . d after index-aligned resampling."""
    n = n or max(len(matched), len(gt_div))
    vp = resample_points(matched.points, n)
    v = resample_points(gt_div.points, n)
    c = resample_points(centerline.points, n)
    d = v - c
    d = d / np.maximum(np.hypot(d[:, 0], d[:, 1]), 1e-12)[:, None]
    return np.einsum("ij,ij->i", vp - v, d)


def directional_loss(pred: PredictedMap, spec: ObjectiveSpec) -> float:
    matched = match_boundary(pred, spec.gt_div)
    if matched is None:
        return -spec.alpha * spec.corridor * 2.0
    off = directional_offsets(matched, spec.gt_div, spec.centerline)
    l_out = float(np.mean(-np.maximum(off, 0.0)))
    l_in = float(np.mean(np.maximum(-off, 0.0)))
    return spec.alpha * l_out + spec.beta * l_in


def untargeted_loss(pred: PredictedMap, spec: ObjectiveSpec) -> float:
    total = 0.0
    for gt in (spec.gt_left, spec.gt_right):
        m = match_boundary(pred, gt)
        total += spec.miss_penalty if m is None else chamfer_fixed(m, gt)
    return -total


def predicted_sides(pred: PredictedMap, gt_left: Polyline2D, gt_right: Polyline2D):
    return match_boundary(pred, gt_left), match_boundary(pred, gt_right)


def curvature_gap(left: Polyline2D, right: Polyline2D, th: RuleThresholds) -> float:
    """The rule classifier's constrained max curvature difference (no length filter)."""
    if left.length < 1e-6 or right.length < 1e-6:
        return 0.0
    _, _, k_l, k_r, kb_l, kb_r = aligned_profiles(left, right, th)
    feasible = np.minimum(kb_l, kb_r) < th.kbar_thre
    if not feasible.any():
        return 0.0
    return float(np.max(np.abs(k_l - k_r)[feasible]))


def scene_flip_loss(pred: PredictedMap, spec: ObjectiveSpec) -> float:
    """to_symmetric: +dk, to_asymmetric: -dk. A missing side scores miss_penalty."""
    left = spec.gt_left
    right = spec.gt_right
    if left is not None and right is not None:
        pl, pr = predicted_sides(pred, left, right)
    else:
        b = sorted(pred.boundaries(), key=lambda p: float(p.points[:, 0].mean()))
        pl, pr = (b[0], b[-1]) if len(b) >= 2 else (None, None)
    if pl is None or pr is None or pl is pr:
        return spec.miss_penalty
    dk = curvature_gap(pl, pr, spec.thresholds)
    return dk if spec.flip_direction == "to_symmetric" else -dk


def evaluate_objective(pred: PredictedMap, spec: ObjectiveSpec) -> float:
    if spec.kind == "straighten":
        return straightening_loss(pred, spec)
    if spec.kind == "early_turn":
        return directional_loss(pred, spec)
    if spec.kind == "untargeted":
        return untargeted_loss(pred, spec)
    return scene_flip_loss(pred, spec)


def build_objective(kind: str, frame, verdict=None, *, alpha: float = 1.0, beta: float = 1.0,
                    flip_direction: str | None = None, miss_penalty: float = DEFAULT_MISS_PENALTY,
                    corridor: float = 1.0, thresholds: RuleThresholds | None = None) -> ObjectiveSpec:
    """Objective for ``frame``; straighten/early_turn need an asymmetric rule verdict."""
    th = thresholds or RuleThresholds()
    common = dict(alpha=alpha, beta=beta, miss_penalty=miss_penalty, corridor=corridor, thresholds=th,
                  gt_left=frame.left_boundary, gt_right=frame.right_boundary)
    if kind in ("straighten", "early_turn"):
        if verdict is None or not verdict.is_asymmetric:
            raise ConfigError(f"objective {kind!r} needs an asymmetric verdict with anchors")
        div = frame.left_boundary if verdict.diverging_side == "left" else frame.right_boundary
        ref = frame.right_boundary if verdict.diverging_side == "left" else frame.left_boundary
        if kind == "straighten":
            tgt = make_straightening_target(div, ref, verdict.anchors[0])
            return ObjectiveSpec("straighten", target=tgt.polyline, gt_div=div, centerline=frame.centerline,
                                 **common)
        return ObjectiveSpec("early_turn", gt_div=div, centerline=frame.centerline, **common)
    if kind == "scene_flip":
        direction = flip_direction or ("to_symmetric" if verdict is not None and verdict.is_asymmetric
                                       else "to_asymmetric")
        return ObjectiveSpec("scene_flip", flip_direction=direction, **common)
    return ObjectiveSpec(kind, **common)
