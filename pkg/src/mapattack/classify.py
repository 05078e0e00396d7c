"""Rule-based asymmetry classification and anchor extraction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import (Polyline2D, chamfer_fixed, cumulative_length, pointwise_curvature, regional_curvature,
                       resample_points)

SYMMETRIC, ASYMMETRIC, NO_BOUNDARY = "symmetric", "asymmetric", "no_boundary"


@dataclass(frozen=True)
class RuleThresholds:
    dk_thre: float = 0.3
    kbar_thre: float = 0.15
    anchor_dk_thre: float | None = None
    window_len: int = 5
    spacing: float = 0.5
    min_length: float = 10.0

    def __post_init__(self):
        for name in ("dk_thre", "kbar_thre", "spacing"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.anchor_dk_thre is not None and not self.anchor_dk_thre > 0:
            raise ConfigError("anchor_dk_thre must be > 0")
        if self.window_len < 1 or self.window_len % 2 == 0:
            raise ConfigError("window_len must be odd and >= 1")

    @property
    def anchor_threshold(self) -> float:
        return self.dk_thre if self.anchor_dk_thre is None else self.anchor_dk_thre


@dataclass(frozen=True)
class RuleVerdict:
    label: str
    dk_max: float = 0.0
    anchors: tuple[tuple[float, float], ...] = ()
    diverging_side: str = "none"
    t_star: int | None = None
    anchor_indices: tuple[int, ...] = ()
    reason: str = ""
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def is_asymmetric(self) -> bool:
        return self.label == ASYMMETRIC

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "dk_max": self.dk_max,
            "anchors": [list(a) for a in self.anchors],
            "diverging_side": self.diverging_side,
            "t_star": self.t_star,
            "reason": self.reason,
        }


def _run_onsets(mask: np.ndarray) -> list[int]:
    on = np.flatnonzero(mask & ~np.concatenate([[False], mask[:-1]]))
    return [int(i) for i in on]


def aligned_profiles(left: Polyline2D, right: Polyline2D, th: RuleThresholds):
    """Resample both boundaries to a shared count and return (pl, pr, k_l, k_r, kb_l, kb_r)."""
    longest = max(left.length, right.length)
    # tolerance keeps n stable when the length is a float-noisy multiple of the spacing
    n = max(3, int(np.ceil(longest / th.spacing - 1e-9)) + 1)
    pl = resample_points(left.points, n)
    pr = resample_points(right.points, n)
    k_l, k_r = pointwise_curvature(pl), pointwise_curvature(pr)
    return pl, pr, k_l, k_r, regional_curvature(k_l, th.window_len), regional_curvature(k_r, th.window_len)


def classify_rule_based(left: Polyline2D | None, right: Polyline2D | None,
                        th: RuleThresholds | None = None) -> RuleVerdict:
    th = th or RuleThresholds()
    for name, b in (("left", left), ("right", right)):
        if b is None:
            return RuleVerdict(NO_BOUNDARY, reason=f"{name} boundary missing")
        if b.length < th.min_length:
            return RuleVerdict(NO_BOUNDARY, reason=f"{name} boundary shorter than {th.min_length} m")
    pl, pr, k_l, k_r, kb_l, kb_r = aligned_profiles(left, right, th)
    diff = np.abs(k_l - k_r)
    feasible = np.minimum(kb_l, kb_r) < th.kbar_thre
    extras = {"k_left": k_l, "k_right": k_r, "kbar_left": kb_l, "kbar_right": kb_r}
    if not feasible.any():
        return RuleVerdict(SYMMETRIC, 0.0, reason="both sides curved everywhere", extras=extras)
    masked = np.where(feasible, diff, -1.0)
    t_star = int(np.argmax(masked))
    dk = float(diff[t_star])
    if dk <= th.dk_thre:
        return RuleVerdict(SYMMETRIC, dk, t_star=t_star, extras=extras)
    side = "left" if kb_l[t_star] > kb_r[t_star] else "right"
    div = pl if side == "left" else pr
    onsets = _run_onsets(diff > th.anchor_threshold) or [t_star]
    anchors = tuple((float(div[i, 0]), float(div[i, 1])) for i in onsets)
    return RuleVerdict(ASYMMETRIC, dk, anchors, side, t_star, tuple(onsets), extras=extras)


def classify_frame(frame, th: RuleThresholds | None = None) -> RuleVerdict:
    return classify_rule_based(frame.left_boundary, frame.right_boundary, th)


def classify_prediction(pred, gt_left: Polyline2D, gt_right: Polyline2D, th: RuleThresholds | None = None
                        ) -> RuleVerdict:
    """Rule verdict on the predicted boundaries nearest (by Chamfer) to each GT side.

    One predicted boundary standing in for both sides counts as a missing side.
    """
    cands = pred.boundaries()
    if not cands:
        return classify_rule_based(None, None, th)
    left = min(cands, key=lambda b: chamfer_fixed(b, gt_left))
    right = min(cands, key=lambda b: chamfer_fixed(b, gt_right))
    if left is right:
        return classify_rule_based(left, None, th)
    return classify_rule_based(left, right, th)


def anchor_arc_positions(boundary: Polyline2D, anchors) -> list[float]:
    """Arc-length position along ``boundary`` of the vertex nearest each anchor."""
    s = cumulative_length(boundary.points)
    out = []
    for a in anchors:
        i = int(np.argmin(np.hypot(*(boundary.points - np.asarray(a)).T)))
        out.append(float(s[i]))
    return out


def audit_dataset_balance(labels) -> dict:
    """Counts of asymmetric frames. Accepts labels, booleans, or verdict objects."""
    n_total = n_asym = 0
    for item in labels:
        n_total += 1
        lab = getattr(item, "final_label", None) or getattr(item, "label", item)
        if lab is True or lab == ASYMMETRIC:
            n_asym += 1
    return {"n_total": n_total, "n_asym": n_asym, "fraction": (n_asym / n_total) if n_total else 0.0}
