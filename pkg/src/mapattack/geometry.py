"""Polyline geometry in the BEV ego frame (x right, y forward, meters)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientPointsError, InvalidGeometryError

CLASS_TAGS = ("boundary", "divider", "ped_crossing")
MIN_SPACING = 1e-9
FIXED_POINTS = 20


def _as_points(obj) -> np.ndarray:
    if isinstance(obj, Polyline2D):
        return obj.points
    pts = np.asarray(obj, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidGeometryError(f"expected (n, 2) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class Polyline2D:
    points: np.ndarray
    class_tag: str = "boundary"
    _len: float = field(default=0.0, init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidGeometryError(f"expected (n, 2) points, got shape {pts.shape}")
        if len(pts) < 2:
            raise InvalidGeometryError("a polyline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise InvalidGeometryError("non-finite coordinate")
        seg = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(seg <= MIN_SPACING):
            raise InvalidGeometryError("consecutive points coincide")
        if self.class_tag not in CLASS_TAGS:
            raise InvalidGeometryError(f"unknown class tag {self.class_tag!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_len", float(seg.sum()))

    @classmethod
    def clean(cls, points, class_tag: str = "boundary") -> "Polyline2D":
        """Build from raw points, dropping consecutive duplicates."""
        pts = np.asarray(points, dtype=float)
        if len(pts) == 0:
            raise InvalidGeometryError("empty polyline")
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.hypot(*np.diff(pts, axis=0).T) > MIN_SPACING
        return cls(pts[keep], class_tag)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polyline2D):
            return NotImplemented
        return self.class_tag == other.class_tag and np.array_equal(self.points, other.points)

    @property
    def length(self) -> float:
        return self._len

    def translated(self, t) -> "Polyline2D":
        return Polyline2D(self.points + np.asarray(t, dtype=float), self.class_tag)

    def transformed(self, angle: float, t=(0.0, 0.0)) -> "Polyline2D":
        return Polyline2D(rigid_transform(self.points, angle, t), self.class_tag)

    def reversed(self) -> "Polyline2D":
        return Polyline2D(self.points[::-1], self.class_tag)

    def to_list(self) -> list[list[float]]:
        return self.points.tolist()


def rigid_transform(points, angle: float, t=(0.0, 0.0)) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return _as_points(points) @ rot.T + np.asarray(t, dtype=float)


def cumulative_length(points) -> np.ndarray:
    pts = _as_points(points)
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])


def resample_points(points, n: int) -> np.ndarray:
    """n points at equal arc-length spacing along the input polyline."""
    if n < 2:
        raise InvalidGeometryError(f"resample needs n >= 2, got {n}")
    pts = _as_points(points)
    s = cumulative_length(pts)
    total = s[-1]
    if total < MIN_SPACING:
        raise InvalidGeometryError("degenerate polyline (zero length)")
    targets = np.linspace(0.0, total, n)
    out = np.column_stack([np.interp(targets, s, pts[:, 0]), np.interp(targets, s, pts[:, 1])])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def resample_polyline(poly: Polyline2D, n: int) -> Polyline2D:
    return Polyline2D(resample_points(poly.points, n), poly.class_tag)


def resample_spacing(points, spacing: float) -> np.ndarray:
    """Resample so consecutive points sit roughly ``spacing`` apart."""
    total = cumulative_length(points)[-1]
    n = max(2, int(np.ceil(total / spacing)) + 1)
    return resample_points(points, n)


def pointwise_curvature(poly) -> np.ndarray:
    """|x'y'' - y'x''| / (x'^2 + y'^2)^1.5 with arc-length finite differences."""
    pts = _as_points(poly)
    if len(pts) < 3:
        raise InsufficientPointsError(f"curvature needs >= 3 points, got {len(pts)}")
    s = cumulative_length(pts)
    if np.any(np.diff(s) <= MIN_SPACING):
        raise InvalidGeometryError("consecutive points coincide")
    edge = 2 if len(pts) >= 3 else 1
    dx = np.gradient(pts[:, 0], s, edge_order=edge)
    dy = np.gradient(pts[:, 1], s, edge_order=edge)
    ddx = np.gradient(dx, s, edge_order=edge)
    ddy = np.gradient(dy, s, edge_order=edge)
    denom = np.power(dx * dx + dy * dy, 1.5)
    return np.abs(dx * ddy - dy * ddx) / np.maximum(denom, 1e-300)


def regional_curvature(pointwise, window_len: int = 5) -> np.ndarray:
    """Centered sliding-window mean; windows are truncated at the ends."""
    k = np.asarray(pointwise, dtype=float)
    if window_len < 1 or window_len % 2 == 0:
        raise InvalidGeometryError(f"window_len must be odd and >= 1, got {window_len}")
    if window_len == 1 or len(k) == 0:
        return k.copy()
    half = window_len // 2
    csum = np.concatenate([[0.0], np.cumsum(k)])
    idx = np.arange(len(k))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(k))
    return (csum[hi] - csum[lo]) / (hi - lo)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def chamfer_distance(a, b) -> float:
    """Symmetric point-set Chamfer: mean of both directed mean-nearest distances."""
    pa, pb = _as_point_set(a), _as_point_set(b)
    d = _pairwise(pa, pb)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def _as_point_set(obj) -> np.ndarray:
    if isinstance(obj, Polyline2D):
        return obj.points
    pts = np.asarray(obj, dtype=float).reshape(-1, 2) if np.size(obj) else np.zeros((0, 2))
    if len(pts) == 0:
        raise InvalidGeometryError("empty point set")
    return pts


def chamfer_fixed(a, b, n: int = FIXED_POINTS) -> float:
    """Chamfer after resampling both polylines to the fixed element cardinality."""
    return chamfer_distance(resample_points(_as_points(a), n), resample_points(_as_points(b), n))


def point_segment_distance(p, a, b) -> np.ndarray:
    """Distance from points p (m, 2) to each segment a[i]-b[i]; returns (m, k)."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("mij,ij->mi", ap, ab) / np.maximum(denom, 1e-300), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.hypot(*(p[:, None, :] - closest).transpose(2, 0, 1))


def point_to_polyline_distance(p, poly) -> np.ndarray:
    pts = _as_points(poly)
    d = point_segment_distance(p, pts[:-1], pts[1:])
    return d.min(axis=1)


def project_onto_polyline(p, poly) -> tuple[float, float]:
    """Arc-length position of the closest point and signed lateral offset.

    Positive offset means p lies to the left of the polyline direction.
    """
    pts = _as_points(poly)
    p = np.asarray(p, dtype=float)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    seg_len = np.hypot(ab[:, 0], ab[:, 1])
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / seg_len**2, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d = np.hypot(*(p - closest).T)
    i = int(np.argmin(d))
    s = cumulative_length(pts)[i] + t[i] * seg_len[i]
    cross = ab[i, 0] * (p[1] - a[i, 1]) - ab[i, 1] * (p[0] - a[i, 0])
    return float(s), float(np.copysign(d[i], cross) if d[i] > 0 else 0.0)


def tangents(points) -> np.ndarray:
    """Unit tangents at vertices (central differences, one-sided at ends)."""
    pts = _as_points(points)
    t = np.gradient(pts, axis=0)
    return t / np.maximum(np.hypot(t[:, 0], t[:, 1]), 1e-300)[:, None]


def left_normals(points) -> np.ndarray:
    t = tangents(points)
    return np.column_stack([-t[:, 1], t[:, 0]])


def orientation(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def segments_intersect(p1, p2, q1, q2, tol: float = 1e-6) -> bool:
    """Closed segment intersection; touching within ``tol`` meters counts."""
    p1, p2, q1, q2 = (np.asarray(v, dtype=float) for v in (p1, p2, q1, q2))
    d1 = orientation(q1, q2, p1)
    d2 = orientation(q1, q2, p2)
    d3 = orientation(p1, p2, q1)
    d4 = orientation(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 < 0 and d3 * d4 < 0:
        return True
    ends = point_segment_distance(np.array([p1, p2]), q1[None], q2[None]).ravel()
    ends2 = point_segment_distance(np.array([q1, q2]), p1[None], p2[None]).ravel()
    return bool(min(ends.min(), ends2.min()) <= tol)


def polygon_intersects_polyline(polygon, polyline, tol: float = 1e-6) -> bool:
    """True when the closed polygon (edges or interior) touches the polyline."""
    poly = np.asarray(polygon, dtype=float)
    line = _as_points(polyline)
    edges_a = poly
    edges_b = np.roll(poly, -1, axis=0)
    if point_in_polygon(line[0], poly):
        return True
    # bounding-box prefilter on polyline segments
    lo = poly.min(axis=0) - tol
    hi = poly.max(axis=0) + tol
    sa, sb = line[:-1], line[1:]
    smin = np.minimum(sa, sb)
    smax = np.maximum(sa, sb)
    cand = np.nonzero(np.all(smax >= lo, axis=1) & np.all(smin <= hi, axis=1))[0]
    for i in cand:
        for a, b in zip(edges_a, edges_b):
            if segments_intersect(sa[i], sb[i], a, b, tol):
                return True
        if point_in_polygon(sa[i], poly) or point_in_polygon(sb[i], poly):
            return True
    return False


def point_in_polygon(p, polygon) -> bool:
    x, y = float(p[0]), float(p[1])
    poly = np.asarray(polygon, dtype=float)
    inside = False
    n = len(poly)
    j = n - 1
    for i in range(n):
        xi, yi = poly[i]
        xj, yj = poly[j]
        if (yi > y) != (yj > y):
            xc = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < xc:
                inside = not inside
        j = i
    return inside


def mirror_reference(div, ref, k: int) -> tuple[np.ndarray, float, bool]:
    """Diverging-boundary points up to index k, then the reference boundary
    shifted toward the diverging side by the mean pre-anchor road width.

    Returns (points, w_avg, truncated); ``truncated`` is set when the
    reference has no points beyond the anchor.
    """
    d = _as_points(div)
    r = _as_points(ref)
    k = int(np.clip(k, 0, len(d) - 1))
    pre = d[:k + 1]
    w_avg = float(point_to_polyline_distance(pre, r).mean())
    s_a, lateral = project_onto_polyline(d[k], r)
    sign = 1.0 if lateral >= 0 else -1.0
    s_ref = cumulative_length(r)
    beyond = s_ref > s_a + 1e-9
    if not beyond.any():
        return pre.copy(), w_avg, True
    shifted = r[beyond] + sign * w_avg * left_normals(r)[beyond]
    out = np.vstack([pre, shifted])
    keep = np.ones(len(out), dtype=bool)
    keep[1:] = np.hypot(*np.diff(out, axis=0).T) > MIN_SPACING
    return out[keep], w_avg, False
