"""Deterministic symmetry-biased surrogate for a vectorized map model.

Ground-truth geometry serves as the prior. Each prior point is checked for
image edge evidence in its best-facing camera:

* enough evidence: the point snaps to the strongest-evidence lateral offset
  within the corridor;
* isolated loss: the point is interpolated from its neighbours; lost runs at
  the end of a road boundary or divider follow the opposite boundary at the
  local width;
* loss around an asymmetry anchor: the post-anchor part of the diverging
  boundary is replaced by the opposite boundary shifted by the local road
  width, i.e. the model falls back to a symmetric layout.

This is a stand-in with the attack-relevant failure modes built in
explicitly; it makes no claim about the internals of any real network.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import cv2
import numpy as np

from ..classify import RuleThresholds, classify_rule_based
from ..errors import ConfigError
from ..geometry import (FIXED_POINTS, Polyline2D, cumulative_length, left_normals, mirror_reference,
                        resample_points, resample_spacing)
from ..render import luminance
from .base import PredictedElement, PredictedMap

MIN_DEPTH = 0.5


@dataclass(frozen=True)
class SurrogateParams:
    evidence_window: int = 7
    evidence_thre: float = 0.5
    corridor: float = 1.0
    snap_step: float = 0.25
    mirror_window: float = 4.0
    occlusion_fraction_thre: float = 0.6
    sample_spacing: float = 0.5
    soft_tau: float = 0.05
    snap_tolerance: float = 0.02
    n_points: int = FIXED_POINTS

    def __post_init__(self):
        if self.evidence_window < 1:
            raise ConfigError("evidence_window must be >= 1")
        for name in ("evidence_thre", "corridor", "snap_step", "mirror_window", "sample_spacing", "soft_tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.snap_tolerance < 0:
            raise ConfigError("snap_tolerance must be >= 0")
        if not 0 < self.occlusion_fraction_thre <= 1:
            raise ConfigError("occlusion_fraction_thre must lie in (0, 1]")


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    L = luminance(np.asarray(img, dtype=np.float32)) if np.ndim(img) == 3 else np.asarray(img, dtype=np.float32)
    gy, gx = np.gradient(L)
    return cv2.magnitude(gx, gy)


def evidence_map(img: np.ndarray, window: int = 7) -> np.ndarray:
    """Windowed mean gradient magnitude times ``window``, clipped to [0, 1].

    The scale makes an ideal 0-to-1 step through the window center score 1.
    Windows are clipped at the image border.
    """
    g = gradient_magnitude(img)
    s = cv2.boxFilter(g, -1, (window, window), normalize=False, borderType=cv2.BORDER_CONSTANT)
    s *= _inverse_counts(g.shape, window)
    return np.clip(s, 0.0, 1.0, out=s)


@lru_cache(maxsize=16)
def _inverse_counts(shape: tuple[int, int], window: int) -> np.ndarray:
    """window / (in-image pixel count of each window)."""
    c = cv2.boxFilter(np.ones(shape, np.float32), -1, (window, window), normalize=False,
                      borderType=cv2.BORDER_CONSTANT)
    out = (window / c).astype(np.float32)
    out.setflags(write=False)
    return out


def edge_evidence(img: np.ndarray, pixel, window: int = 7) -> float:
    """Evidence at one pixel (u, v); direct window computation."""
    g = gradient_magnitude(img)
    u, v = int(round(pixel[0])), int(round(pixel[1]))
    h, w = g.shape
    if not (0 <= u < w and 0 <= v < h):
        raise IndexError(f"pixel {pixel} outside image {w}x{h}")
    half = window // 2
    patch = g[max(0, v - half):v + half + 1, max(0, u - half):u + half + 1]
    return float(np.clip(window * patch.mean(), 0.0, 1.0))


@dataclass
class _ElementPrep:
    dense: np.ndarray
    normals: np.ndarray
    arc: np.ndarray
    cam: np.ndarray          # (n,) camera index or -1
    rows: np.ndarray         # (n, m)
    cols: np.ndarray
    valid: np.ndarray
    class_tag: str


@dataclass
class _FramePrep:
    elements: list
    offsets: np.ndarray
    zero_idx: int
    div_idx: int | None
    ref_idx: int | None
    anchor_idx: list
    completion_refs: dict    # element index -> candidate reference element indices


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SurrogateModel:
    """Surrogate with per-frame geometry and per-image evidence caches."""

    def __init__(self, params: SurrogateParams | None = None, cache_size: int = 64,
                 thresholds: RuleThresholds | None = None):
        self.params = params or SurrogateParams()
        self.thresholds = thresholds or RuleThresholds()
        self._frames: OrderedDict = OrderedDict()
        self._evidence: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    # caches keep a reference to the keyed object so its id cannot be reused
    def _frame_prep(self, frame) -> _FramePrep:
        hit = self._frames.get(id(frame))
        if hit is not None and hit[0] is frame:
            return hit[1]
        prep = self._prepare(frame)
        self._frames[id(frame)] = (frame, prep)
        while len(self._frames) > 8:
            self._frames.popitem(last=False)
        return prep

    def evidence(self, img: np.ndarray) -> np.ndarray:
        key = id(img)
        hit = self._evidence.get(key)
        if hit is not None and hit[0] is img:
            self._evidence.move_to_end(key)
            return hit[1]
        ev = evidence_map(img, self.params.evidence_window)
        self._evidence[key] = (img, ev)
        while len(self._evidence) > self._cache_size:
            self._evidence.popitem(last=False)
        return ev

    def _prepare(self, frame) -> _FramePrep:
        p = self.params
        n_side = int(round(p.corridor / p.snap_step))
        raw = np.arange(-n_side, n_side + 1) * p.snap_step
        offsets = raw[np.lexsort((raw, np.abs(raw)))]
        cams = list(frame.rig)
        elements = []
        for el in frame.gt_map:
            dense = resample_spacing(el.points, p.sample_spacing)
            normals = left_normals(dense)
            n, m = len(dense), len(offsets)
            w0 = np.column_stack([dense, np.zeros(n)])
            best = np.full(n, -1)
            score = np.full(n, -np.inf)
            for ci, cam in enumerate(cams):
                uv, depth, vis = cam.project_many(w0)
                rays = w0 - cam.position
                facing = rays @ cam.optical_axis / np.linalg.norm(rays, axis=1)
                ok = vis & (depth > MIN_DEPTH) & (facing > score)
                best[ok] = ci
                score[ok] = facing[ok]
            rows = np.zeros((n, m), dtype=np.intp)
            cols = np.zeros((n, m), dtype=np.intp)
            valid = np.zeros((n, m), dtype=bool)
            for ci, cam in enumerate(cams):
                sel = np.flatnonzero(best == ci)
                if not len(sel):
                    continue
                pts = dense[sel, None, :] + offsets[None, :, None] * normals[sel, None, :]
                w = np.concatenate([pts.reshape(-1, 2), np.zeros((len(sel) * m, 1))], axis=1)
                uv, depth, vis = cam.project_many(w)
                uv = np.round(uv).reshape(len(sel), m, 2)
                vis = (vis & (depth > MIN_DEPTH)).reshape(len(sel), m)
                cols[sel] = np.where(vis, uv[..., 0], 0).astype(np.intp)
                rows[sel] = np.where(vis, uv[..., 1], 0).astype(np.intp)
                valid[sel] = vis
            elements.append(_ElementPrep(dense, normals, cumulative_length(dense), best, rows, cols, valid,
                                         el.class_tag))
        div_idx = ref_idx = None
        anchor_idx: list = []
        rv = classify_rule_based(frame.left_boundary, frame.right_boundary, self.thresholds)
        if rv.is_asymmetric:
            div_b = frame.left_boundary if rv.diverging_side == "left" else frame.right_boundary
            ref_b = frame.right_boundary if rv.diverging_side == "left" else frame.left_boundary
            div_idx = _find_element(frame.gt_map, div_b)
            ref_idx = _find_element(frame.gt_map, ref_b)
            if div_idx is not None and ref_idx is not None:
                dense = elements[div_idx].dense
                anchor_idx = sorted({int(np.argmin(np.hypot(*(dense - np.asarray(a)).T))) for a in rv.anchors})
        refs = _completion_refs(frame, elements)
        return _FramePrep(elements, offsets, int(np.flatnonzero(offsets == 0)[0]), div_idx, ref_idx, anchor_idx,
                          refs)

    def predict(self, frame, images: dict) -> PredictedMap:
        p = self.params
        prep = self._frame_prep(frame)
        cam_ids = [c.id for c in frame.rig]
        ev_maps: dict = {}
        results = []
        for el in prep.elements:
            n, m = el.rows.shape
            e_off = np.zeros((n, m))
            for ci in np.unique(el.cam[el.cam >= 0]):
                cid = cam_ids[ci]
                if cid not in ev_maps:
                    ev_maps[cid] = self.evidence(images[cid])
                sel = el.cam == ci
                e_off[sel] = np.where(el.valid[sel], ev_maps[cid][el.rows[sel], el.cols[sel]], 0.0)
            observed = el.cam >= 0
            e0 = e_off[:, prep.zero_idx]
            lost = observed & (e0 < p.evidence_thre)
            w_soft = np.where(observed, _sigmoid((p.evidence_thre - e0) / p.soft_tau), 0.0)
            # smallest |offset| within tolerance of the peak; far-range offsets share
            # pixels and near-equal scores would otherwise pick arbitrary sides
            near_peak = e_off >= e_off.max(axis=1, keepdims=True) - p.snap_tolerance
            best = np.argmax(near_peak, axis=1)
            snap = el.dense + prep.offsets[best][:, None] * el.normals
            pos = np.where((observed & ~lost)[:, None], snap, el.dense)
            keep = np.ones(n, dtype=bool)
            for i, j in _runs(lost):
                if i == 0 or j == n - 1:
                    keep[i:j + 1] = False
                    continue
                s0, s1 = el.arc[i - 1], el.arc[j + 1]
                t = ((el.arc[i:j + 1] - s0) / (s1 - s0))[:, None]
                interp = pos[i - 1] + t * (pos[j + 1] - pos[i - 1])
                w = w_soft[i:j + 1, None]
                pos[i:j + 1] = (1.0 - w) * el.dense[i:j + 1] + w * interp
            conf = float(np.clip(e0[observed].mean(), 0.0, 1.0)) if observed.any() else 0.0
            results.append({"pos": pos, "keep": keep, "lost": lost, "w_soft": w_soft, "conf": conf, "prep": el})
        self._complete_ends(prep, results)
        if prep.div_idx is not None and prep.anchor_idx:
            self._mirror_fallback(prep, results)
        out = []
        for r in results:
            pts = r["final"] if "final" in r else r["pos"][r["keep"]]
            poly = _to_polyline(pts, r["prep"].class_tag, p.n_points)
            if poly is not None:
                out.append(PredictedElement(poly, r["conf"]))
        return PredictedMap(tuple(out))

    def _complete_ends(self, prep: _FramePrep, results: list):
        """Lost end runs follow a reference element at the local width instead of vanishing."""
        p = self.params
        for idx, cands in prep.completion_refs.items():
            r = results[idx]
            if not r["keep"].any() or r["keep"].all():
                continue
            # reference: the candidate that kept the most evidence
            ref = max(cands, key=lambda j: (float(results[j]["keep"].mean()), -j))
            ref_pts = _oriented(prep.elements[ref].dense, r["prep"].dense)
            pts = r["pos"][r["keep"]]
            if not r["keep"][-1]:
                pts = _complete_tail(pts, ref_pts, p.mirror_window)
            if not r["keep"][0]:
                pts = _complete_tail(pts[::-1], ref_pts[::-1], p.mirror_window)[::-1]
            r["final"] = pts

    def _mirror_fallback(self, prep: _FramePrep, results: list):
        p = self.params
        div = results[prep.div_idx]
        ref = results[prep.ref_idx]
        el = div["prep"]
        for k in prep.anchor_idx:
            window = np.abs(el.arc - el.arc[k]) <= p.mirror_window
            frac = float(div["w_soft"][window].mean())
            if frac < p.occlusion_fraction_thre:
                continue
            # the reference prior, not its noisy prediction: normals of a kinked
            # polyline would skew the w_avg shift
            ref_pts = ref["prep"].dense
            # the continuation starts at the last observed point before the anchor;
            # interpolated points there already bend toward the lost turn
            pre_mask = div["keep"] & ~div["lost"]
            pre_mask[k + 1:] = False
            pre = div["pos"][pre_mask] if pre_mask.any() else el.dense[:1]
            target, _, _ = mirror_reference(pre, ref_pts, len(pre) - 1)
            div["final"] = target
            return


def _completion_refs(frame, elements) -> dict:
    """Designated boundaries pair with each other; dividers with both designated boundaries."""
    li = _find_element(frame.gt_map, frame.left_boundary)
    ri = _find_element(frame.gt_map, frame.right_boundary)
    if li is None or ri is None:
        return {}
    refs = {li: [ri], ri: [li]}
    for i, el in enumerate(elements):
        if el.class_tag == "divider":
            refs[i] = [li, ri]
    return refs


def _oriented(ref: np.ndarray, like: np.ndarray) -> np.ndarray:
    """``ref`` reversed when it runs against ``like``."""
    t_ref = ref[-1] - ref[0]
    t_like = like[-1] - like[0]
    return ref[::-1] if float(t_ref @ t_like) < 0 else ref


def _complete_tail(pts: np.ndarray, ref: np.ndarray, window: float) -> np.ndarray:
    """Continue ``pts`` along ``ref`` shifted by the width over the last ``window`` meters."""
    if len(pts) == 0:
        return pts
    s = cumulative_length(pts) if len(pts) > 1 else np.zeros(1)
    start = int(np.searchsorted(s, s[-1] - window))
    tail, _, _ = mirror_reference(pts[start:], ref, len(pts) - 1 - start)
    return np.vstack([pts[:start], tail])


def _runs(mask: np.ndarray):
    idx = np.flatnonzero(mask)
    if not len(idx):
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts.tolist(), ends.tolist()))


def _find_element(elements, target: Polyline2D) -> int | None:
    for i, e in enumerate(elements):
        if e is target or e == target:
            return i
    return None


def _to_polyline(pts: np.ndarray, tag: str, n: int) -> Polyline2D | None:
    if len(pts) < 2:
        return None
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.hypot(*np.diff(pts, axis=0).T) > 1e-9
    pts = pts[keep]
    if len(pts) < 2 or cumulative_length(pts)[-1] < 1e-6:
        return None
    return Polyline2D(resample_points(pts, n), tag)


def surrogate_predict(frame, images: dict, params: SurrogateParams | None = None) -> PredictedMap:
    """Pure surrogate prediction (fresh caches on every call)."""
    return SurrogateModel(params).predict(frame, images)


class SurrogateOracle:
    """MapOracle backed by the surrogate; counts one query per predict."""

    def __init__(self, params: SurrogateParams | None = None, model: SurrogateModel | None = None):
        self.params = params or SurrogateParams()
        self.model = model or SurrogateModel(self.params)
        self.query_count = 0

    def predict(self, frame, images: dict) -> PredictedMap:
        self.query_count += 1
        return self.model.predict(frame, images)

    def clone(self) -> "SurrogateOracle":
        return SurrogateOracle(self.params)
