"""Painter's-algorithm rasterizer for surround views.

Ground and sky are flat fills split at the horizon; map elements are drawn
as fixed-width strokes of their ground-plane projection. Output pixels are
quantized to multiples of 1/255 so PNG storage is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .camera import CameraModel
from .scene import SceneFrame

_SHIFT = 4
_SCALE = 1 << _SHIFT
_COORD_LIMIT = 1e5


@dataclass(frozen=True)
class RenderConfig:
    ground_color: tuple[float, float, float] = (0.35, 0.35, 0.35)
    sky_color: tuple[float, float, float] = (0.55, 0.70, 0.90)
    curb_color: tuple[float, float, float] = (0.92, 0.92, 0.92)
    divider_color: tuple[float, float, float] = (0.85, 0.80, 0.30)
    ped_color: tuple[float, float, float] = (0.90, 0.90, 0.90)
    curb_px: int = 3
    divider_px: int = 2
    ped_px: int = 2
    sample_step: float = 0.25
    near_clip: float = 0.5


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / np.float32(255.0))


def _background(cam: CameraModel, cfg: RenderConfig) -> np.ndarray:
    rays = cam.pixel_rays()
    below = rays[..., 2] < 0
    img = np.empty((cam.height, cam.width, 3), dtype=np.float32)
    img[below] = cfg.ground_color
    img[~below] = cfg.sky_color
    return img


def _densify(points: np.ndarray, step: float) -> np.ndarray:
    out = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        t = (np.arange(1, n + 1) / n)[:, None]
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _visible_runs(cam: CameraModel, pts2d: np.ndarray, near: float) -> list[np.ndarray]:
    """Split the projected polyline into runs in front of the near plane."""
    w = np.column_stack([pts2d, np.zeros(len(pts2d))])
    pc = cam.to_camera(w)
    runs, cur = [], []
    for i in range(len(pc)):
        if pc[i, 2] > near:
            if not cur and i > 0 and pc[i - 1, 2] <= near:
                cur.append(_clip_near(pc[i - 1], pc[i], near))
            cur.append(pc[i])
        elif cur:
            cur.append(_clip_near(pc[i - 1], pc[i], near))
            runs.append(np.array(cur))
            cur = []
    if cur:
        runs.append(np.array(cur))
    out = []
    for run in runs:
        if len(run) < 2:
            continue
        u = cam.fx * run[:, 0] / run[:, 2] + cam.cx
        v = cam.fy * run[:, 1] / run[:, 2] + cam.cy
        out.append(np.column_stack([u, v]))
    return out


def _clip_near(p_in_or_out, p_other, near: float) -> np.ndarray:
    a, b = p_in_or_out, p_other
    t = (near - a[2]) / (b[2] - a[2])
    return a + t * (b - a)


def _stroke(img: np.ndarray, cam: CameraModel, pts2d: np.ndarray, color, width: int, cfg: RenderConfig):
    for uv in _visible_runs(cam, _densify(pts2d, cfg.sample_step), cfg.near_clip):
        fixed = np.round(np.clip(uv, -_COORD_LIMIT, _COORD_LIMIT) * _SCALE).astype(np.int32)
        cv2.polylines(img, [fixed.reshape(-1, 1, 2)], False, tuple(float(c) for c in color),
                      thickness=width, lineType=cv2.LINE_8, shift=_SHIFT)


def render_camera(frame: SceneFrame, cam: CameraModel, cfg: RenderConfig) -> np.ndarray:
    img = _background(cam, cfg)
    order = (("divider", cfg.divider_color, cfg.divider_px),
             ("ped_crossing", cfg.ped_color, cfg.ped_px),
             ("boundary", cfg.curb_color, cfg.curb_px))
    for tag, color, width in order:
        for el in frame.gt_map:
            if el.class_tag == tag:
                _stroke(img, cam, el.points, color, width, cfg)
    return quantize(img)


def render_surround_views(frame: SceneFrame, config: RenderConfig | None = None) -> SceneFrame:
    cfg = config or RenderConfig()
    images = {cam.id: render_camera(frame, cam, cfg) for cam in frame.rig}
    return frame.with_images(images)


def luminance(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
