"""Physical attack simulation: flashlight flare and adversarial patches."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .camera import NEAR_DEPTH, CameraModel, CameraRig
from .errors import ConfigError, PatchBoundsError

log = logging.getLogger(__name__)

WARM_WHITE = (1.0, 0.96, 0.88)
SATURATION_ALPHA = 0.9


@dataclass(frozen=True)
class FlashlightSpec:
    """Flare model constants.

    Peak alpha ``A = min(1, (reference_distance / d)^2)``; Gaussian sigma
    ``r0 * max(1, ln(lumens / (d^2 * l_min)))`` pixels. The defaults make a
    3000 lm source on the optical axis at 5 m push alpha above 0.9 over about
    15% of a 400x300 view.
    """

    lumens: float = 3000.0
    beam_angle: float = 40.0
    color: tuple[float, float, float] = WARM_WHITE
    reference_distance: float = 8.0
    r0: float = 45.0
    l_min: float = 4.0
    veil_fraction: float = 1.0 / 8.0

    def __post_init__(self):
        if not self.lumens > 0:
            raise ConfigError("lumens must be > 0")
        if not 0 < self.beam_angle <= 180:
            raise ConfigError("beam_angle must lie in (0, 180]")
        if not (self.reference_distance > 0 and self.r0 > 0 and self.l_min > 0):
            raise ConfigError("flare constants must be positive")

    def peak_alpha(self, d: float) -> float:
        return min(1.0, (self.reference_distance / d) ** 2)

    def radius_px(self, d: float) -> float:
        return self.r0 * max(1.0, math.log(self.lumens / (d * d * self.l_min)))

    def to_dict(self) -> dict:
        return {"lumens": self.lumens, "beam_angle": self.beam_angle, "color": list(self.color),
                "reference_distance": self.reference_distance, "r0": self.r0, "l_min": self.l_min,
                "veil_fraction": self.veil_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "FlashlightSpec":
        d = dict(d)
        if "color" in d:
            d["color"] = tuple(d["color"])
        return cls(**d)


def flare_alpha(cam: CameraModel, p, spec: FlashlightSpec) -> np.ndarray | None:
    """Per-pixel flare alpha for one camera, or None when the camera is untouched."""
    p = np.asarray(p, dtype=float)
    v = p - cam.position
    d = float(np.linalg.norm(v))
    if d < 1e-6:
        return None
    cos_angle = float(np.dot(v, cam.optical_axis) / d)
    angle = math.degrees(math.acos(max(-1.0, min(1.0, cos_angle))))
    if angle > spec.beam_angle / 2 + math.degrees(cam.half_hfov):
        return None
    uv = cam.project(p)
    if uv is None:
        return None
    A = spec.peak_alpha(d)
    sigma = spec.radius_px(d)
    gu = np.exp(-((np.arange(cam.width) - uv[0]) ** 2) / (2 * sigma * sigma)).astype(np.float32)
    gv = np.exp(-((np.arange(cam.height) - uv[1]) ** 2) / (2 * sigma * sigma)).astype(np.float32)
    veil = A * spec.veil_fraction
    # 1 - (1 - A g)(1 - veil), in float32
    a = np.outer(gv, gu)
    a *= np.float32(A * (1.0 - veil))
    a += np.float32(veil)
    return a


def render_flare(images: dict, rig: CameraRig, p, spec: FlashlightSpec | None = None) -> dict:
    """Composite a flare from a light at world point ``p`` into every camera that sees it.

    Untouched cameras keep their original array objects.
    """
    spec = spec or FlashlightSpec()
    color = np.asarray(spec.color, dtype=np.float32)
    out = dict(images)
    for cam in rig:
        alpha = flare_alpha(cam, p, spec)
        if alpha is None:
            continue
        a = alpha[..., None]
        img = images[cam.id]
        # convex blend of values in [0, 1]; no clip needed
        res = img + a * (color - img)
        res.setflags(write=False)
        out[cam.id] = res
    return out


@dataclass(frozen=True, eq=False)
class PatchSpec:
    """Planar patch. Pattern row 0 is the bottom edge; column 0 is the -u side."""

    center: tuple[float, float, float]
    width: float = 3.0
    height: float = 2.0
    alpha: float = 0.0
    pattern: np.ndarray = field(default_factory=lambda: np.full((16, 24, 3), 0.5, dtype=np.float32))
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ConfigError("patch width and height must be > 0")
        pat = np.clip(np.asarray(self.pattern, dtype=np.float32), 0.0, 1.0)
        if pat.ndim != 3 or pat.shape[2] != 3:
            raise ConfigError(f"pattern must be h x w x 3, got {pat.shape}")
        mask = np.ones(pat.shape[:2], dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        if mask.shape != pat.shape[:2]:
            raise ConfigError("mask shape must match pattern")
        object.__setattr__(self, "pattern", pat)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pattern.shape[:2]

    def with_pattern(self, pattern: np.ndarray) -> "PatchSpec":
        return PatchSpec(self.center, self.width, self.height, self.alpha, pattern, self.mask)

    def with_center(self, center) -> "PatchSpec":
        return PatchSpec(tuple(center), self.width, self.height, self.alpha, self.pattern, self.mask)

    def to_dict(self) -> dict:
        return {"W": self.width, "H": self.height, "alpha": self.alpha, "center": list(self.center)}


def patch_local_matrix(spec: PatchSpec) -> np.ndarray:
    """4x3 map from (u_p, v_p, 1) to homogeneous patch-frame coordinates (y up)."""
    h, w = spec.shape
    ca, sa = math.cos(spec.alpha), math.sin(spec.alpha)
    px, py, pz = spec.center
    rot_t = np.array([[ca, 0.0, -sa, px], [0.0, 1.0, 0.0, pz], [sa, 0.0, ca, py], [0.0, 0.0, 0.0, 1.0]])
    scale = np.array([[spec.width / w, 0.0, -spec.width / 2], [0.0, spec.height / h, -spec.height / 2],
                      [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    return rot_t @ scale


# patch frame (x, y-up, z) -> world (x right, y forward, z up)
_FRAME_TO_WORLD = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


def patch_plane_matrix(spec: PatchSpec) -> np.ndarray:
    """3x3 affine map from (u_p, v_p, 1) to world coordinates."""
    return _FRAME_TO_WORLD @ patch_local_matrix(spec)[:3]


def patch_pixel_to_world(spec: PatchSpec, u_p: float, v_p: float) -> np.ndarray:
    h, w = spec.shape
    if not (0 <= u_p < w and 0 <= v_p < h):
        raise PatchBoundsError(f"patch pixel ({u_p}, {v_p}) outside [0, {w}) x [0, {h})")
    return patch_plane_matrix(spec) @ np.array([u_p, v_p, 1.0])


def patch_corners_world(spec: PatchSpec) -> np.ndarray:
    h, w = spec.shape
    uv1 = np.array([[0, 0, 1], [w, 0, 1], [w, h, 1], [0, h, 1]], dtype=float)
    return uv1 @ patch_plane_matrix(spec).T


def _patch_homography(cam: CameraModel, spec: PatchSpec) -> np.ndarray:
    A = patch_plane_matrix(spec)
    M = cam.R @ A
    M[:, 2] += cam.T
    return cam.K @ M


def _quad_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def patch_coverage(cam: CameraModel, spec: PatchSpec):
    """Pixel rows/cols covered by the patch and their patch coordinates, or None."""
    corners = patch_corners_world(spec)
    uv, depth, _ = cam.project_many(corners)
    front = depth > NEAR_DEPTH
    if front.sum() < 3:
        return None
    if front.all():
        if _quad_area(uv) < 1.0:
            log.info("patch skipped for %s: degenerate projected quad", cam.id)
            return None
        lo = np.floor(uv.min(axis=0)).astype(int)
        hi = np.ceil(uv.max(axis=0)).astype(int)
        c0, r0 = max(lo[0], 0), max(lo[1], 0)
        c1, r1 = min(hi[0], cam.width - 1), min(hi[1], cam.height - 1)
    else:
        c0, r0, c1, r1 = 0, 0, cam.width - 1, cam.height - 1
    if c1 < c0 or r1 < r0:
        return None
    Hinv = np.linalg.inv(_patch_homography(cam, spec))
    vv, uu = np.mgrid[r0:r1 + 1, c0:c1 + 1].astype(float)
    q = np.einsum("ij,jhw->ihw", Hinv, np.stack([uu, vv, np.ones_like(uu)]))
    ok = q[2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(ok, q[0] / q[2], -1.0)
        vp = np.where(ok, q[1] / q[2], -1.0)
    h, w = spec.shape
    inside = ok & (up >= 0) & (up < w) & (vp >= 0) & (vp < h)
    if not inside.any():
        return None
    rows, cols = np.nonzero(inside)
    return rows + r0, cols + c0, up[inside], vp[inside]


@dataclass(frozen=True)
class PatchFootprint:
    """Pattern-independent part of a patch composite for one camera."""

    cam_id: str
    rows: np.ndarray
    cols: np.ndarray
    map_x: np.ndarray   # (n, 1) float32 pattern sample coordinates for cv2.remap
    map_y: np.ndarray


def patch_footprints(rig: CameraRig, spec: PatchSpec) -> list[PatchFootprint]:
    """Footprints of the masked patch in every camera that sees it."""
    out = []
    if not spec.mask.any():
        return out
    for cam in rig:
        cov = patch_coverage(cam, spec)
        if cov is None:
            continue
        rows, cols, up, vp = cov
        m = spec.mask[vp.astype(int), up.astype(int)]
        if not m.any():
            continue
        out.append(PatchFootprint(cam.id, rows[m], cols[m], (up[m] - 0.5).astype(np.float32).reshape(-1, 1),
                                  (vp[m] - 0.5).astype(np.float32).reshape(-1, 1)))
    return out


def composite_footprints(images: dict, footprints: list[PatchFootprint], pattern: np.ndarray) -> dict:
    out = dict(images)
    pattern = np.asarray(pattern, dtype=np.float32)
    for fp in footprints:
        vals = cv2.remap(pattern, fp.map_x, fp.map_y, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        img = np.array(images[fp.cam_id], dtype=np.float32, copy=True)
        img[fp.rows, fp.cols] = np.clip(vals.reshape(-1, 3), 0.0, 1.0)
        img.setflags(write=False)
        out[fp.cam_id] = img
    return out


def composite_patch(images: dict, rig: CameraRig, spec: PatchSpec) -> dict:
    return composite_footprints(images, patch_footprints(rig, spec), spec.pattern)


@dataclass(frozen=True, eq=False)
class AttackConfig:
    kind: str
    position: tuple[float, float, float]
    patch: PatchSpec | None = None
    flashlight: FlashlightSpec | None = None

    def __post_init__(self):
        if self.kind not in ("blinding", "patch"):
            raise ConfigError(f"attack kind must be 'blinding' or 'patch', got {self.kind!r}")
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ConfigError("attack position must be a finite 3D point")
        object.__setattr__(self, "position", pos)
        if self.kind == "blinding" and self.flashlight is None:
            object.__setattr__(self, "flashlight", FlashlightSpec())
        if self.kind == "patch":
            if self.patch is None:
                object.__setattr__(self, "patch", PatchSpec(pos))
            elif tuple(self.patch.center) != pos:
                object.__setattr__(self, "patch", self.patch.with_center(pos))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "position": list(self.position)}
        if self.kind == "blinding":
            d["flashlight"] = self.flashlight.to_dict()
        else:
            d["patch"] = self.patch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, pattern: np.ndarray | None = None, mask: np.ndarray | None = None) -> "AttackConfig":
        if d["kind"] == "blinding":
            return cls("blinding", tuple(d["position"]), flashlight=FlashlightSpec.from_dict(d.get("flashlight", {})))
        p = d.get("patch", {})
        kw = {} if pattern is None else {"pattern": pattern}
        spec = PatchSpec(tuple(d["position"]), p.get("W", 3.0), p.get("H", 2.0), p.get("alpha", 0.0), mask=mask, **kw)
        return cls("patch", tuple(d["position"]), patch=spec)


def apply_attack(images: dict, rig: CameraRig, cfg: AttackConfig) -> dict:
    if cfg.kind == "blinding":
        return render_flare(images, rig, cfg.position, cfg.flashlight)
    return composite_patch(images, rig, cfg.patch)


def save_patch(spec: PatchSpec, directory) -> Path:
    """Pattern PNG (row 0 written as the image's top row) plus a JSON sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(spec.pattern * 255).astype(np.uint8)).save(d / "pattern.png")
    Image.fromarray(spec.mask.astype(np.uint8) * 255).save(d / "mask.png")
    (d / "patch.json").write_text(json.dumps(spec.to_dict(), indent=1))
    return d / "patch.json"


def load_patch(directory) -> PatchSpec:
    d = Path(directory)
    meta = json.loads((d / "patch.json").read_text())
    with Image.open(d / "pattern.png") as im:
        pattern = np.asarray(im.convert("RGB")).astype(np.float32) / np.float32(255.0)
    mask = None
    if (d / "mask.png").exists():
        with Image.open(d / "mask.png") as im:
            mask = np.asarray(im.convert("L")) > 127
    return PatchSpec(tuple(meta["center"]), meta["W"], meta["H"], meta["alpha"], pattern, mask)


def occlude_ground(images: dict, rig: CameraRig, center, radius: float, color=None) -> dict:
    """Paint the ground disc of ``radius`` around BEV point ``center`` in a flat color.

    A stand-in for an opaque occluder: every pixel whose ground intersection lies
    in the disc takes ``color`` (the renderer's road color by default).
    """
    if radius <= 0:
        raise ConfigError("occlusion radius must be > 0")
    from .render import RenderConfig

    color = np.asarray(RenderConfig().ground_color if color is None else color, dtype=np.float32)
    cx, cy = float(center[0]), float(center[1])
    out = dict(images)
    for cam in rig:
        rays = cam.pixel_rays()
        down = rays[..., 2] < -1e-9
        t = np.where(down, -cam.position[2] / np.where(down, rays[..., 2], -1.0), np.inf)
        gx = cam.position[0] + t * rays[..., 0]
        gy = cam.position[1] + t * rays[..., 1]
        hit = down & (np.hypot(gx - cx, gy - cy) <= radius)
        if not hit.any():
            continue
        img = np.array(images[cam.id], dtype=np.float32)
        img[hit] = color
        img.setflags(write=False)
        out[cam.id] = img
    return out
