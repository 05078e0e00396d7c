"""Pinhole cameras and the six-camera surround rig.

World frame: x right, y forward, z up (the BEV ego frame lifted to 3D).
Camera frame follows the OpenCV convention: x right, y down, z along the
optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

NEAR_DEPTH = 0.1


@dataclass(frozen=True, eq=False)
class CameraModel:
    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        T = np.array(self.T, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"camera {self.id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(f"camera {self.id}: principal point outside image")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ConfigError(f"camera {self.id}: rotation is not orthonormal")
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @classmethod
    def looking(cls, id: str, position, heading: float, *, pitch: float = 0.0,
                width: int = 400, height: int = 300, hfov_deg: float = 90.0) -> "CameraModel":
        """Camera at ``position`` whose optical axis has BEV heading ``heading``
        (radians from +x, counter-clockwise) and downward ``pitch``."""
        c, s = np.cos(heading), np.sin(heading)
        cp, sp = np.cos(pitch), np.sin(pitch)
        z_c = np.array([c * cp, s * cp, -sp])
        x_c = np.array([s, -c, 0.0])
        y_c = np.cross(z_c, x_c)
        R = np.vstack([x_c, y_c, z_c])
        f = (width / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
        pos = np.asarray(position, dtype=float)
        return cls(id, f, f, width / 2.0, height / 2.0, R, -R @ pos, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def position(self) -> np.ndarray:
        return -self.R.T @ self.T

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[2].copy()

    @property
    def half_hfov(self) -> float:
        return float(np.arctan2(max(self.cx, self.width - self.cx), self.fx))

    def to_camera(self, w) -> np.ndarray:
        return np.atleast_2d(np.asarray(w, dtype=float)) @ self.R.T + self.T

    def project_many(self, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project (n, 3) world points; returns (uv, depth, visible)."""
        pc = self.to_camera(w)
        depth = pc[:, 2]
        safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
        u = self.fx * pc[:, 0] / safe + self.cx
        v = self.fy * pc[:, 1] / safe + self.cy
        uv = np.column_stack([u, v])
        visible = (depth > NEAR_DEPTH) & (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)
        return uv, depth, visible

    def project(self, w) -> tuple[float, float] | None:
        uv, _, vis = self.project_many(np.asarray(w, dtype=float).reshape(1, 3))
        if not vis[0]:
            return None
        return float(uv[0, 0]), float(uv[0, 1])

    def pixel_rays(self) -> np.ndarray:
        """World-frame ray directions for every pixel center, shape (h, w, 3)."""
        vv, uu = np.mgrid[0:self.height, 0:self.width].astype(float)
        d_cam = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)
        return d_cam @ self.R

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "intrinsics": [self.fx, self.fy, self.cx, self.cy],
            "R": self.R.tolist(),
            "T": self.T.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        fx, fy, cx, cy = d["intrinsics"]
        return cls(d["id"], fx, fy, cx, cy, np.array(d["R"]), np.array(d["T"]), int(d["width"]), int(d["height"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraModel):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# (id, position relative to ego center, heading offset from forward in degrees)
DEFAULT_LAYOUT = (
    ("front", (0.0, 1.6, 1.6), 0.0),
    ("front_left", (-0.8, 1.2, 1.6), 60.0),
    ("front_right", (0.8, 1.2, 1.6), -60.0),
    ("back", (0.0, -1.0, 1.6), 180.0),
    ("back_left", (-0.8, -0.6, 1.6), 120.0),
    ("back_right", (0.8, -0.6, 1.6), -120.0),
)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[CameraModel, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate camera ids in rig: {ids}")
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "_index", {c.id: i for i, c in enumerate(self.cameras)})

    @classmethod
    def default(cls, width: int = 400, height: int = 300, hfov_deg: float = 90.0,
                pitch_deg: float = 0.0) -> "CameraRig":
        cams = [
            CameraModel.looking(cid, pos, np.pi / 2 + np.deg2rad(yaw), pitch=np.deg2rad(pitch_deg),
                                width=width, height=height, hfov_deg=hfov_deg)
            for cid, pos, yaw in DEFAULT_LAYOUT
        ]
        return cls(tuple(cams))

    def __getitem__(self, cam_id: str) -> CameraModel:
        return self.cameras[self._index[cam_id]]

    def __iter__(self):
        return iter(self.cameras)

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]

    @property
    def positions(self) -> np.ndarray:
        return np.array([c.position for c in self.cameras])

    def horizontal_coverage(self, step_deg: float = 0.5) -> float:
        """Fraction of BEV headings that fall inside at least one camera's horizontal FOV."""
        headings = np.deg2rad(np.arange(0.0, 360.0, step_deg))
        covered = np.zeros(len(headings), dtype=bool)
        for cam in self.cameras:
            axis = cam.optical_axis
            cam_heading = np.arctan2(axis[1], axis[0])
            diff = np.abs((headings - cam_heading + np.pi) % (2 * np.pi) - np.pi)
            covered |= diff <= cam.half_hfov + 1e-9
        return float(covered.mean())

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(tuple(CameraModel.from_dict(c) for c in d["cameras"]))


def project_world_to_image(cam: CameraModel, w) -> tuple[float, float] | None:
    return cam.project(w)
