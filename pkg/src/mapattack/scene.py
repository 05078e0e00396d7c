"""Synthetic road scenes in the ego BEV frame.

The ego sits at the origin heading +y on the road center. Every scene is
built for a right-diverging layout and mirrored (x -> -x) for the left side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraRig
from .errors import ConfigError, InvalidGeometryError
from .geometry import Polyline2D, cumulative_length, left_normals, tangents

ROAD_KINDS = ("straight", "fork", "merge", "split", "intersection")
ASYMMETRIC_KINDS = ("fork", "merge", "split")
DEFAULT_BEV_RANGE = (-15.0, 15.0, -15.0, 30.0)  # x_min, x_max, y_min, y_max
PATH_STEP = 0.25
DEFAULT_TURN_ANGLE = {"fork": 90.0, "split": 45.0, "merge": 60.0, "intersection": 90.0}


@dataclass(frozen=True)
class SceneSpec:
    road_kind: str = "fork"
    road_width: float = 7.0
    turn_radius: float = math.inf
    anchor_distance: float = 12.0
    branch_curvature: float = 0.4
    seed: int = 0
    side: str | None = None
    turn_angle: float | None = None
    scene_id: str | None = None
    bev_range: tuple[float, float, float, float] = DEFAULT_BEV_RANGE

    def __post_init__(self):
        if self.road_kind not in ROAD_KINDS:
            raise ConfigError(f"unknown road_kind {self.road_kind!r}; expected one of {ROAD_KINDS}")
        if not self.road_width > 0:
            raise ConfigError("road_width must be > 0")
        if not self.anchor_distance > 0:
            raise ConfigError("anchor_distance must be > 0")
        if not self.branch_curvature > 0:
            raise ConfigError("branch_curvature must be > 0")
        if not self.turn_radius > self.road_width / 2:
            raise ConfigError("turn_radius must exceed half the road width")
        if self.side not in (None, "left", "right"):
            raise ConfigError(f"side must be 'left' or 'right', got {self.side!r}")

    @property
    def branch_radius(self) -> float:
        return 1.0 / self.branch_curvature


@dataclass(frozen=True)
class Goal:
    x: float
    y: float
    heading: float
    label: str

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


@dataclass(frozen=True)
class SceneTruth:
    asym_label: bool
    anchor_xy: tuple[float, float] | None = None
    diverging_side: str | None = None
    goals: tuple[Goal, ...] = ()


@dataclass(frozen=True, eq=False)
class SceneFrame:
    scene_id: str
    road_kind: str
    gt_map: tuple[Polyline2D, ...]
    left_boundary: Polyline2D
    right_boundary: Polyline2D
    centerline: Polyline2D
    rig: CameraRig
    images: dict | None = None
    ego_pose: tuple[float, float, float] = (0.0, 0.0, math.pi / 2)
    truth: SceneTruth = field(default_factory=lambda: SceneTruth(False))
    bev_range: tuple[float, float, float, float] = DEFAULT_BEV_RANGE

    def __post_init__(self):
        object.__setattr__(self, "gt_map", tuple(self.gt_map))
        if self.images is not None:
            imgs = {}
            for cam in self.rig:
                if cam.id not in self.images:
                    raise InvalidGeometryError(f"no image for camera {cam.id!r}")
                img = np.asarray(self.images[cam.id], dtype=np.float32)
                if img.shape != (cam.height, cam.width, 3):
                    raise InvalidGeometryError(
                        f"camera {cam.id!r}: image shape {img.shape} != {(cam.height, cam.width, 3)}")
                if not img.flags.writeable:
                    imgs[cam.id] = img
                else:
                    img = img.copy()
                    img.setflags(write=False)
                    imgs[cam.id] = img
            object.__setattr__(self, "images", imgs)

    def with_images(self, images: dict) -> "SceneFrame":
        return replace(self, images=images)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneFrame):
            return NotImplemented
        same = (
            self.scene_id == other.scene_id
            and self.road_kind == other.road_kind
            and self.gt_map == other.gt_map
            and self.left_boundary == other.left_boundary
            and self.right_boundary == other.right_boundary
            and self.centerline == other.centerline
            and self.rig.to_dict() == other.rig.to_dict()
            and tuple(self.ego_pose) == tuple(other.ego_pose)
            and self.truth == other.truth
            and tuple(self.bev_range) == tuple(other.bev_range)
        )
        if not same or (self.images is None) != (other.images is None):
            return False
        if self.images is None:
            return True
        return self.images.keys() == other.images.keys() and all(
            np.array_equal(self.images[k], other.images[k]) for k in self.images)


def is_valid_frame(frame: SceneFrame, min_boundary_length: float = 10.0) -> tuple[bool, str]:
    """Frame filter: both designated boundaries must be at least 10 m long."""
    for name, b in (("left", frame.left_boundary), ("right", frame.right_boundary)):
        if b is None:
            return False, f"{name} boundary missing"
        if b.length < min_boundary_length:
            return False, f"{name} boundary shorter than {min_boundary_length} m ({b.length:.2f} m)"
    return True, "ok"


class _Path:
    """Turtle-style path builder sampled every PATH_STEP meters."""

    def __init__(self, start, heading: float):
        self.pts = [np.asarray(start, dtype=float)]
        self.heading = heading

    @property
    def end(self) -> np.ndarray:
        return self.pts[-1]

    def straight(self, length: float) -> "_Path":
        if length <= 0:
            return self
        n = max(1, int(math.ceil(length / PATH_STEP)))
        d = np.array([math.cos(self.heading), math.sin(self.heading)])
        p0 = self.end
        for i in range(1, n + 1):
            self.pts.append(p0 + d * (length * i / n))
        return self

    def arc(self, radius: float, angle: float) -> "_Path":
        """Circular arc; positive angle turns left (counter-clockwise)."""
        if angle == 0:
            return self
        sgn = 1.0 if angle > 0 else -1.0
        h0 = self.heading
        center = self.end + sgn * radius * np.array([-math.sin(h0), math.cos(h0)])
        n = max(2, int(math.ceil(radius * abs(angle) / PATH_STEP)))
        for i in range(1, n + 1):
            h = h0 + angle * i / n
            self.pts.append(center - sgn * radius * np.array([-math.sin(h), math.cos(h)]))
        self.heading = h0 + angle
        return self

    def points(self) -> np.ndarray:
        return np.array(self.pts)


def _inside(p, rng) -> bool:
    x0, x1, y0, y1 = rng
    return x0 - 1e-9 <= p[0] <= x1 + 1e-9 and y0 - 1e-9 <= p[1] <= y1 + 1e-9


def _edge_crossing(a, b, rng) -> np.ndarray:
    """Point where segment a(in)->b(out) leaves the rectangle."""
    x0, x1, y0, y1 = rng
    t = 1.0
    d = b - a
    for lo, hi, k in ((x0, x1, 0), (y0, y1, 1)):
        if d[k] > 0 and b[k] > hi:
            t = min(t, (hi - a[k]) / d[k])
        if d[k] < 0 and b[k] < lo:
            t = min(t, (lo - a[k]) / d[k])
    return a + max(0.0, t) * d


def clip_to_range(points: np.ndarray, rng) -> np.ndarray | None:
    """First contiguous run of the polyline inside the BEV rectangle."""
    inside = np.array([_inside(p, rng) for p in points])
    if not inside.any():
        return None
    i0 = int(np.argmax(inside))
    i1 = i0
    while i1 + 1 < len(points) and inside[i1 + 1]:
        i1 += 1
    run = list(points[i0:i1 + 1])
    if i0 > 0:
        run.insert(0, _edge_crossing(points[i0], points[i0 - 1], rng))
    if i1 + 1 < len(points):
        run.append(_edge_crossing(points[i1], points[i1 + 1], rng))
    out = np.array(run)
    keep = np.ones(len(out), dtype=bool)
    keep[1:] = np.hypot(*np.diff(out, axis=0).T) > 1e-6
    out = out[keep]
    return out if len(out) >= 2 else None


def _fillet_path(p1, d1, p2, d2, radius: float, lead: float = 60.0) -> np.ndarray:
    """Line through p1 (direction d1) joined to line through p2 (direction d2) by an arc."""
    d1 = np.asarray(d1, float) / np.linalg.norm(d1)
    d2 = np.asarray(d2, float) / np.linalg.norm(d2)
    A = np.column_stack([d1, -d2])
    s, _ = np.linalg.solve(A, np.asarray(p2, float) - np.asarray(p1, float))
    corner = np.asarray(p1, float) + s * d1
    h1 = math.atan2(d1[1], d1[0])
    delta = (math.atan2(d2[1], d2[0]) - h1 + math.pi) % (2 * math.pi) - math.pi
    tl = radius * math.tan(abs(delta) / 2)
    path = _Path(corner - d1 * (tl + lead), h1).straight(lead).arc(radius, delta).straight(lead)
    return path.points()


def _offset(points: np.ndarray, dist: float) -> np.ndarray:
    """Offset to the left of travel direction by ``dist`` meters."""
    return points + dist * left_normals(points)


def _mirror(points: np.ndarray) -> np.ndarray:
    return points * np.array([-1.0, 1.0])


def _branch_goal(div: np.ndarray, lane_offset: float, rng, label: str, margin: float = 2.0) -> Goal:
    """Goal on the branch lane center near where the diverging boundary leaves the range."""
    s = cumulative_length(div)
    t = tangents(div)
    n = left_normals(div)
    target = s[-1] - margin
    while target > 0:
        i = int(np.searchsorted(s, target))
        i = min(i, len(div) - 1)
        g = div[i] + lane_offset * n[i]
        if _inside(g, rng):
            return Goal(float(g[0]), float(g[1]), float(math.atan2(t[i, 1], t[i, 0])), label)
        target -= 1.0
    raise ConfigError("branch leaves no room for a goal inside the BEV range")


def _asym_right(kind: str, spec: SceneSpec, rng_box) -> dict:
    """Right-diverging layout for fork / split / merge."""
    half = spec.road_width / 2
    lane = spec.road_width / 2
    x0, x1, y0, y1 = rng_box
    R = spec.branch_radius
    a = spec.anchor_distance
    ang = math.radians(spec.turn_angle if spec.turn_angle is not None else DEFAULT_TURN_ANGLE[kind])
    if not 0 < ang <= math.pi / 2 + 1e-9:
        raise ConfigError("turn_angle must lie in (0, 90] degrees")
    if a >= y1 - 1.0:
        raise ConfigError("anchor_distance leaves no room inside the BEV range")
    extras: list[np.ndarray] = []
    goals = [Goal(0.0, y1 - 2.0, math.pi / 2, "main")]
    if kind == "merge":
        if R <= lane / 2 + 0.1:
            raise ConfigError("merge radius too small for the adjacent-lane centerline")
        m = 2 * R * (1 - math.cos(ang))
        if half + m > x1:
            raise ConfigError("merge shift exceeds the BEV range")
        div = _Path((half + m, y0), math.pi / 2).straight(a - y0).arc(R, ang).arc(R, -ang).straight(100.0)
        div_pts = clip_to_range(div.points(), rng_box)
        anchor = (half + m, a)
    else:
        div = _Path((half, y0), math.pi / 2).straight(a - y0).arc(R, -ang).straight(100.0)
        div_pts = clip_to_range(div.points(), rng_box)
        anchor = (half, a)
        bw = spec.road_width if kind == "fork" else lane
        hb = math.pi / 2 - ang
        d_branch = np.array([math.cos(hb), math.sin(hb)])
        arc_end = _Path((half, a), math.pi / 2).arc(R, -ang).end
        far_pt = arc_end + bw * np.array([-d_branch[1], d_branch[0]])
        if kind == "fork":
            far = _fillet_path((half, y1), (0.0, -1.0), far_pt, d_branch, R)
        else:
            far = _fillet_path(far_pt, -d_branch, (half, y1), (0.0, 1.0), 0.5)
        far = clip_to_range(far, rng_box)
        if far is not None:
            extras.append(far)
        goals.append(_branch_goal(div_pts, bw / 2, rng_box, "branch"))
    ref = _Path((-half, y0), math.pi / 2).straight(y1 - y0).points()
    return {"div": div_pts, "ref": ref, "extras": extras, "anchor": anchor, "goals": goals}


def _intersection(spec: SceneSpec, rng_box) -> dict:
    half = spec.road_width / 2
    x0, x1, y0, y1 = rng_box
    R = spec.branch_radius
    a = spec.anchor_distance
    if a >= y1 - 1.0:
        raise ConfigError("anchor_distance leaves no room inside the BEV range")
    right = clip_to_range(_Path((half, y0), math.pi / 2).straight(a - y0).arc(R, -math.pi / 2)
                          .straight(100.0).points(), rng_box)
    far_pt = np.array([half + R, a + R + spec.road_width])
    far = clip_to_range(_fillet_path((half, y1), (0.0, -1.0), far_pt, (1.0, 0.0), R), rng_box)
    extras = [far] if far is not None else []
    extras += [_mirror(e) for e in extras]
    goal_r = _branch_goal(right, spec.road_width / 2, rng_box, "right_branch")
    goals = [Goal(0.0, y1 - 2.0, math.pi / 2, "main"), goal_r,
             Goal(-goal_r.x, goal_r.y, math.pi - goal_r.heading, "left_branch")]
    return {"left": _mirror(right), "right": right, "extras": extras, "goals": goals}


def _straight(spec: SceneSpec, rng_box, bend: float) -> dict:
    half = spec.road_width / 2
    x0, x1, y0, y1 = rng_box
    if math.isinf(spec.turn_radius):
        left = np.array([[-half, y0], [-half, y1]])
        right = np.array([[half, y0], [half, y1]])
        center = np.array([[0.0, y0], [0.0, y1]])
        goals = [Goal(0.0, y1 - 2.0, math.pi / 2, "main")]
        return {"left": _densify(left), "right": _densify(right), "center": _densify(center), "goals": goals}
    Rc = spec.turn_radius
    s = np.arange(y0, y1 + 20.0, PATH_STEP)

    def arc(radius):
        phi = s / Rc
        # bend > 0 curves right (center at +x), bend < 0 curves left
        return np.column_stack([bend * (Rc - radius * np.cos(phi)), radius * np.sin(phi)])

    left = clip_to_range(arc(Rc + bend * half), rng_box)
    right = clip_to_range(arc(Rc - bend * half), rng_box)
    center = clip_to_range(arc(Rc), rng_box)
    t = tangents(center)
    n = len(center)
    idx = n - 1 - int(round(2.0 / PATH_STEP))
    goals = [Goal(float(center[idx, 0]), float(center[idx, 1]), float(math.atan2(t[idx, 1], t[idx, 0])), "main")]
    return {"left": left, "right": right, "center": center, "goals": goals}


def _densify(pts: np.ndarray) -> np.ndarray:
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / PATH_STEP)))
        for i in range(1, n + 1):
            out.append(a + (b - a) * i / n)
    return np.array(out)


def _ped_crossing(left: np.ndarray, right: np.ndarray, y_c: float, depth: float = 3.0,
                  inset: float = 1.5) -> np.ndarray:
    """Crossing outline held ``inset`` meters off both curbs so its edges never merge with them."""
    il = int(np.argmin(np.abs(left[:, 1] - y_c)))
    ir = int(np.argmin(np.abs(right[:, 1] - y_c)))
    pl, pr = left[il], right[ir]
    u = (pr - pl) / np.linalg.norm(pr - pl)
    pl, pr = pl + inset * u, pr - inset * u
    t = tangents(right)[ir]
    return np.array([pl, pr, pr + depth * t, pl + depth * t, pl])


def generate_scene(spec: SceneSpec, rig: CameraRig | None = None) -> SceneFrame:
    """Deterministic synthetic scene (without images) for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    rng_box = spec.bev_range
    side = spec.side or ("right" if rng.random() < 0.5 else "left")
    bend = 1.0 if rng.random() < 0.5 else -1.0
    lane = spec.road_width / 2
    kind = spec.road_kind
    elements: list[Polyline2D] = []
    if kind in ASYMMETRIC_KINDS:
        lay = _asym_right(kind, spec, rng_box)
        div, ref, extras, goals = lay["div"], lay["ref"], lay["extras"], lay["goals"]
        anchor = lay["anchor"]
        if side == "left":
            div, ref = _mirror(div), _mirror(ref)
            extras = [_mirror(e) for e in extras]
            goals = [Goal(-g.x, g.y, math.pi - g.heading, g.label) for g in goals]
            anchor = (-anchor[0], anchor[1])
            left_pts, right_pts = div, ref
            center_pts = _offset(div, -lane / 2)
        else:
            left_pts, right_pts = ref, div
            center_pts = _offset(div, lane / 2)
        divider = _densify(np.array([[0.0, rng_box[2]], [0.0, rng_box[3]]]))
        truth = SceneTruth(True, (float(anchor[0]), float(anchor[1])), side, tuple(goals))
    elif kind == "intersection":
        lay = _intersection(spec, rng_box)
        left_pts, right_pts, extras, goals = lay["left"], lay["right"], lay["extras"], lay["goals"]
        center_pts = _offset(right_pts, lane / 2)
        divider = _densify(np.array([[0.0, rng_box[2]], [0.0, spec.anchor_distance]]))
        truth = SceneTruth(False, None, None, tuple(goals))
    else:
        lay = _straight(spec, rng_box, bend)
        left_pts, right_pts, goals = lay["left"], lay["right"], lay["goals"]
        extras = []
        center_pts = _offset(right_pts, lane / 2)
        divider = lay["center"]
        truth = SceneTruth(False, None, None, tuple(goals))

    left = Polyline2D.clean(left_pts, "boundary")
    right = Polyline2D.clean(right_pts, "boundary")
    elements += [left, right]
    elements += [Polyline2D.clean(e, "boundary") for e in extras]
    elements.append(Polyline2D.clean(divider, "divider"))
    if rng.random() < 0.5:
        y_c = float(rng.uniform(-12.0, -6.0))
        elements.append(Polyline2D.clean(_ped_crossing(left_pts, right_pts, y_c), "ped_crossing"))
    center_clip = clip_to_range(center_pts, rng_box)
    centerline = Polyline2D.clean(center_clip if center_clip is not None else center_pts, "divider")
    scene_id = spec.scene_id or f"{kind}-{side if kind in ASYMMETRIC_KINDS else 'sym'}-s{spec.seed}"
    return SceneFrame(
        scene_id=scene_id,
        road_kind=kind,
        gt_map=tuple(elements),
        left_boundary=left,
        right_boundary=right,
        centerline=centerline,
        rig=rig or CameraRig.default(),
        images=None,
        ego_pose=(0.0, 0.0, math.pi / 2),
        truth=truth,
        bev_range=tuple(rng_box),
    )


def diverging_boundary(frame: SceneFrame) -> Polyline2D | None:
    side = frame.truth.diverging_side
    if side is None:
        return None
    return frame.left_boundary if side == "left" else frame.right_boundary


def reference_boundary(frame: SceneFrame) -> Polyline2D | None:
    side = frame.truth.diverging_side
    if side is None:
        return None
    return frame.right_boundary if side == "left" else frame.left_boundary
