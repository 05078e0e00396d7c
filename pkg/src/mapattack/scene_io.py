"""Scene files: a JSON manifest plus one 8-bit RGB PNG per camera."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraRig
from .errors import (ChecksumError, ImageDecodeError, SceneFileMissingError, SceneFormatError,
                     SchemaVersionError)
from .geometry import Polyline2D
from .scene import Goal, SceneFrame, SceneTruth

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _poly_to_json(p: Polyline2D) -> dict:
    return {"class_tag": p.class_tag, "points": p.to_list()}


def _poly_from_json(d: dict) -> Polyline2D:
    return Polyline2D(np.array(d["points"], dtype=float), d.get("class_tag", "boundary"))


def frame_to_manifest(frame: SceneFrame) -> dict:
    t = frame.truth
    return {
        "schema_version": SCHEMA_VERSION,
        "scene_id": frame.scene_id,
        "road_kind": frame.road_kind,
        "gt_map": [_poly_to_json(p) for p in frame.gt_map],
        "boundaries": {"left": _poly_to_json(frame.left_boundary), "right": _poly_to_json(frame.right_boundary)},
        "centerline": _poly_to_json(frame.centerline),
        "ego_pose": list(frame.ego_pose),
        "bev_range": list(frame.bev_range),
        "rig": frame.rig.to_dict(),
        "truth": {
            "asym_label": t.asym_label,
            "anchor_xy": list(t.anchor_xy) if t.anchor_xy is not None else None,
            "diverging_side": t.diverging_side,
            "goals": [{"x": g.x, "y": g.y, "heading": g.heading, "label": g.label} for g in t.goals],
        },
    }


def frame_from_manifest(m: dict, images: dict | None) -> SceneFrame:
    t = m.get("truth", {})
    goals = tuple(Goal(float(g["x"]), float(g["y"]), float(g["heading"]), g.get("label", "goal"))
                  for g in t.get("goals", []))
    anchor = t.get("anchor_xy")
    truth = SceneTruth(bool(t.get("asym_label", False)),
                       (float(anchor[0]), float(anchor[1])) if anchor is not None else None,
                       t.get("diverging_side"), goals)
    return SceneFrame(
        scene_id=m["scene_id"],
        road_kind=m["road_kind"],
        gt_map=tuple(_poly_from_json(p) for p in m["gt_map"]),
        left_boundary=_poly_from_json(m["boundaries"]["left"]),
        right_boundary=_poly_from_json(m["boundaries"]["right"]),
        centerline=_poly_from_json(m["centerline"]),
        rig=CameraRig.from_dict(m["rig"]),
        images=images,
        ego_pose=tuple(float(v) for v in m.get("ego_pose", (0.0, 0.0, math.pi / 2))),
        truth=truth,
        bev_range=tuple(float(v) for v in m.get("bev_range", (-15.0, 15.0, -15.0, 30.0))),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_scene(frame: SceneFrame, directory) -> Path:
    """Write ``manifest.json`` and ``images/<cam>.png`` into ``directory``."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    m = frame_to_manifest(frame)
    files, sums = {}, {}
    for cam_id, img in (frame.images or {}).items():
        rel = f"images/{cam_id}.png"
        arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(d / rel)
        files[cam_id] = rel
        sums[cam_id] = _sha256(d / rel)
    m["image_files"] = files
    m["image_sha256"] = sums
    path = d / MANIFEST_NAME
    path.write_text(json.dumps(m, indent=1))
    return path


def _decode_png(cam_id: str, path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises OSError / SyntaxError / ValueError variants
        raise ImageDecodeError(cam_id, str(path), str(exc)) from exc
    return arr.astype(np.float32) / np.float32(255.0)


def load_scene(path) -> SceneFrame:
    """Load a scene from a manifest file or the directory containing one."""
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    if not manifest_path.exists():
        raise SceneFileMissingError(f"scene manifest not found: {manifest_path}")
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    version = m.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{manifest_path}: unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    base = manifest_path.parent
    images = None
    files = m.get("image_files") or {}
    if files:
        images = {}
        sums = m.get("image_sha256", {})
        for cam_id, rel in files.items():
            fp = base / rel
            if not fp.exists():
                raise SceneFileMissingError(f"camera {cam_id!r}: image file missing: {fp}")
            images[cam_id] = _decode_png(cam_id, fp)
            if cam_id in sums and _sha256(fp) != sums[cam_id]:
                raise ChecksumError(f"camera {cam_id!r}: checksum mismatch for {fp}")
    try:
        return frame_from_manifest(m, images)
    except KeyError as exc:
        raise SceneFormatError(f"{manifest_path}: missing field {exc}") from exc
