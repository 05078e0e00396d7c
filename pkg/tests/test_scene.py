from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapattack.camera import CameraModel, CameraRig, project_world_to_image
from mapattack.classify import RuleThresholds, classify_frame
from mapattack.errors import (
    ChecksumError,
    ConfigError,
    ImageDecodeError,
    SceneFileMissingError,
    SchemaVersionError,
)
from mapattack.geometry import pointwise_curvature
from mapattack.render import RenderConfig, quantize, render_surround_views
from mapattack.scene import SceneFrame, SceneSpec, generate_scene, is_valid_frame
from mapattack.scene_io import load_scene, save_scene


def _identity_cam(**kw):
    d = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0, R=np.eye(3), T=np.zeros(3), width=200, height=200)
    d.update(kw)
    return CameraModel("test", **d)


class TestProjection:
    def test_principal_point(self):
        cam = _identity_cam()
        assert project_world_to_image(cam, [0, 0, 10]) == pytest.approx((50.0, 50.0), abs=1e-6)

    def test_behind_camera(self):
        assert project_world_to_image(_identity_cam(), [0, 0, -5]) is None

    def test_near_plane(self):
        assert project_world_to_image(_identity_cam(), [0, 0, 0.05]) is None

    def test_hand_computed_offset(self):
        cam = _identity_cam()
        w = np.array([1.0, 0.5, 10.0])
        h = cam.K @ np.hstack([cam.R, cam.T[:, None]]) @ np.append(w, 1.0)
        assert project_world_to_image(cam, w) == pytest.approx((60.0, 55.0), abs=1e-6)
        assert project_world_to_image(cam, w) == pytest.approx(tuple(h[:2] / h[2]), abs=1e-6)

    def test_outside_image(self):
        assert project_world_to_image(_identity_cam(), [100, 0, 1]) is None

    def test_rejects_bad_rotation(self):
        with pytest.raises(ConfigError):
            _identity_cam(R=np.diag([1.0, 1.0, 2.0]))

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ConfigError):
            _identity_cam(cx=300.0)

    @given(st.floats(-np.pi, np.pi), st.floats(-10, 10), st.floats(-10, 10),
           st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(2, 40))
    @settings(max_examples=100, deadline=None)
    def test_rigid_round_trip(self, yaw, px, py, a, b, depth):
        cam = CameraModel.looking("c", (px, py, 1.5), yaw, width=400, height=300)
        w = cam.position + depth * (cam.optical_axis + a * cam.R[0] + b * cam.R[1])
        uv = cam.project(w)
        if uv is None:
            return
        # move both the camera and the point by the same rigid motion
        th, t = 0.7, np.array([3.0, -2.0, 0.0])
        rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
        cam2 = CameraModel("c", cam.fx, cam.fy, cam.cx, cam.cy, cam.R @ rot.T, cam.T - cam.R @ rot.T @ t,
                           cam.width, cam.height)
        uv2 = cam2.project(rot @ w + t)
        assert uv2 == pytest.approx(uv, abs=1e-6)


class TestRig:
    def test_default_rig(self):
        rig = CameraRig.default()
        assert len(rig) == 6 and len(set(rig.ids)) == 6
        assert rig.horizontal_coverage() == 1.0
        for cam in rig:
            assert (cam.width, cam.height) == (400, 300)

    def test_duplicate_ids(self):
        cam = _identity_cam()
        with pytest.raises(ConfigError):
            CameraRig((cam, cam))

    def test_dict_round_trip(self):
        rig = CameraRig.default()
        assert CameraRig.from_dict(json.loads(json.dumps(rig.to_dict()))).to_dict() == rig.to_dict()


class TestGenerate:
    def test_straight_width_seven(self):
        f = generate_scene(SceneSpec(road_kind="straight", road_width=7.0, seed=1))
        np.testing.assert_allclose(f.left_boundary.points[:, 0], -3.5)
        np.testing.assert_allclose(f.right_boundary.points[:, 0], 3.5)
        assert not f.truth.asym_label

    def test_fork_branch_curvature(self):
        f = generate_scene(SceneSpec(road_kind="fork", side="right", branch_curvature=1 / 15,
                                     anchor_distance=12.0, seed=0))
        assert f.truth.asym_label and f.truth.diverging_side == "right"
        assert f.truth.anchor_xy == pytest.approx((3.5, 12.0))
        pts = f.right_boundary.points
        k = pointwise_curvature(pts)
        after = (pts[:, 1] > 13.5) & (np.arange(len(pts)) < len(pts) - 3)
        np.testing.assert_allclose(k[after], 1 / 15, rtol=0.02)
        assert np.all(k[pts[:, 1] < 11.0] < 1e-9)
        assert pointwise_curvature(f.left_boundary).max() < 1e-9

    def test_deterministic(self):
        spec = SceneSpec(road_kind="merge", seed=42)
        assert generate_scene(spec) == generate_scene(spec)

    @pytest.mark.parametrize("kind", ["straight", "fork", "merge", "split", "intersection"])
    def test_valid_frames(self, kind):
        f = generate_scene(SceneSpec(road_kind=kind, seed=7))
        ok, why = is_valid_frame(f)
        assert ok, why
        assert f.truth.goals

    @pytest.mark.parametrize("kw", [{"road_kind": "roundabout"}, {"road_width": 0}, {"anchor_distance": -1},
                                    {"side": "up"}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            SceneSpec(**kw)

    @given(st.floats(0.35, 0.6), st.sampled_from(["left", "right"]), st.integers(0, 10_000),
           st.floats(9.0, 15.0))
    @settings(max_examples=25, deadline=None)
    def test_fork_classifies_asymmetric(self, curv, side, seed, anchor):
        f = generate_scene(SceneSpec(road_kind="fork", branch_curvature=curv, side=side, seed=seed,
                                     anchor_distance=anchor))
        v = classify_frame(f, RuleThresholds(dk_thre=0.3))
        assert v.label == "asymmetric" and v.diverging_side == side


class TestRender:
    def test_stroke_at_projection(self, straight_frame):
        cam = straight_frame.rig["front"]
        img = straight_frame.images["front"]
        curb = np.array(RenderConfig().curb_color, dtype=np.float32)
        hits = 0
        for y in (6.0, 10.0, 15.0):
            uv = cam.project([3.5, y, 0.0])
            assert uv is not None
            u, v = int(round(uv[0])), int(round(uv[1]))
            patch = img[v - 1:v + 2, u - 1:u + 2]
            hits += bool(np.any(np.all(np.abs(patch - curb) < 1e-2, axis=-1)))
        assert hits == 3

    def test_empty_scene_only_ground_and_sky(self, straight_frame):
        empty = SceneFrame("empty", "straight", (), straight_frame.left_boundary, straight_frame.right_boundary,
                           straight_frame.centerline, straight_frame.rig)
        # an empty gt_map draws nothing
        out = render_surround_views(empty)
        cfg = RenderConfig()
        colors = {tuple(quantize(np.array(c))) for c in (cfg.ground_color, cfg.sky_color)}
        for img in out.images.values():
            assert {tuple(c) for c in np.unique(img.reshape(-1, 3), axis=0)} <= colors

    def test_deterministic(self, straight_frame):
        again = render_surround_views(straight_frame.with_images(None))
        assert again == straight_frame

    def test_values_in_unit_range(self, fork_frame):
        for img in fork_frame.images.values():
            assert img.min() >= 0 and img.max() <= 1 and img.shape == (300, 400, 3)


class TestSceneIO:
    def test_round_trip(self, fork_frame, tmp_path):
        save_scene(fork_frame, tmp_path)
        assert load_scene(tmp_path) == fork_frame

    def test_unknown_schema(self, fork_frame, tmp_path):
        path = save_scene(fork_frame, tmp_path)
        m = json.loads(path.read_text())
        m["schema_version"] = 99
        path.write_text(json.dumps(m))
        with pytest.raises(SchemaVersionError):
            load_scene(tmp_path)

    def test_truncated_image_names_camera(self, fork_frame, tmp_path):
        save_scene(fork_frame, tmp_path)
        png = tmp_path / "images" / "back_left.png"
        png.write_bytes(png.read_bytes()[:200])
        with pytest.raises(ImageDecodeError, match="back_left"):
            load_scene(tmp_path)

    def test_checksum_mismatch(self, fork_frame, tmp_path):
        from PIL import Image

        save_scene(fork_frame, tmp_path)
        png = tmp_path / "images" / "front.png"
        arr = np.asarray(Image.open(png)).copy()
        arr[0, 0] ^= 1
        Image.fromarray(arr).save(png)
        with pytest.raises(ChecksumError):
            load_scene(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SceneFileMissingError):
            load_scene(tmp_path)
