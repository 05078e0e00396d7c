from __future__ import annotations

import dataclasses
import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapattack.classify import (
    ASYMMETRIC,
    NO_BOUNDARY,
    SYMMETRIC,
    RuleThresholds,
    audit_dataset_balance,
    classify_frame,
    classify_prediction,
    classify_rule_based,
)
from mapattack.errors import ConfigError, ExternalServiceError, RefinementFailedError
from mapattack.geometry import Polyline2D, rigid_transform
from mapattack.oracle.base import PredictedMap
from mapattack.scene import SceneSpec, generate_scene
from mapattack.suite import suite_specs
from mapattack.vlm import (
    VlmClient,
    build_vlm_request,
    classify_scenes,
    decode_request,
    encode_request,
    extract_json_object,
    parse_verdict,
    refine_with_vlm,
)


def _line(x, y0=-15.0, y1=30.0, n=91):
    return Polyline2D(np.column_stack([np.full(n, x), np.linspace(y0, y1, n)]))


def _corner(x, y_turn, radius, sign, y0=-15.0, length=20.0):
    """Straight up x = const, then a quarter arc turning outward (sign=+1 right, -1 left), then straight."""
    up = np.column_stack([np.full(60, x), np.linspace(y0, y_turn, 60, endpoint=False)])
    t = np.linspace(0, math.pi / 2, 40, endpoint=False)
    cx = x + sign * radius
    arc = np.column_stack([cx - sign * radius * np.cos(t), y_turn + radius * np.sin(t)])
    out = np.column_stack([cx + sign * np.linspace(0, length, 40), np.full(40, y_turn + radius)])
    return Polyline2D.clean(np.vstack([up, arc, out]))


def _mock_client(replies, calls=None):
    replies = list(replies)

    def handler(request):
        if calls is not None:
            calls.append(json.loads(request.content))
        r = replies.pop(0) if len(replies) > 1 else replies[0]
        if isinstance(r, int):
            return httpx.Response(r)
        return httpx.Response(200, json={"choices": [{"message": {"content": r}}]})

    return VlmClient("http://vlm.test/v1/chat", transport=httpx.MockTransport(handler), sleep=lambda s: None,
                     max_retries=2)


class TestRule:
    def test_parallel_straights(self):
        v = classify_rule_based(_line(-3.5), _line(3.5))
        assert v.label == SYMMETRIC and v.dk_max == pytest.approx(0, abs=1e-9) and not v.anchors

    def test_tight_fork_anchor(self):
        f = generate_scene(SceneSpec(road_kind="fork", side="right", branch_curvature=0.5, anchor_distance=12,
                                     seed=2))
        v = classify_frame(f, RuleThresholds(dk_thre=0.3))
        assert v.label == ASYMMETRIC and v.diverging_side == "right"
        d = min(np.hypot(a[0] - 3.5, a[1] - 12.0) for a in v.anchors)
        assert d <= 2.0

    def test_concentric_arcs(self):
        t = np.linspace(0, math.radians(50), 200)
        outer = np.column_stack([50 - 50 * np.cos(t) - 3.5, 50 * np.sin(t)])
        inner = np.column_stack([50 - 43 * np.cos(t) - 3.5, 43 * np.sin(t)])
        v = classify_rule_based(Polyline2D(outer), Polyline2D(inner))
        assert v.label == SYMMETRIC and v.dk_max < 0.01

    def test_missing_boundary(self):
        assert classify_rule_based(None, _line(3.5)).label == NO_BOUNDARY
        assert classify_rule_based(_line(-3.5, 0, 5), _line(3.5)).label == NO_BOUNDARY

    def test_thresholds_validated(self):
        with pytest.raises(ConfigError):
            RuleThresholds(dk_thre=0)
        with pytest.raises(ConfigError):
            RuleThresholds(window_len=4)

    @given(st.floats(0.35, 0.6), st.sampled_from(["left", "right"]), st.integers(0, 5000),
           st.floats(-math.pi, math.pi), st.floats(-20, 20), st.floats(-20, 20))
    @settings(max_examples=25, deadline=None)
    def test_swap_and_rigid_invariance(self, curv, side, seed, ang, tx, ty):
        f = generate_scene(SceneSpec(road_kind="fork", branch_curvature=curv, side=side, seed=seed))
        v = classify_frame(f)
        sw = classify_rule_based(f.right_boundary, f.left_boundary)
        assert sw.label == v.label and sw.dk_max == pytest.approx(v.dk_max)
        assert {sw.diverging_side, v.diverging_side} == {"left", "right"}
        moved = classify_rule_based(f.left_boundary.transformed(ang, (tx, ty)),
                                    f.right_boundary.transformed(ang, (tx, ty)))
        assert moved.label == v.label and moved.diverging_side == v.diverging_side
        assert moved.dk_max == pytest.approx(v.dk_max, rel=1e-6, abs=1e-9)
        back = rigid_transform(np.array(moved.anchors) - (tx, ty), -ang)
        np.testing.assert_allclose(back, v.anchors, atol=1e-6)


class TestPrediction:
    def test_prediction_straight(self, straight_frame):
        pred = PredictedMap.from_polylines([straight_frame.left_boundary, straight_frame.right_boundary])
        v = classify_prediction(pred, straight_frame.left_boundary, straight_frame.right_boundary)
        assert v.label == SYMMETRIC

    def test_prediction_single_boundary(self, fork_frame):
        pred = PredictedMap.from_polylines([fork_frame.left_boundary])
        v = classify_prediction(pred, fork_frame.left_boundary, fork_frame.right_boundary)
        assert v.label == NO_BOUNDARY

    def test_prediction_empty(self, fork_frame):
        v = classify_prediction(PredictedMap(()), fork_frame.left_boundary, fork_frame.right_boundary)
        assert v.label == NO_BOUNDARY


class TestBalance:
    def test_empty(self):
        assert audit_dataset_balance([]) == {"n_total": 0, "n_asym": 0, "fraction": 0.0}

    def test_all_symmetric(self):
        assert audit_dataset_balance([SYMMETRIC] * 4)["fraction"] == 0

    def test_generated_suite(self):
        frames = [generate_scene(s) for s in suite_specs(20, 20, seed=4)]
        res = audit_dataset_balance(classify_frame(f) for f in frames)
        assert res["n_total"] == 40
        assert abs(res["fraction"] - 0.5) <= 0.1


class TestVlmParsing:
    def test_plain_json(self):
        v = parse_verdict('{"classification":"asymmetric","road_type":"fork","reasoning":"branch on right"}')
        assert (v.label, v.road_type) == (ASYMMETRIC, "fork")

    @pytest.mark.parametrize("text,label,prose", [
        ('Looking at it.\n```json\n{"classification": "symmetric", "road_type": "straight"}\n```\nDone.',
         SYMMETRIC, "Looking at it."),
        ('The {left} side is odd. {"classification": "Asymmetric"} trailing', ASYMMETRIC, "The {left} side is odd."),
        ('{"classification": "symmetric", "reasoning": "parallel"} {"classification": "asymmetric"}',
         SYMMETRIC, ""),
        ('Answer: [1, 2] then {"label": "asymmetric", "road_type": "lane merging"}', ASYMMETRIC, "Answer: [1, 2]"),
    ])
    def test_embedded_corpus(self, text, label, prose):
        v = parse_verdict(text)
        assert v.label == label and v.raw_response == text
        assert v.reasoning.startswith(prose)

    @pytest.mark.parametrize("text", ["no json here", '{"classification": "maybe"}', "{broken"])
    def test_unparseable(self, text):
        assert parse_verdict(text) is None

    def test_extract_skips_invalid_brace(self):
        obj, _ = extract_json_object('{not json} {"a": 1}')
        assert obj == {"a": 1}


class TestVlmRequest:
    def test_one_box_for_one_anchor(self, fork_frame):
        v = classify_frame(fork_frame)
        v1 = dataclasses.replace(v, anchors=v.anchors[:1])
        req = build_vlm_request(fork_frame, v1)
        assert req.n_boxes == 1 and not req.flagged and req.front_camera is not None
        for key in ("Role", "Skills", "Classification criteria", "Task", "Input format", "Output format",
                    "Steps", "Example 3"):
            assert key in req.system_prompt

    def test_anchor_behind_ego_flagged(self, fork_frame):
        v = dataclasses.replace(classify_frame(fork_frame), anchors=((3.5, -10.0),))
        req = build_vlm_request(fork_frame, v)
        assert req.flagged and req.front_image is None and req.bev_image.ndim == 3

    def test_wire_round_trip(self, fork_frame):
        req = build_vlm_request(fork_frame, classify_frame(fork_frame))
        body = json.loads(json.dumps(encode_request(req, "m")))
        assert decode_request(body) == req


class TestVlmClient:
    def test_refine(self, fork_frame):
        calls = []
        client = _mock_client(['{"classification":"asymmetric","road_type":"fork","reasoning":"r"}'], calls)
        req = build_vlm_request(fork_frame, classify_frame(fork_frame))
        v = refine_with_vlm(client, req)
        assert v.label == ASYMMETRIC and v.road_type == "fork"
        body = calls[0]
        assert body["messages"][0]["role"] == "system"
        assert [p["type"] for p in body["messages"][1]["content"]] == ["text", "image_url", "image_url"]

    def test_retries_transient_then_succeeds(self, fork_frame):
        calls = []
        client = _mock_client([503, "garbage", '{"classification": "symmetric"}'], calls)
        v = refine_with_vlm(client, build_vlm_request(fork_frame, classify_frame(fork_frame)))
        assert v.label == SYMMETRIC and len(calls) == 3

    def test_non_json_after_retries(self, fork_frame):
        client = _mock_client(["still thinking"])
        with pytest.raises(RefinementFailedError, match="vlm.test"):
            refine_with_vlm(client, build_vlm_request(fork_frame, classify_frame(fork_frame)))

    def test_auth_error_names_endpoint(self, fork_frame):
        client = _mock_client([401])
        with pytest.raises(ExternalServiceError, match="vlm.test"):
            refine_with_vlm(client, build_vlm_request(fork_frame, classify_frame(fork_frame)))

    def test_bearer_token(self, monkeypatch):
        monkeypatch.setenv("MAPATTACK_VLM_TOKEN", "sekrit")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json={"choices": [{"message": {"content": "{}"}}]})

        VlmClient("http://vlm.test", transport=httpx.MockTransport(handler)).post({})
        assert seen["auth"] == "Bearer sekrit"

    def test_irregular_crossroad_rejected(self, straight_frame):
        # staggered corners: the right one opens first, so the rule stage sees a one-sided divergence
        left = _corner(-3.5, 16.0, 3.0, -1)
        right = _corner(3.5, 10.0, 2.0, +1)
        frame = dataclasses.replace(straight_frame, scene_id="crossroad", road_kind="intersection",
                                    left_boundary=left, right_boundary=right, gt_map=(left, right))
        assert classify_frame(frame).label == ASYMMETRIC
        client = _mock_client(['{"classification":"symmetric","road_type":"intersection"}'])
        [sv] = classify_scenes([frame], client=client)
        assert sv.rule.label == ASYMMETRIC and sv.final_label == SYMMETRIC

    def test_vlm_only_filters(self, fork_frame, straight_frame):
        client = _mock_client(['{"classification":"asymmetric"}'])
        out = classify_scenes([fork_frame, straight_frame], client=client)
        assert [s.final_label for s in out] == [ASYMMETRIC, SYMMETRIC]

    def test_disabled_flags_unrefined(self, fork_frame, straight_frame):
        out = classify_scenes([fork_frame, straight_frame])
        assert all("unrefined" in s.flags for s in out)
        assert [s.final_label for s in out] == [ASYMMETRIC, SYMMETRIC]

    def test_failure_falls_back_to_rule(self, fork_frame):
        [sv] = classify_scenes([fork_frame], client=_mock_client(["nope"]))
        assert sv.final_label == ASYMMETRIC and "unrefined" in sv.flags
