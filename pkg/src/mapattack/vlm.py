"""Second-stage scene refinement through a chat-completion service.

The request bundles boundary coordinates as JSON text, a BEV sketch and the
front camera view with red boxes at projected anchors. Replies are parsed
for the first JSON object carrying a ``classification`` field.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import httpx
import numpy as np
from PIL import Image

from .classify import ASYMMETRIC, SYMMETRIC, RuleThresholds, RuleVerdict, classify_frame
from .errors import ExternalServiceError, RefinementFailedError
from .scene import SceneFrame

log = logging.getLogger(__name__)

FRONT_CAMERAS = ("front", "front_left", "front_right")
BOX_HALF = 12
BEV_PX_PER_M = 10

# Worked examples are our own wording; see the decisions ledger for provenance.
SYSTEM_PROMPT = """\
## Role
You are a road-geometry analyst for an autonomous-driving map team.

## Skills
- Reading bird's-eye-view (BEV) boundary coordinates given in meters (x right, y forward, ego at the origin).
- Relating BEV geometry to what a front-facing camera sees.
- Recognizing road layouts such as forks, turns, lane merges, splits and intersections.

## Classification criteria
- Symmetric scene: the left and right road boundaries run parallel or curve together, e.g. straight roads, constant-radius curves, regular crossroads whose corners mirror each other.
- Asymmetric scene: one boundary clearly deviates from the other while the other stays comparatively straight, e.g. a branch leaving the road, a lane merging in, a right-only turn pocket.

## Task
Decide whether the scene is symmetric or asymmetric. When asymmetric, name the road type.

## Input format
1. JSON text with "left_boundary" and "right_boundary" point lists and "anchors" (candidate divergence points).
2. A BEV sketch: boundaries in white, ego vehicle in green, anchors as red circles.
3. The front camera image with red boxes around anchors, when an anchor is visible.

## Output format
Reply with one JSON object:
{"classification": "symmetric" | "asymmetric", "road_type": "<fork | turn | lane merging | split | intersection | straight | other>", "reasoning": "<short explanation>"}

## Steps
1. Trace each boundary in the coordinates and note where its direction changes.
2. Compare the two boundaries at matching distances ahead of the ego.
3. Check the anchors in the BEV sketch and camera image; decide whether the deviation is a real layout change or a matched feature on both sides.
4. Choose the label, then the road type.

## Examples
Example 1 (placeholder geometry). Input: left boundary straight at x=-3.5; right boundary straight until y=12 then bending to +x with radius 2.5 m; anchor near (3.5, 12).
Output: {"classification": "asymmetric", "road_type": "fork", "reasoning": "Only the right boundary turns away; the left continues straight."}
Example 2 (placeholder geometry). Input: both boundaries bend right on concentric arcs of radius 50 m and 43 m; no anchors.
Output: {"classification": "symmetric", "road_type": "turn", "reasoning": "Both sides curve together with matching shape."}
Example 3 (placeholder geometry). Input: crossroad with corners of slightly different radius on each side; anchor at the right corner.
Output: {"classification": "symmetric", "road_type": "intersection", "reasoning": "Both sides open into cross streets; the curvature gap comes from corner radii, not from a one-sided divergence."}
"""


@dataclass(frozen=True, eq=False)
class VlmRequest:
    scene_id: str
    system_prompt: str
    payload: dict
    bev_image: np.ndarray
    front_image: np.ndarray | None
    front_camera: str | None
    n_boxes: int
    flagged: bool = False
    flag_reason: str = ""

    def __eq__(self, other) -> bool:
        if not isinstance(other, VlmRequest):
            return NotImplemented
        same_front = (self.front_image is None and other.front_image is None) or (
            self.front_image is not None and other.front_image is not None
            and np.array_equal(self.front_image, other.front_image))
        return (self.scene_id == other.scene_id and self.system_prompt == other.system_prompt
                and self.payload == other.payload and np.array_equal(self.bev_image, other.bev_image)
                and same_front and self.front_camera == other.front_camera and self.n_boxes == other.n_boxes
                and self.flagged == other.flagged and self.flag_reason == other.flag_reason)


@dataclass(frozen=True)
class VlmVerdict:
    label: str
    road_type: str | None
    reasoning: str
    raw_response: str

    def to_dict(self) -> dict:
        return {"label": self.label, "road_type": self.road_type, "reasoning": self.reasoning,
                "raw_response": self.raw_response}


def _bev_sketch(frame: SceneFrame, left, right, anchors) -> np.ndarray:
    x0, x1, y0, y1 = frame.bev_range
    w = int(round((x1 - x0) * BEV_PX_PER_M))
    h = int(round((y1 - y0) * BEV_PX_PER_M))
    img = np.full((h, w, 3), 40, dtype=np.uint8)

    def px(p):
        p = np.atleast_2d(p)
        return np.column_stack([(p[:, 0] - x0) * BEV_PX_PER_M, (y1 - p[:, 1]) * BEV_PX_PER_M]).round().astype(np.int32)

    for b in (left, right):
        if b is not None:
            cv2.polylines(img, [px(b.points).reshape(-1, 1, 2)], False, (255, 255, 255), 2, cv2.LINE_8)
    ego = np.array([[-0.9, -2.3], [0.9, -2.3], [0.9, 2.3], [-0.9, 2.3]])
    cv2.fillPoly(img, [px(ego).reshape(-1, 1, 2)], (0, 200, 0))
    for a in anchors:
        c = px(np.asarray(a))[0]
        cv2.circle(img, (int(c[0]), int(c[1])), 6, (255, 0, 0), 2, cv2.LINE_8)
    return img


def _annotated_front(frame: SceneFrame, anchors) -> tuple[np.ndarray | None, str | None, int]:
    if frame.images is None or not anchors:
        return None, None, 0
    best, best_hits = None, []
    for cam in frame.rig:
        if cam.id not in FRONT_CAMERAS:
            continue
        hits = [cam.project((a[0], a[1], 0.0)) for a in anchors]
        hits = [h for h in hits if h is not None]
        if len(hits) > len(best_hits):
            best, best_hits = cam, hits
    if best is None:
        return None, None, 0
    img = np.round(np.clip(frame.images[best.id], 0, 1) * 255).astype(np.uint8).copy()
    for u, v in best_hits:
        p0 = (int(round(u)) - BOX_HALF, int(round(v)) - BOX_HALF)
        p1 = (int(round(u)) + BOX_HALF, int(round(v)) + BOX_HALF)
        cv2.rectangle(img, p0, p1, (255, 0, 0), 2, cv2.LINE_8)
    return img, best.id, len(best_hits)


def build_vlm_request(frame: SceneFrame, rv: RuleVerdict, left=None, right=None) -> VlmRequest:
    left = left if left is not None else frame.left_boundary
    right = right if right is not None else frame.right_boundary
    payload = {
        "scene_id": frame.scene_id,
        "left_boundary": np.round(left.points, 3).tolist(),
        "right_boundary": np.round(right.points, 3).tolist(),
        "anchors": [list(a) for a in rv.anchors],
        "rule_dk_max": round(rv.dk_max, 4),
        "rule_diverging_side": rv.diverging_side,
    }
    front, cam_id, n = _annotated_front(frame, rv.anchors)
    flagged = front is None
    reason = "" if not flagged else ("no camera images" if frame.images is None else
                                     "no anchor projects into a front-facing camera")
    return VlmRequest(frame.scene_id, SYSTEM_PROMPT, payload, _bev_sketch(frame, left, right, rv.anchors),
                      front, cam_id, n, flagged, reason)


def _png_data_url(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_data_url(url: str) -> np.ndarray:
    raw = base64.b64decode(url.split(",", 1)[1])
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("RGB")).copy()


def encode_request(req: VlmRequest, model: str) -> dict:
    content = [{"type": "text", "text": json.dumps(req.payload)},
               {"type": "image_url", "image_url": {"url": _png_data_url(req.bev_image)}}]
    if req.front_image is not None:
        content.append({"type": "image_url", "image_url": {"url": _png_data_url(req.front_image)}})
    return {
        "model": model,
        "messages": [{"role": "system", "content": req.system_prompt}, {"role": "user", "content": content}],
        "metadata": {"scene_id": req.scene_id, "front_camera": req.front_camera, "n_boxes": req.n_boxes,
                     "flagged": req.flagged, "flag_reason": req.flag_reason},
    }


def decode_request(body: dict) -> VlmRequest:
    meta = body.get("metadata", {})
    system = body["messages"][0]["content"]
    parts = body["messages"][1]["content"]
    payload = json.loads(parts[0]["text"])
    images = [_decode_data_url(p["image_url"]["url"]) for p in parts[1:]]
    return VlmRequest(meta["scene_id"], system, payload, images[0], images[1] if len(images) > 1 else None,
                      meta.get("front_camera"), int(meta.get("n_boxes", 0)), bool(meta.get("flagged", False)),
                      meta.get("flag_reason", ""))


def extract_json_object(text: str) -> tuple[dict | None, str]:
    """First JSON object in ``text`` and the surrounding prose."""
    dec = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, end = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            prose = (text[:i] + " " + text[end:]).strip()
            prose = prose.replace("```json", "").replace("```", "").strip()
            return obj, prose
        i = text.find("{", end)
    return None, text.strip()


def parse_verdict(content: str) -> VlmVerdict | None:
    obj, prose = extract_json_object(content)
    if obj is None:
        return None
    raw_label = str(obj.get("classification", obj.get("label", ""))).strip().lower()
    if raw_label.startswith("asym"):
        label = ASYMMETRIC
    elif raw_label.startswith("sym"):
        label = SYMMETRIC
    else:
        return None
    reasoning = "\n".join(s for s in (prose, str(obj.get("reasoning", "")).strip()) if s)
    road_type = obj.get("road_type")
    return VlmVerdict(label, str(road_type) if road_type else None, reasoning, content)


class _Transient(Exception):
    pass


class VlmClient:
    """Minimal chat-completion client with retry and request logging."""

    def __init__(self, endpoint: str, model: str = "vlm", *, token_env: str = "MAPATTACK_VLM_TOKEN",
                 max_retries: int = 3, backoff: float = 0.5, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep,
                 log_path: str | os.PathLike | None = None):
        if not endpoint:
            raise ExternalServiceError("VLM endpoint not configured")
        self.endpoint = endpoint
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep
        self.log_path = Path(log_path) if log_path else None
        self._lock = threading.Lock()
        token = os.environ.get(token_env)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._http = httpx.Client(timeout=timeout, transport=transport, headers=headers)

    def close(self):
        self._http.close()

    def _log(self, body: dict, response: dict | None, error: str | None = None):
        if self.log_path is None:
            return
        rec = {"request": body, "response": response, "error": error}
        with self._lock:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def post(self, body: dict) -> dict:
        try:
            r = self._http.post(self.endpoint, json=body)
        except httpx.TransportError as exc:
            self._log(body, None, repr(exc))
            raise _Transient(f"transport error: {exc}") from exc
        if r.status_code in (401, 403):
            self._log(body, None, f"HTTP {r.status_code}")
            raise ExternalServiceError(f"authentication failed (HTTP {r.status_code})", self.endpoint)
        if r.status_code == 429 or r.status_code >= 500:
            self._log(body, None, f"HTTP {r.status_code}")
            raise _Transient(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            self._log(body, None, f"HTTP {r.status_code}")
            raise ExternalServiceError(f"request rejected (HTTP {r.status_code}): {r.text[:200]}", self.endpoint)
        try:
            data = r.json()
        except ValueError as exc:
            self._log(body, None, "non-JSON HTTP body")
            raise _Transient("response body is not JSON") from exc
        self._log(body, data)
        return data


def _message_content(data: dict) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return ""
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return str(content or "")


def refine_with_vlm(client: VlmClient, req: VlmRequest) -> VlmVerdict:
    body = encode_request(req, client.model)
    last = ""
    for attempt in range(client.max_retries + 1):
        if attempt:
            client.sleep(client.backoff * 2 ** (attempt - 1))
        try:
            data = client.post(body)
        except _Transient as exc:
            last = str(exc)
            log.warning("VLM attempt %d for %s failed: %s", attempt + 1, req.scene_id, exc)
            continue
        content = _message_content(data)
        verdict = parse_verdict(content)
        if verdict is not None:
            return verdict
        last = f"no verdict JSON in reply: {content[:120]!r}"
    raise RefinementFailedError(f"VLM refinement failed for {req.scene_id} after "
                                f"{client.max_retries + 1} attempts: {last}", client.endpoint)


@dataclass
class SceneVerdict:
    scene_id: str
    rule: RuleVerdict
    vlm: VlmVerdict | None = None
    final_label: str = SYMMETRIC
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "rule": self.rule.to_dict(),
                "vlm": self.vlm.to_dict() if self.vlm else None,
                "final_label": self.final_label, "flags": list(self.flags)}


def classify_scenes(frames, th: RuleThresholds | None = None, client: VlmClient | None = None,
                    max_in_flight: int = 4) -> list[SceneVerdict]:
    """Rule stage for every frame, then VLM confirmation of rule-flagged frames.

    The VLM can only remove frames from the asymmetric set. Without a client
    the run is rule-only.
    """
    frames = list(frames)
    out = {f.scene_id: SceneVerdict(f.scene_id, classify_frame(f, th)) for f in frames}
    for sv in out.values():
        sv.final_label = sv.rule.label
    todo = [f for f in frames if out[f.scene_id].rule.is_asymmetric]
    if client is None:
        for sv in out.values():
            sv.flags.append("unrefined")
        return [out[f.scene_id] for f in frames]
    if not todo:
        return [out[f.scene_id] for f in frames]

    def work(frame):
        req = build_vlm_request(frame, out[frame.scene_id].rule)
        try:
            return frame.scene_id, req, refine_with_vlm(client, req), None
        except RefinementFailedError as exc:
            return frame.scene_id, req, None, exc

    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        results = list(pool.map(work, todo))
    for sid, req, verdict, err in results:
        sv = out[sid]
        if req.flagged:
            sv.flags.append("no_front_annotation")
        if verdict is None:
            sv.flags.append("unrefined")
            log.warning("%s", err)
            continue
        sv.vlm = verdict
        sv.final_label = ASYMMETRIC if verdict.label == ASYMMETRIC else SYMMETRIC
    return [out[f.scene_id] for f in frames]
