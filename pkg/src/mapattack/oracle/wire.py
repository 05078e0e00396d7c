"""Length-prefixed JSON messages for external map oracles.

Each message is a 4-byte big-endian payload length followed by that many bytes
of UTF-8 JSON holding one object. The first exchange is a versioned hello.
"""

from __future__ import annotations

import base64
import io
import json
import struct

import numpy as np
from PIL import Image

from ..errors import InvalidGeometryError, WireDecodeError
from ..geometry import Polyline2D
from .base import PredictedElement, PredictedMap

PROTOCOL = "mapattack-oracle"
VERSION = 1
HEADER = struct.Struct(">I")
MAX_MESSAGE = 64 * 1024 * 1024
CLASSES = ("boundary", "divider", "ped_crossing")


def encode_message(obj: dict) -> bytes:
    body = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_MESSAGE:
        raise ValueError(f"message of {len(body)} bytes exceeds {MAX_MESSAGE}")
    return HEADER.pack(len(body)) + body


def decode_message(buf: bytes, base_offset: int = 0) -> tuple[dict, int]:
    """Parse one message from the start of ``buf``; returns (object, bytes consumed).

    Offsets in errors are relative to the stream start (``base_offset`` + position in buf).
    """
    if len(buf) < HEADER.size:
        raise WireDecodeError(f"truncated header ({len(buf)} of {HEADER.size} bytes)", base_offset + len(buf))
    (n,) = HEADER.unpack_from(buf)
    if n > MAX_MESSAGE:
        raise WireDecodeError(f"declared length {n} exceeds limit {MAX_MESSAGE}", base_offset)
    end = HEADER.size + n
    if len(buf) < end:
        raise WireDecodeError(f"truncated body ({len(buf) - HEADER.size} of {n} bytes)", base_offset + len(buf))
    return parse_body(buf[HEADER.size:end], base_offset + HEADER.size), end


def parse_body(body: bytes, base_offset: int = 0) -> dict:
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as e:
        raise WireDecodeError(f"invalid UTF-8 ({e.reason})", base_offset + e.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        # e.pos counts characters; convert to a byte offset
        raise WireDecodeError(f"invalid JSON ({e.msg})", base_offset + len(text[:e.pos].encode("utf-8"))) from None
    if not isinstance(obj, dict):
        raise WireDecodeError("message is not a JSON object", base_offset)
    return obj


def read_message(stream, offset: int = 0) -> tuple[dict, int]:
    """Blocking read of one message from a binary stream; returns (object, new offset)."""
    head = _read_exact(stream, HEADER.size)
    if len(head) < HEADER.size:
        raise WireDecodeError(f"stream closed inside header ({len(head)} of {HEADER.size} bytes)",
                              offset + len(head))
    (n,) = HEADER.unpack(head)
    if n > MAX_MESSAGE:
        raise WireDecodeError(f"declared length {n} exceeds limit {MAX_MESSAGE}", offset)
    body = _read_exact(stream, n)
    if len(body) < n:
        raise WireDecodeError(f"stream closed inside body ({len(body)} of {n} bytes)",
                              offset + HEADER.size + len(body))
    return parse_body(body, offset + HEADER.size), offset + HEADER.size + n


def write_message(stream, obj: dict) -> int:
    data = encode_message(obj)
    stream.write(data)
    stream.flush()
    return len(data)


def _read_exact(stream, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        c = stream.read(n - got)
        if not c:
            break
        chunks.append(c)
        got += len(c)
    return b"".join(chunks)


def hello() -> dict:
    return {"type": "hello", "protocol": PROTOCOL, "version": VERSION}


def encode_image(img: np.ndarray) -> dict:
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)).save(buf, format="PNG")
    return {"encoding": "png-base64", "data": base64.b64encode(buf.getvalue()).decode("ascii")}


def decode_image(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("RGB")).astype(np.float32) / np.float32(255.0)


def predict_request(frame_ref: str, images: dict | None = None, image_paths: dict | None = None) -> dict:
    req = {"type": "predict", "frame_ref": frame_ref}
    if image_paths is not None:
        req["image_paths"] = {k: str(v) for k, v in image_paths.items()}
    else:
        req["images"] = {k: encode_image(v) for k, v in sorted((images or {}).items())}
    return req


def prediction_reply(pred: PredictedMap) -> dict:
    return {"type": "prediction", "elements": [
        {"class": e.class_tag, "points": e.polyline.to_list(), "confidence": e.confidence} for e in pred.elements]}


def parse_prediction(obj: dict, offset: int = 0) -> PredictedMap:
    """Validate a prediction reply; ``offset`` locates the message body for error reports."""
    if obj.get("type") == "error":
        raise WireDecodeError(f"oracle reported error: {obj.get('message', '')}", offset)
    elements = obj.get("elements")
    if not isinstance(elements, list):
        raise WireDecodeError("reply lacks an 'elements' list", offset)
    out = []
    for i, e in enumerate(elements):
        try:
            tag = e["class"]
            pts = np.asarray(e["points"], dtype=float)
            conf = float(e.get("confidence", 1.0))
        except (TypeError, KeyError, ValueError) as err:
            raise WireDecodeError(f"element {i} malformed ({err})", offset) from None
        if tag not in CLASSES:
            raise WireDecodeError(f"element {i} has unknown class {tag!r}", offset)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2 or not np.isfinite(pts).all():
            raise WireDecodeError(f"element {i} points must be >= 2 finite (x, y) pairs", offset)
        if not 0.0 <= conf <= 1.0:
            raise WireDecodeError(f"element {i} confidence {conf} outside [0, 1]", offset)
        try:
            poly = Polyline2D(pts, tag)
        except InvalidGeometryError as err:
            raise WireDecodeError(f"element {i} geometry invalid ({err})", offset) from None
        out.append(PredictedElement(poly, conf))
    return PredictedMap(tuple(out))
