"""Map oracle backed by an external process speaking the wire format over stdio."""

from __future__ import annotations

import logging
import os
import selectors
import subprocess
import time

from ..errors import ExternalServiceError, OracleUnavailableError, WireDecodeError
from . import wire
from .base import PredictedMap

log = logging.getLogger(__name__)


class _Channel:
    """Deadline-bounded reads from a child's stdout; tracks the stream byte offset."""

    def __init__(self, proc: subprocess.Popen, timeout: float):
        self.proc = proc
        self.timeout = timeout
        self.offset = 0
        self._fd = proc.stdout.fileno()
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._fd, selectors.EVENT_READ)

    def read_exact(self, n: int, deadline: float) -> bytes:
        chunks, got = [], 0
        while got < n:
            left = deadline - time.monotonic()
            if left <= 0 or not self._sel.select(left):
                raise TimeoutError(f"no reply within {self.timeout} s")
            c = os.read(self._fd, n - got)
            if not c:
                break
            chunks.append(c)
            got += len(c)
        return b"".join(chunks)

    def send(self, obj: dict):
        self.proc.stdin.write(wire.encode_message(obj))
        self.proc.stdin.flush()

    def receive(self) -> tuple[dict, int]:
        """One message; returns (object, body offset)."""
        deadline = time.monotonic() + self.timeout
        head = self.read_exact(wire.HEADER.size, deadline)
        start = self.offset
        if len(head) < wire.HEADER.size:
            self.offset += len(head)
            raise WireDecodeError(f"stream closed inside header ({len(head)} of {wire.HEADER.size} bytes)",
                                  self.offset)
        (n,) = wire.HEADER.unpack(head)
        if n > wire.MAX_MESSAGE:
            raise WireDecodeError(f"declared length {n} exceeds limit {wire.MAX_MESSAGE}", start)
        body = self.read_exact(n, deadline)
        self.offset += wire.HEADER.size + len(body)
        if len(body) < n:
            raise WireDecodeError(f"stream closed inside body ({len(body)} of {n} bytes)", self.offset)
        body_at = start + wire.HEADER.size
        return wire.parse_body(body, body_at), body_at

    def close(self):
        self._sel.close()


class ExternalOracle:
    """Spawns ``command`` and exchanges one request/reply per prediction.

    Images are sent inline as PNG; the frame is referenced by scene_id.
    """

    def __init__(self, command, timeout: float = 30.0, env: dict | None = None):
        if not command:
            raise OracleUnavailableError("no external oracle command configured")
        self.command = [str(c) for c in command]
        self.timeout = float(timeout)
        self.env = env
        self.query_count = 0
        self.server_info: dict = {}
        self._proc = None
        self._chan = None
        self._start()

    def _start(self):
        endpoint = " ".join(self.command)
        try:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                          stderr=subprocess.DEVNULL, env=self.env)
        except OSError as e:
            raise OracleUnavailableError(f"cannot start oracle process: {e}", endpoint) from None
        self._chan = _Channel(self._proc, self.timeout)
        try:
            self._chan.send(wire.hello())
            reply, _ = self._chan.receive()
        except (OSError, TimeoutError, WireDecodeError) as e:
            self.close()
            raise OracleUnavailableError(f"handshake failed: {e}", endpoint) from None
        if reply.get("type") != "hello" or reply.get("protocol") != wire.PROTOCOL:
            self.close()
            raise OracleUnavailableError(f"handshake failed: unexpected reply {reply!r:.200}", endpoint)
        if reply.get("version") != wire.VERSION:
            self.close()
            raise OracleUnavailableError(
                f"handshake failed: protocol version {reply.get('version')} != {wire.VERSION}", endpoint)
        self.server_info = reply
        log.info("external oracle ready: %s", endpoint)

    def predict(self, frame, images: dict) -> PredictedMap:
        if self._proc is None:
            raise ExternalServiceError("external oracle is closed")
        self.query_count += 1
        try:
            self._chan.send(wire.predict_request(frame.scene_id, images))
            reply, at = self._chan.receive()
        except (OSError, TimeoutError) as e:
            raise ExternalServiceError(f"oracle transport failed: {e}", " ".join(self.command)) from None
        return wire.parse_prediction(reply, at)

    def clone(self) -> "ExternalOracle":
        return ExternalOracle(self.command, self.timeout, self.env)

    def close(self):
        if self._proc is None:
            return
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._proc.stdout.close()
        self._chan.close()
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:  # interpreter shutdown
            pass
