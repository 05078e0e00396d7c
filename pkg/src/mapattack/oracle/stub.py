"""Echo stub for the external-oracle protocol.

    python -m mapattack.oracle.stub --fixture map.json [--mode ok|bad-hello|old-version|garbage|truncated]

Answers every prediction with the fixture's PredictedMap. The non-ok modes
misbehave on purpose so clients' error paths can be exercised.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import wire

MODES = ("ok", "bad-hello", "old-version", "garbage", "truncated")


def serve(fixture: dict, mode: str, stdin, stdout) -> int:
    try:
        msg, off = wire.read_message(stdin)
    except Exception:
        return 1
    if msg.get("type") != "hello":
        return 1
    if mode == "bad-hello":
        stdout.write(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        stdout.flush()
        return 0
    version = wire.VERSION - 1 if mode == "old-version" else wire.VERSION
    wire.write_message(stdout, {**wire.hello(), "version": version, "server": "stub"})
    reply = {"type": "prediction", "elements": fixture.get("elements", [])}
    while True:
        try:
            msg, off = wire.read_message(stdin, off)
        except Exception:
            return 0
        if msg.get("type") != "predict":
            wire.write_message(stdout, {"type": "error", "message": f"unsupported type {msg.get('type')!r}"})
            continue
        if mode == "garbage":
            body = b'{"type": "prediction", "elements": [ {"class": '
            stdout.write(wire.HEADER.pack(len(body)) + body)
            stdout.flush()
        elif mode == "truncated":
            data = wire.encode_message(reply)
            stdout.write(data[: len(data) // 2])
            stdout.flush()
            return 0
        else:
            wire.write_message(stdout, reply)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m mapattack.oracle.stub")
    ap.add_argument("--fixture", required=True, help="JSON file holding a PredictedMap dict")
    ap.add_argument("--mode", choices=MODES, default="ok")
    args = ap.parse_args(argv)
    with open(args.fixture, encoding="utf-8") as fh:
        fixture = json.load(fh)
    return serve(fixture, args.mode, sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    sys.exit(main())
