"""Shortest forward-only curves of bounded curvature between two poses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
WORDS = ("LSL", "RSR", "LSR", "RSL", "RLR", "LRL")
_TURN = {"L": 1.0, "S": 0.0, "R": -1.0}


def _mod(a: float) -> float:
    return a - TWO_PI * math.floor(a / TWO_PI)


def _word_params(word: str, a: float, b: float, d: float):
    """Normalized segment lengths (t, p, q) of one word, or None if infeasible."""
    sa, sb, ca, cb = math.sin(a), math.sin(b), math.cos(a), math.cos(b)
    cab = math.cos(a - b)
    if word == "LSL":
        p2 = 2.0 + d * d - 2.0 * cab + 2.0 * d * (sa - sb)
        if p2 < 0:
            return None
        tmp = math.atan2(cb - ca, d + sa - sb)
        return _mod(-a + tmp), math.sqrt(p2), _mod(b - tmp)
    if word == "RSR":
        p2 = 2.0 + d * d - 2.0 * cab + 2.0 * d * (sb - sa)
        if p2 < 0:
            return None
        tmp = math.atan2(ca - cb, d - sa + sb)
        return _mod(a - tmp), math.sqrt(p2), _mod(-b + tmp)
    if word == "LSR":
        p2 = -2.0 + d * d + 2.0 * cab + 2.0 * d * (sa + sb)
        if p2 < 0:
            return None
        p = math.sqrt(p2)
        tmp = math.atan2(-ca - cb, d + sa + sb) - math.atan2(-2.0, p)
        return _mod(-a + tmp), p, _mod(-_mod(b) + tmp)
    if word == "RSL":
        p2 = -2.0 + d * d + 2.0 * cab - 2.0 * d * (sa + sb)
        if p2 < 0:
            return None
        p = math.sqrt(p2)
        tmp = math.atan2(ca + cb, d - sa - sb) - math.atan2(2.0, p)
        return _mod(a - tmp), p, _mod(b - tmp)
    if word == "RLR":
        tmp = (6.0 - d * d + 2.0 * cab + 2.0 * d * (sa - sb)) / 8.0
        if abs(tmp) > 1.0:
            return None
        p = _mod(TWO_PI - math.acos(tmp))
        t = _mod(a - math.atan2(ca - cb, d - sa + sb) + p / 2.0)
        return t, p, _mod(a - b - t + p)
    if word == "LRL":
        tmp = (6.0 - d * d + 2.0 * cab + 2.0 * d * (sb - sa)) / 8.0
        if abs(tmp) > 1.0:
            return None
        p = _mod(TWO_PI - math.acos(tmp))
        t = _mod(-a - math.atan2(ca - cb, d + sa - sb) + p / 2.0)
        return t, p, _mod(_mod(b) - a - t + p)
    raise ValueError(f"unknown word {word!r}")


@dataclass(frozen=True)
class DubinsPath:
    start: tuple[float, float, float]
    word: str
    lengths: tuple[float, float, float]   # meters per segment
    radius: float

    @property
    def length(self) -> float:
        return float(sum(self.lengths))

    def sample(self, spacing: float) -> np.ndarray:
        """(n, 3) poses from start to end inclusive, at most ``spacing`` apart."""
        n = max(1, int(math.ceil(self.length / spacing)))
        return self.poses_at(np.linspace(0.0, self.length, n + 1))

    def poses_at(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = np.empty((len(s), 3))
        x, y, th = self.start
        s0 = 0.0
        for seg, (ch, ln) in enumerate(zip(self.word, self.lengths)):
            last = seg == 2
            sel = (s >= s0) & ((s <= s0 + ln) if last else (s < s0 + ln))
            k = _TURN[ch] / self.radius
            out[sel] = propagate(x, y, th, k, s[sel] - s0)
            x, y, th = propagate(x, y, th, k, np.array([ln]))[0]
            s0 += ln
        return out


def propagate(x: float, y: float, th: float, k: float, s: np.ndarray) -> np.ndarray:
    """Poses after driving arc lengths ``s`` at constant curvature ``k``."""
    s = np.asarray(s, dtype=float)
    if k == 0.0:
        return np.column_stack([x + s * math.cos(th), y + s * math.sin(th), np.full(len(s), th)])
    th1 = th + k * s
    return np.column_stack([x + (np.sin(th1) - math.sin(th)) / k, y - (np.cos(th1) - math.cos(th)) / k, th1])


def dubins_shortest(start, goal, radius: float) -> DubinsPath | None:
    x0, y0, t0 = map(float, start)
    x1, y1, t1 = map(float, goal)
    dx, dy = x1 - x0, y1 - y0
    d = math.hypot(dx, dy) / radius
    theta = _mod(math.atan2(dy, dx)) if d > 0 else 0.0
    a, b = _mod(t0 - theta), _mod(t1 - theta)
    best = None
    for word in WORDS:
        prm = _word_params(word, a, b, d)
        if prm is None:
            continue
        total = sum(prm)
        if best is None or total < best[0]:
            best = (total, word, prm)
    if best is None:
        return None
    return DubinsPath((x0, y0, t0), best[1], tuple(float(v * radius) for v in best[2]), float(radius))
