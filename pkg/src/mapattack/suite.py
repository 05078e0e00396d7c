"""Seeded scene suites for experiments and acceptance runs."""

from __future__ import annotations

import math

import numpy as np

from .render import RenderConfig, render_surround_views
from .scene import ASYMMETRIC_KINDS, SceneFrame, SceneSpec, generate_scene

SYMMETRIC_KINDS = ("straight", "intersection")


def suite_specs(n_asym: int, n_sym: int, seed: int = 0, asym_kinds=ASYMMETRIC_KINDS,
                sym_kinds=SYMMETRIC_KINDS) -> list[SceneSpec]:
    """``n_asym`` asymmetric then ``n_sym`` symmetric specs; kinds cycle, parameters are drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_asym):
        kind = asym_kinds[i % len(asym_kinds)]
        width = float(rng.uniform(6.5, 8.0))
        curv = float(rng.uniform(0.35, 0.55))
        if kind == "merge":
            # the S-bend radius must clear the adjacent-lane centerline offset
            curv = min(curv, 0.9 / (width / 4 + 0.1))
        specs.append(SceneSpec(
            road_kind=kind,
            road_width=width,
            anchor_distance=float(rng.uniform(9.0, 15.0)),
            branch_curvature=curv,
            side="right" if rng.random() < 0.5 else "left",
            seed=int(rng.integers(2**31)),
            scene_id=f"{kind}-{i:03d}",
        ))
    for i in range(n_sym):
        kind = sym_kinds[i % len(sym_kinds)]
        bend = kind == "straight" and rng.random() < 0.5
        specs.append(SceneSpec(
            road_kind=kind,
            road_width=float(rng.uniform(6.5, 8.0)),
            anchor_distance=float(rng.uniform(9.0, 15.0)),
            turn_radius=float(rng.uniform(40.0, 150.0)) if bend else math.inf,
            seed=int(rng.integers(2**31)),
            scene_id=f"{kind}-{i:03d}",
        ))
    return specs


def generate_suite(specs, render: RenderConfig | None = None) -> list[SceneFrame]:
    return [render_surround_views(generate_scene(s), render) for s in specs]
