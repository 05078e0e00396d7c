from __future__ import annotations

import functools

import pytest

from mapattack.render import render_surround_views
from mapattack.scene import SceneSpec, generate_scene


@functools.lru_cache(maxsize=None)
def rendered(**kw):
    return render_surround_views(generate_scene(SceneSpec(**kw)))


@pytest.fixture(scope="session")
def fork_frame():
    return rendered(road_kind="fork", side="right", anchor_distance=12.0, branch_curvature=0.45, seed=3,
                    scene_id="fork-fixture")


@pytest.fixture(scope="session")
def left_fork_frame():
    return rendered(road_kind="fork", side="left", anchor_distance=10.0, branch_curvature=0.4, seed=5,
                    scene_id="fork-left-fixture")


@pytest.fixture(scope="session")
def straight_frame():
    return rendered(road_kind="straight", road_width=7.0, seed=1, scene_id="straight-fixture")


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one summary line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
