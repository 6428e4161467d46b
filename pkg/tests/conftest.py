"""Shared scenes, maps and samplers for the test suite (maps are built once per session)."""
import math

import numpy as np
import pytest

from oracles import central_difference
from patchplan.index import locate_cell
from patchplan.mapping import MapParams, build_map
from patchplan.optimize import ObstacleQueryResult, objective_eval
from patchplan.pointcloud import (
    PointCloud,
    generate_block_scene,
    generate_plane_scene,
    generate_spiral_scene,
    generate_two_level_scene,
    generate_uneven_scene,
)
from patchplan.trajectory import RobotState, Waypoint


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail, known_gap=False):
    verdict = "PASS" if ok else ("FAIL (known gap, expected)" if known_gap else "FAIL")
    line = f"criterion {number:>2} {verdict}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def small_spiral_cloud():
    return generate_spiral_scene(8, 4, 2, 3.0, 0.2, 0.02, seed=1, apron_length=4)


def scene_clouds():
    """The scenes every per-scene property is checked on."""
    return {
        "plane": generate_plane_scene(12, 12, 0.2),
        "spiral": small_spiral_cloud(),
        "uneven": generate_uneven_scene(16, 0.2, 0.6, octaves=3, seed=3),
        "block": generate_block_scene(16, 0.2, (7, 7), 2.0, 1.0),
        "two-level": generate_two_level_scene(16, 0.2, (8, 4), (6, 6), 2.5, ramp_slope_deg=20),
    }


@pytest.fixture(scope="session")
def params():
    return MapParams()


@pytest.fixture(scope="session")
def scene_maps():
    return {name: build_map(cloud, MapParams()) for name, cloud in scene_clouds().items()}


@pytest.fixture(scope="session")
def flat_map():
    return build_map(generate_plane_scene(12, 12, 0.2), MapParams())


@pytest.fixture(scope="session")
def spiral_map(scene_maps):
    return scene_maps["spiral"]


@pytest.fixture(scope="session")
def two_level_map(scene_maps):
    return scene_maps["two-level"]


@pytest.fixture(scope="session")
def deck_map():
    """Ground plus a deck with no ramp: two disconnected levels."""
    return build_map(generate_two_level_scene(16, 0.2, (8, 4), (6, 6), 2.5), MapParams())


def grid_cloud(x0, x1, y0, y1, step, height=lambda x, y: 0.0 * x):
    xs = np.arange(x0, x1 + 1e-9, step)
    ys = np.arange(y0, y1 + 1e-9, step)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    X, Y = X.ravel(), Y.ravel()
    return PointCloud(np.column_stack([X, Y, height(X, Y)]), step)


# ---------------------------------------------------------------------------
# samplers


def random_waypoints(mlmap, count, seed):
    rng = np.random.default_rng(seed)
    trav = mlmap.traversable
    out = []
    for k in rng.choice(len(trav), size=count):
        p = trav[int(k)]
        w = rng.dirichlet([1.0, 1.0, 1.0])
        V = np.array(p.vertices)
        x, y, _ = w @ V
        if locate_cell(x, y, mlmap.params) != p.home:
            continue
        out.append(Waypoint(RobotState(float(x), float(y), p.plane_z(x, y), 0.0, 0.0, 0.0), p))
    return out


def random_configuration(rng, n=None):
    n = n or int(rng.integers(4, 12))
    heading = np.cumsum(rng.normal(0.0, 0.9, n - 1))
    steps = rng.uniform(0.15, 0.6, n - 1)
    xy = np.vstack([[0.0, 0.0], np.cumsum(np.column_stack([steps * np.cos(heading), steps * np.sin(heading)]), axis=0)])
    obs = []
    for i in range(n):
        if rng.random() < 0.5:
            ang = rng.uniform(-math.pi, math.pi)
            r = rng.uniform(0.05, 0.95)
            pt = (xy[i, 0] + r * math.cos(ang), xy[i, 1] + r * math.sin(ang))
            obs.append(ObstacleQueryResult(pt, r, (0, 0)))
        else:
            obs.append(None)
    return xy, obs


def gradient_error(xy, obs, params):
    _, grad = objective_eval(xy, obs, params)
    mask = np.zeros_like(xy, dtype=bool)
    mask[1:-1] = True
    fd = central_difference(lambda z: objective_eval(z, obs, params)[0], xy, h=1e-6, mask=mask)
    return float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
