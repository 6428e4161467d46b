"""Independent reference implementations used to check the package.

Each oracle recomputes its answer from raw patch geometry by exhaustive
scans, sharing no lookup tables or helpers with the code under test.
"""
import math
from collections import defaultdict, deque

import numpy as np


# ---------------------------------------------------------------------------
# patch lookup


def _barycentric_xy(px, py, a, b, c):
    det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1])
    l1 = ((b[1] - c[1]) * (px - c[0]) + (c[0] - b[0]) * (py - c[1])) / det
    l2 = ((c[1] - a[1]) * (px - c[0]) + (a[0] - c[0]) * (py - c[1])) / det
    return l1, l2, 1.0 - l1 - l2


def brute_force_locate(x, y, z_ref, patches, eps=1e-12):
    """Scan every traversable patch: xy containment, then nearest plane height."""
    best, best_dz = None, math.inf
    for p in patches:
        if not p.traversable:
            continue
        a, b, c = p.vertices
        l1, l2, l3 = _barycentric_xy(x, y, a, b, c)
        if min(l1, l2, l3) < -eps:
            continue
        z = l1 * a[2] + l2 * b[2] + l3 * c[2]
        dz = abs(z - z_ref)
        if dz < best_dz:
            best, best_dz = p, dz
    return best


class BruteForceLocator:
    """Vectorised form of :func:`brute_force_locate` for many queries on one map."""

    def __init__(self, patches, eps=1e-12):
        self.patches = [p for p in patches if p.traversable]
        V = np.array([p.vertices for p in self.patches], dtype=np.float64)
        self.a, self.b, self.c = V[:, 0], V[:, 1], V[:, 2]
        a, b, c = self.a, self.b, self.c
        self.det = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
        self.eps = eps

    def __call__(self, x, y, z_ref):
        a, b, c = self.a, self.b, self.c
        l1 = ((b[:, 1] - c[:, 1]) * (x - c[:, 0]) + (c[:, 0] - b[:, 0]) * (y - c[:, 1])) / self.det
        l2 = ((c[:, 1] - a[:, 1]) * (x - c[:, 0]) + (a[:, 0] - c[:, 0]) * (y - c[:, 1])) / self.det
        l3 = 1.0 - l1 - l2
        inside = np.flatnonzero(np.minimum(np.minimum(l1, l2), l3) >= -self.eps)
        if inside.size == 0:
            return None
        z = l1[inside] * a[inside, 2] + l2[inside] * b[inside, 2] + l3[inside] * c[inside, 2]
        return self.patches[int(inside[np.argmin(np.abs(z - z_ref))])]


def plane_height(p, x, y):
    a, b, c = p.vertices
    l1, l2, l3 = _barycentric_xy(x, y, a, b, c)
    return l1 * a[2] + l2 * b[2] + l3 * c[2]


# ---------------------------------------------------------------------------
# same-level obstacles


def disk_cells(x, y, radius, res):
    """Every mesh cell whose closed square meets the closed disk, by direct distance."""
    lo_m = math.floor((x - radius) / res) - 1
    hi_m = math.floor((x + radius) / res) + 1
    lo_n = math.floor((y - radius) / res) - 1
    hi_n = math.floor((y + radius) / res) + 1
    out = []
    for m in range(lo_m, hi_m + 1):
        for n in range(lo_n, hi_n + 1):
            qx = min(max(x, m * res), (m + 1) * res)
            qy = min(max(y, n * res), (n + 1) * res)
            if (qx - x) ** 2 + (qy - y) ** 2 <= radius * radius:
                out.append((m, n))
    return out


class SameLevelOracle:
    """Breadth-first walk over traversable patches linked by identical vertices."""

    def __init__(self, patches):
        self.patches = [p for p in patches if p.traversable]
        by_vertex = defaultdict(list)
        for i, p in enumerate(self.patches):
            for v in p.vertices:
                by_vertex[tuple(v)].append(i)
        self.adj = defaultdict(set)
        for ids in by_vertex.values():
            for i in ids:
                self.adj[i].update(j for j in ids if j != i)
        self.index = {id(p): i for i, p in enumerate(self.patches)}

    def query(self, x, y, patch, radius, res):
        disk = disk_cells(x, y, radius, res)
        inside = set(disk)
        start = self.index[id(patch)]
        seen = {start}
        queue = deque([start])
        reached = set()
        self.visited_heights = set()
        while queue:
            i = queue.popleft()
            self.visited_heights.add(self.patches[i].mean_z)
            h = self.patches[i].home
            reached.add((h.m, h.n, h.part))
            for j in self.adj[i]:
                hj = self.patches[j].home
                if j not in seen and (hj.m, hj.n) in inside:
                    seen.add(j)
                    queue.append(j)
        best = None
        for m, n in disk:
            if (m, n, "down") in reached and (m, n, "up") in reached:
                continue
            cx, cy = (m + 0.5) * res, (n + 0.5) * res
            d = math.hypot(cx - x, cy - y)
            if d <= radius and (best is None or (d, m, n) < best):
                best = (d, m, n)
        return best, reached


# ---------------------------------------------------------------------------
# derivatives


def central_difference(f, x, h=1e-6, mask=None):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        if mask is not None and not mask[idx]:
            continue
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# geometry


def turning_angle(u, v):
    """Unsigned angle between two vectors via acos of the normalised dot product."""
    cos = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return math.acos(max(-1.0, min(1.0, cos)))


def distance_to_square(px, py, x0, y0, size):
    """Euclidean distance from a point to an axis-aligned square; -1 when inside."""
    dx = max(x0 - px, 0.0, px - (x0 + size))
    dy = max(y0 - py, 0.0, py - (y0 + size))
    if dx == 0.0 and dy == 0.0:
        return -1.0
    return math.hypot(dx, dy)


# ---------------------------------------------------------------------------
# motion primitives


def reference_primitive(w0, u, mlmap, robot):
    """Node expansion for one control, composed step by step from the single-step operations.

    Each step applies the state transition on the resident patch; when the new
    (x, y) leaves the patch's cell half, the neighbouring patch is looked up,
    the heading re-expressed in its frame and z re-projected onto it.
    """
    from patchplan.index import locate_cell, locate_patch
    from patchplan.search import TransitionError, adjust_orientation, adjust_z, state_transition
    from patchplan.trajectory import RobotState, Waypoint

    out = []
    w = w0
    for _ in range(robot.num_iter):
        s = state_transition(w, u, robot)
        patch = w.patch
        if locate_cell(s.x, s.y, mlmap.params) != patch.home:
            nxt = locate_patch(s.x, s.y, mlmap, hint=patch)
            if nxt is None:
                return None
            try:
                theta = adjust_orientation(s.theta, patch.T, nxt.T)
            except TransitionError:
                return None
            s = RobotState(s.x, s.y, adjust_z(s.x, s.y, nxt), s.v_left, s.v_right, theta)
            patch = nxt
        w = Waypoint(s, patch)
        out.append(w)
    return out
