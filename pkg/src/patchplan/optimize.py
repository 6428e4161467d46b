"""Two-stage trajectory refinement on the patch map.

Stage 1 runs Polak-Ribiere conjugate gradient on the planar (x, y) objective
with obstacle, curvature and smoothness terms; obstacles come from a
breadth-first walk over same-level patches, so geometry on other floors never
pushes the path around. Every accepted step re-resolves each waypoint's patch
and puts z back on that patch's plane.

Stage 2 densifies the path by linear interpolation and smooths it in 3D with
projected gradient descent, keeping each point within half of ``thr_rep`` of
its resident patch plane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .index import locate_cell, locate_patch
from .mapping import DOWN, UP, MultiLevelMap, Patch
from .trajectory import RobotState, Trajectory, Waypoint

ARMIJO_C = 1e-4
MIN_STEP = 1e-12


class DegenerateSegmentError(ValueError):
    pass


class InvalidTrajectoryError(ValueError):
    pass


@dataclass
class OptParams:
    w_o: float = 1.0
    w_c: float = 1.0
    w_s: float = 4.0
    r_o: float = 1.0
    c_max: float = 1.0
    max_iters_stage1: int = 100
    max_iters_stage2: int = 20
    grad_tol: float = 1e-4
    interp_factor: int = 2
    fix_original: bool = True
    stride: int = 5  # keep every stride-th search waypoint for stage 1

    def validate(self) -> "OptParams":
        for name in ("w_o", "w_c", "w_s", "c_max", "grad_tol"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.r_o > 0:
            raise ValueError("r_o must be positive")
        for name in ("max_iters_stage1", "max_iters_stage2"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        for name in ("interp_factor", "stride"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1")
        return self


class ObstacleQueryResult(NamedTuple):
    point: Tuple[float, float]  # centre of the obstacle mesh cell
    distance: float
    cell: Tuple[int, int]


# ---------------------------------------------------------------------------
# same-level obstacle lookup


def _stencil(radius: float, res: float) -> np.ndarray:
    k = math.ceil(radius / res) + 1
    return np.array([(dm, dn) for dm in range(-k, k + 1) for dn in range(-k, k + 1)], dtype=np.int64)


def _disk_masks(xy: np.ndarray, radius: float, res: float):
    """Base cells and, per point, which stencil cells intersect the closed disk."""
    offs = _stencil(radius, res)
    x, y = xy[:, 0:1], xy[:, 1:2]
    m0 = np.floor(xy[:, 0] / res).astype(np.int64)
    n0 = np.floor(xy[:, 1] / res).astype(np.int64)
    lo_x = (m0[:, None] + offs[:, 0]) * res
    lo_y = (n0[:, None] + offs[:, 1]) * res
    dx = np.maximum(np.maximum(lo_x - x, x - (lo_x + res)), 0.0)
    dy = np.maximum(np.maximum(lo_y - y, y - (lo_y + res)), 0.0)
    return offs, m0, n0, dx * dx + dy * dy <= radius * radius


def cells_in_disk(x: float, y: float, radius: float, res: float) -> List[Tuple[int, int]]:
    """Mesh cells whose square intersects the closed disk around (x, y), in (m, n) order."""
    offs, m0, n0, mask = _disk_masks(np.array([[x, y]], dtype=np.float64), radius, res)
    return [(int(m0[0] + dm), int(n0[0] + dn)) for dm, dn in offs[mask[0]]]


def _blocked_cells(patch: Patch, disk, mlmap: MultiLevelMap):
    inside = set(disk)
    patches, nbrs = mlmap.patches, mlmap.neighbors
    seen = {patch.pid}
    queue = [patch.pid]
    reached = set()
    for pid in queue:
        reached.add(patches[pid].home)
        for q in nbrs[pid]:
            if q not in seen:
                home = patches[q].home
                if (home.m, home.n) in inside:
                    seen.add(q)
                    queue.append(q)
    return [(m, n) for m, n in disk if (m, n, DOWN) not in reached or (m, n, UP) not in reached]


def nearest_obstacles(xy, patches: Sequence[Patch], mlmap: MultiLevelMap, r_o: float,
                      cache: Optional[dict] = None) -> List[Optional[ObstacleQueryResult]]:
    """Batch form of :func:`same_level_obstacles` for points with known patches.

    ``cache`` memoises the same-level walk per (patch, disk) across calls.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    for p in patches:
        if not p.traversable:
            raise ValueError("same-level expansion must start from a traversable patch")
    if cache is None:
        cache = {}
    res = mlmap.params.res_m
    offs, m0, n0, mask = _disk_masks(xy, r_o, res)
    out = []
    for i, p in enumerate(patches):
        mi, ni = int(m0[i]), int(n0[i])
        key = (p.pid, mi, ni, mask[i].tobytes())
        blocked = cache.get(key)
        if blocked is None:
            disk = [(mi + int(dm), ni + int(dn)) for dm, dn in offs[mask[i]]]
            blocked = cache[key] = _blocked_cells(p, disk, mlmap)
        x, y = float(xy[i, 0]), float(xy[i, 1])
        best, best_d = None, math.inf
        for m, n in blocked:
            cx, cy = (m + 0.5) * res, (n + 0.5) * res
            d = math.hypot(cx - x, cy - y)
            if d < best_d:
                best, best_d = ((cx, cy), (m, n)), d
        out.append(None if best is None or best_d > r_o else ObstacleQueryResult(best[0], best_d, best[1]))
    return out


def nearest_obstacle(x: float, y: float, patch: Patch, mlmap: MultiLevelMap,
                     r_o: float, cache: Optional[dict] = None) -> Optional[ObstacleQueryResult]:
    return nearest_obstacles([(x, y)], [patch], mlmap, r_o, cache)[0]


def same_level_obstacles(w: Waypoint, mlmap: MultiLevelMap, params: OptParams) -> Optional[ObstacleQueryResult]:
    """Nearest mesh cell that is not free at the waypoint's level, within ``r_o``.

    A cell is free only when both halves hold a traversable patch reachable from
    the waypoint's patch through shared vertices without leaving the disk.
    """
    return nearest_obstacle(w.state.x, w.state.y, w.patch, mlmap, params.r_o)


# ---------------------------------------------------------------------------
# planar objective


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def objective_terms(xy, obstacles: Sequence[Optional[ObstacleQueryResult]], params: OptParams):
    """Return (obstacle, curvature, smoothness) unweighted sums and their gradients."""
    xy = np.asarray(xy, dtype=np.float64)
    n = len(xy)
    if n < 3:
        raise ValueError("objective needs at least 3 waypoints")
    if len(obstacles) != n:
        raise ValueError("one obstacle entry per waypoint is required")
    d = np.diff(xy, axis=0)
    seg = np.hypot(d[:, 0], d[:, 1])
    if np.any(seg < 1e-9):
        raise DegenerateSegmentError("consecutive waypoints coincide")

    g_o = np.zeros_like(xy)
    f_o = 0.0
    for i, ob in enumerate(obstacles):
        if ob is None:
            continue
        diff = xy[i] - np.asarray(ob.point)
        dist = math.hypot(diff[0], diff[1])
        e = dist - params.r_o
        if e < 0:
            f_o += e * e
            if dist > 0:
                g_o[i] += 2.0 * e * diff / dist

    phi = np.arctan2(d[:, 1], d[:, 0])
    raw = _wrap(phi[1:] - phi[:-1])
    dphi = np.abs(raw)
    seg_in = seg[:-1]
    kappa = dphi / seg_in
    e = kappa - params.c_max
    active = e > 0
    f_c = float(np.sum(e[active] ** 2))
    g_c = np.zeros_like(xy)
    if np.any(active):
        dk = np.where(active, 2.0 * e, 0.0)
        d_in, d_out = d[:-1], d[1:]
        # d(phi)/d(vector) = (-dy, dx) / |v|^2
        dphi_out = np.column_stack([-d_out[:, 1], d_out[:, 0]]) / (seg[1:] ** 2)[:, None]
        dphi_in = np.column_stack([-d_in[:, 1], d_in[:, 0]]) / (seg_in ** 2)[:, None]
        sgn = np.sign(raw)
        coef = (dk * sgn / seg_in)[:, None]
        grad_out = coef * dphi_out
        grad_in = -coef * dphi_in - (dk * dphi / seg_in ** 3)[:, None] * d_in
        g_c[2:] += grad_out
        g_c[1:-1] -= grad_out
        g_c[1:-1] += grad_in
        g_c[:-2] -= grad_in

    s = xy[2:] - 2.0 * xy[1:-1] + xy[:-2]
    f_s = float(np.sum(s * s))
    g_s = np.zeros_like(xy)
    g_s[2:] += 2.0 * s
    g_s[1:-1] -= 4.0 * s
    g_s[:-2] += 2.0 * s
    return (f_o, g_o), (f_c, g_c), (f_s, g_s)


def objective_eval(xy, obstacles, params: OptParams):
    """Weighted objective value and gradient; endpoint gradients are zeroed."""
    (f_o, g_o), (f_c, g_c), (f_s, g_s) = objective_terms(xy, obstacles, params)
    value = params.w_o * f_o + params.w_c * f_c + params.w_s * f_s
    grad = params.w_o * g_o + params.w_c * g_c + params.w_s * g_s
    grad[0] = 0.0
    grad[-1] = 0.0
    return value, grad


# ---------------------------------------------------------------------------
# helpers


def check_on_patches(traj: Trajectory, mlmap: MultiLevelMap, z_tol: float = 1e-9) -> None:
    for i, w in enumerate(traj.waypoints):
        s, p = w.state, w.patch
        if not p.traversable:
            raise InvalidTrajectoryError(f"waypoint {i} rests on an untraversable patch")
        if locate_cell(s.x, s.y, mlmap.params) != p.home:
            raise InvalidTrajectoryError(f"waypoint {i} lies outside its patch footprint")
        if abs(p.plane_z(s.x, s.y) - s.z) > z_tol:
            raise InvalidTrajectoryError(f"waypoint {i} is off its patch plane")


def decimate(traj: Trajectory, stride: int, min_spacing: float = 1e-3) -> Trajectory:
    """Every ``stride``-th waypoint plus both ends, dropping near-duplicates in xy."""
    wps = traj.waypoints
    if len(wps) <= 2:
        return Trajectory(list(wps), list(traj.times))
    idx = list(range(0, len(wps), stride))
    if idx[-1] != len(wps) - 1:
        idx.append(len(wps) - 1)

    def gap(i, j):
        a, b = wps[i].state, wps[j].state
        return math.hypot(a.x - b.x, a.y - b.y)

    kept = [idx[0]]
    for i in idx[1:-1]:
        if gap(i, kept[-1]) > min_spacing:
            kept.append(i)
    last = idx[-1]
    while len(kept) > 1 and gap(last, kept[-1]) <= min_spacing:
        kept.pop()
    kept.append(last)
    return Trajectory([wps[i] for i in kept], [traj.times[i] for i in kept])


def _resolve(xy, patches, free_rows, mlmap):
    out = list(patches)
    for i in free_rows:
        p = locate_patch(float(xy[i, 0]), float(xy[i, 1]), mlmap, hint=patches[i])
        if p is None:
            return None
        out[i] = p
    return out


def _obstacles(xy, patches, mlmap, r_o, cache=None):
    return nearest_obstacles(xy, patches, mlmap, r_o, cache)


def planar_objective(traj: Trajectory, mlmap: MultiLevelMap, params: OptParams) -> float:
    """Objective of a trajectory with obstacles looked up at its current waypoints."""
    xy = traj.positions()[:, :2]
    obs = _obstacles(xy, [w.patch for w in traj.waypoints], mlmap, params.r_o)
    return objective_eval(xy, obs, params)[0]


# ---------------------------------------------------------------------------
# stage 1


def optimize_stage1(traj: Trajectory, mlmap: MultiLevelMap, params: OptParams,
                    log: Optional[list] = None) -> Trajectory:
    params.validate()
    check_on_patches(traj, mlmap)
    wps = traj.waypoints
    n = len(wps)
    if n < 3 or params.max_iters_stage1 == 0:
        return Trajectory(list(wps), list(traj.times))
    xy = traj.positions()[:, :2].copy()
    patches = [w.patch for w in wps]
    free = range(1, n - 1)
    max_step = 0.5 * mlmap.params.res_m
    cache: dict = {}

    def evaluate(points, pts_patches):
        obs = _obstacles(points, pts_patches, mlmap, params.r_o, cache)
        return objective_eval(points, obs, params)

    f, g = evaluate(xy, patches)
    d = -g
    alpha = 1.0
    nvars = 2 * (n - 2)
    for it in range(params.max_iters_stage1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= params.grad_tol:
            if log is not None:
                log.append((it, f, gnorm, 0.0))
            break
        slope = float(np.sum(g * d))
        if slope >= 0:
            d = -g
            slope = -gnorm * gnorm
        dmax = float(np.max(np.hypot(d[:, 0], d[:, 1])))
        alpha = min(2.0 * alpha, 1.0, max_step / dmax)
        accepted = None
        while alpha * dmax >= MIN_STEP:
            trial = xy + alpha * d
            trial_patches = _resolve(trial, patches, free, mlmap)
            if trial_patches is not None:
                try:
                    ft, gt = evaluate(trial, trial_patches)
                except DegenerateSegmentError:
                    ft = math.inf
                if ft <= f + ARMIJO_C * alpha * slope:
                    accepted = (trial, trial_patches, ft, gt)
                    break
            alpha *= 0.5
        if log is not None:
            log.append((it, f, gnorm, alpha if accepted else 0.0))
        if accepted is None:
            break  # stagnated
        xy, patches, f_new, g_new = accepted
        beta = max(0.0, float(np.sum(g_new * (g_new - g))) / (gnorm * gnorm))
        if (it + 1) % nvars == 0:
            beta = 0.0
        d = -g_new + beta * d
        f, g = f_new, g_new

    out = [wps[0]]
    for i in free:
        s = wps[i].state
        x, y = float(xy[i, 0]), float(xy[i, 1])
        p = patches[i]
        out.append(Waypoint(RobotState(x, y, p.plane_z(x, y), s.v_left, s.v_right, s.theta), p))
    out.append(wps[-1])
    return Trajectory(out, list(traj.times))


# ---------------------------------------------------------------------------
# stage 2


def interpolate(traj: Trajectory, factor: int, mlmap: MultiLevelMap):
    """Linear subdivision; returns (trajectory, flags marking original waypoints)."""
    wps, times = traj.waypoints, traj.times
    out, out_t, original = [wps[0]], [times[0]], [True]
    thr = mlmap.params.thr_slice
    for i in range(len(wps) - 1):
        a, b = wps[i], wps[i + 1]
        for k in range(1, factor):
            t = k / factor
            x = a.state.x + t * (b.state.x - a.state.x)
            y = a.state.y + t * (b.state.y - a.state.y)
            p = locate_patch(x, y, mlmap, hint=a.patch) or locate_patch(x, y, mlmap, hint=b.patch)
            if p is None:
                z_ref = a.state.z + t * (b.state.z - a.state.z)
                p = locate_patch(x, y, mlmap, z_ref=z_ref, max_dz=thr)
            if p is None:
                continue  # would leave the ground; the straight chord stays implicit
            s = a.state
            out.append(Waypoint(RobotState(x, y, p.plane_z(x, y), s.v_left, s.v_right, s.theta), p))
            out_t.append(times[i] + t * (times[i + 1] - times[i]))
            original.append(False)
        out.append(b)
        out_t.append(times[i + 1])
        original.append(True)
    return Trajectory(out, out_t), original


def objective3d(P, params: OptParams):
    """Curvature + smoothness objective on 3D points; returns (value, gradient)."""
    P = np.asarray(P, dtype=np.float64)
    if len(P) < 3:
        return 0.0, np.zeros_like(P)
    d = np.diff(P, axis=0)
    seg = np.linalg.norm(d, axis=1)
    if np.any(seg < 1e-9):
        raise DegenerateSegmentError("consecutive waypoints coincide")
    a, b = d[:-1], d[1:]
    la, lb = seg[:-1], seg[1:]
    ua, ub = a / la[:, None], b / lb[:, None]
    cross = np.linalg.norm(np.cross(ua, ub), axis=1)
    dot = np.sum(ua * ub, axis=1)
    theta = np.arctan2(cross, dot)
    kappa = theta / la
    e = kappa - params.c_max
    active = e > 0
    f_c = float(np.sum(e[active] ** 2))
    grad = np.zeros_like(P)
    if np.any(active):
        wa = ub - dot[:, None] * ua  # |wa| = |wb| = sin(theta)
        wb = ua - dot[:, None] * ub
        sin = np.maximum(cross, 1e-300)
        ok = (cross > 1e-12)[:, None]
        dth_da = np.where(ok, -wa / (sin * la)[:, None], 0.0)
        dth_db = np.where(ok, -wb / (sin * lb)[:, None], 0.0)
        dk = np.where(active, 2.0 * e, 0.0)[:, None]
        g_a = dk * (dth_da / la[:, None] - (theta / la ** 3)[:, None] * a)
        g_b = dk * (dth_db / la[:, None])
        g_a, g_b = params.w_c * g_a, params.w_c * g_b
        grad[1:-1] += g_a
        grad[:-2] -= g_a
        grad[2:] += g_b
        grad[1:-1] -= g_b
    s = P[2:] - 2.0 * P[1:-1] + P[:-2]
    f_s = float(np.sum(s * s))
    ws = params.w_s
    grad[2:] += ws * 2.0 * s
    grad[1:-1] -= ws * 4.0 * s
    grad[:-2] += ws * 2.0 * s
    return params.w_c * f_c + ws * f_s, grad


def curvature_terms3d(P, params: OptParams) -> float:
    """Unweighted 3D curvature penalty alone (for reporting)."""
    only_c = OptParams(w_o=0.0, w_c=1.0, w_s=0.0, r_o=params.r_o, c_max=params.c_max)
    return objective3d(P, only_c)[0]


def optimize_stage2(traj: Trajectory, mlmap: MultiLevelMap, params: OptParams,
                    log: Optional[list] = None) -> Trajectory:
    params.validate()
    dense, original = interpolate(traj, params.interp_factor, mlmap)
    wps = dense.waypoints
    n = len(wps)
    if n < 3 or params.max_iters_stage2 == 0:
        return dense
    band = 0.5 * mlmap.params.thr_rep
    P = dense.positions()
    patches = [w.patch for w in wps]
    fixed = np.array(original if params.fix_original else [False] * n)
    fixed[0] = fixed[-1] = True
    free = np.flatnonzero(~fixed).tolist()
    if not free:
        return dense
    max_step = 0.25 * mlmap.params.res_m

    f, g = objective3d(P, params)
    g[fixed] = 0.0
    alpha = 1.0
    for it in range(params.max_iters_stage2):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= params.grad_tol:
            if log is not None:
                log.append((it, f, gnorm, 0.0))
            break
        gmax = float(np.max(np.linalg.norm(g, axis=1)))
        alpha = min(2.0 * alpha, 1.0, max_step / gmax)
        accepted = None
        while alpha * gmax >= MIN_STEP:
            trial = P - alpha * g
            trial_patches = _resolve(trial, patches, free, mlmap)
            if trial_patches is not None:
                for i in free:
                    zp = trial_patches[i].plane_z(trial[i, 0], trial[i, 1])
                    trial[i, 2] = min(max(trial[i, 2], zp - band), zp + band)
                try:
                    ft, gt = objective3d(trial, params)
                except DegenerateSegmentError:
                    ft = math.inf
                if ft <= f + ARMIJO_C * float(np.sum(g * (trial - P))):
                    accepted = (trial, trial_patches, ft, gt)
                    break
            alpha *= 0.5
        if log is not None:
            log.append((it, f, gnorm, alpha if accepted else 0.0))
        if accepted is None:
            break
        P, patches, f, g = accepted
        g[fixed] = 0.0

    out = []
    for i, w in enumerate(wps):
        if fixed[i]:
            out.append(w)
            continue
        s = w.state
        p = patches[i]
        x, y, z = (float(v) for v in P[i])
        if abs(z - p.plane_z(x, y)) > band + 1e-12:
            raise AssertionError(f"stage-2 waypoint {i} left the ground band")
        out.append(Waypoint(RobotState(x, y, z, s.v_left, s.v_right, s.theta), p))
    return Trajectory(out, list(dense.times))


def optimize_trajectory(initial: Trajectory, mlmap: MultiLevelMap, params: OptParams):
    """Decimate, run both stages; returns (stage1, stage2, log rows)."""
    log: list = []
    coarse = decimate(initial, params.stride)
    stage1 = optimize_stage1(coarse, mlmap, params, log=log)
    stage2_log: list = []
    stage2 = optimize_stage2(stage1, mlmap, params, log=stage2_log)
    rows = [("stage1",) + r for r in log] + [("stage2",) + r for r in stage2_log]
    return stage1, stage2, rows


def write_optimization_log(rows, path) -> None:
    lines = ["stage,iteration,objective,grad_norm,step"]
    for stage, it, f, gn, step in rows:
        lines.append(f"{stage},{it},{f!r},{gn!r},{step!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
