"""Min-time A* over differential-drive motion primitives laid on patches."""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .index import locate_patch
from .mapping import DOWN, UP, MultiLevelMap, Patch
from .trajectory import RobotState, Trajectory, Waypoint

TWO_PI = 2.0 * math.pi


class TransitionError(ValueError):
    """Heading cannot be carried onto the new patch."""


class InvalidEndpointError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    pass


@dataclass
class RobotParams:
    track_width: float = 0.5
    a_max: float = 1.0
    v_max: float = 1.0
    accel_levels: int = 3
    dt: float = 0.1
    num_iter: int = 10
    voxel_size: Optional[float] = None  # None -> res_m / 2
    goal_tol: float = 0.5
    max_expansions: int = 200_000
    forward_only: bool = False

    def validate(self) -> "RobotParams":
        for name in ("track_width", "a_max", "v_max", "dt", "goal_tol"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive number, got {value!r}")
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not isinstance(self.accel_levels, int) or self.accel_levels < 2:
            raise ValueError("accel_levels must be an integer >= 2")
        if not isinstance(self.num_iter, int) or self.num_iter < 1:
            raise ValueError("num_iter must be a positive integer")
        if not isinstance(self.max_expansions, int) or self.max_expansions < 1:
            raise ValueError("max_expansions must be a positive integer")
        return self

    def control_set(self) -> List[Tuple[float, float]]:
        levels = np.linspace(-self.a_max, self.a_max, self.accel_levels).tolist()
        return [(al, ar) for al in levels for ar in levels]

    @property
    def primitive_duration(self) -> float:
        return self.num_iter * self.dt


@dataclass
class MotionPrimitive:
    control: Tuple[float, float]
    waypoints: List[Waypoint]
    duration: float


class SearchNode:
    __slots__ = ("waypoint", "g", "h", "parent", "primitive", "voxel", "is_goal", "control", "steps")

    def __init__(self, waypoint, g, h, parent=None, primitive=None, voxel=None, is_goal=False,
                 control=None, steps=0):
        self.waypoint = waypoint
        self.g = g
        self.h = h
        self.parent = parent
        self.primitive = primitive
        self.voxel = voxel
        self.is_goal = is_goal
        # the primitive is regenerated from (control, steps) once the path is known
        self.control = control
        self.steps = steps


@dataclass
class SearchResult:
    trajectory: Trajectory
    path_nodes: List[SearchNode]
    cost: float
    expansions: int
    goal: Tuple[float, float, float]
    pruned: List[Tuple[tuple, float]] = field(default_factory=list)
    retained: Dict[tuple, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# single-step kinematics


def _integrate(x, y, vl, vr, th, al, ar, patch, robot, lo):
    dt, l, vmax = robot.dt, robot.track_width, robot.v_max
    vl1 = min(max(vl + al * dt, lo), vmax)
    vr1 = min(max(vr + ar * dt, lo), vmax)
    # accelerations actually realised after clamping
    th1 = th + ((vl - vr) * (dt / l) + ((vl1 - vl) - (vr1 - vr)) * (dt / (2.0 * l)))
    half_dt = 0.5 * dt
    v0 = (vl + vr) * half_dt
    v1 = (vl1 + vr1) * half_dt
    cx = 0.5 * (v0 * math.cos(th) + v1 * math.cos(th1))
    cy = 0.5 * (v0 * math.sin(th) + v1 * math.sin(th1))
    xa, ya = patch.x_axis, patch.y_axis
    return x + cx * xa[0] + cy * ya[0], y + cx * xa[1] + cy * ya[1], vl1, vr1, th1


def state_transition(w: Waypoint, u: Tuple[float, float], robot: RobotParams) -> RobotState:
    s, p = w.state, w.patch
    lo = 0.0 if robot.forward_only else -robot.v_max
    x1, y1, vl1, vr1, th1 = _integrate(s.x, s.y, s.v_left, s.v_right, s.theta, u[0], u[1], p, robot, lo)
    return RobotState(x1, y1, p.plane_z(x1, y1), vl1, vr1, th1)


def _rotate_heading(theta, xa_pm, ya_pm, xa_cm, ya_cm):
    c, s = math.cos(theta), math.sin(theta)
    # world-xy direction of the heading on the previous patch
    dx = xa_pm[0] * c + ya_pm[0] * s
    dy = xa_pm[1] * c + ya_pm[1] * s
    a, b, cc, d = xa_cm[0], ya_cm[0], xa_cm[1], ya_cm[1]
    det = a * d - b * cc
    if abs(det) <= 1e-12:
        raise TransitionError("target patch frame has a singular xy block")
    v1 = (d * dx - b * dy) / det
    v2 = (a * dy - cc * dx) / det
    if math.hypot(v1, v2) <= 1e-12:
        raise TransitionError("heading has no component in the new patch")
    new = math.atan2(v2, v1)
    return theta + math.remainder(new - theta, TWO_PI)


def adjust_orientation(theta_pm: float, T_pm, T_cm) -> float:
    """Heading on the current patch whose world-xy projection matches the previous one."""
    T_pm = np.asarray(T_pm, dtype=np.float64)
    T_cm = np.asarray(T_cm, dtype=np.float64)
    return _rotate_heading(theta_pm, T_pm[:3, 0], T_pm[:3, 1], T_cm[:3, 0], T_cm[:3, 1])


def adjust_z(x: float, y: float, patch: Patch) -> float:
    return patch.plane_z(x, y)


def heading_xy(theta: float, patch: Patch) -> Tuple[float, float]:
    """Unit world-xy direction of a patch-frame heading."""
    c, s = math.cos(theta), math.sin(theta)
    dx = patch.x_axis[0] * c + patch.y_axis[0] * s
    dy = patch.x_axis[1] * c + patch.y_axis[1] * s
    norm = math.hypot(dx, dy)
    return dx / norm, dy / norm


def theta_for_world_yaw(yaw: float, patch: Patch) -> float:
    flat = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    return _rotate_heading(yaw, flat[0], flat[1], patch.x_axis, patch.y_axis)


# ---------------------------------------------------------------------------
# primitives and node expansion


def _simulate(w0: Waypoint, u, mlmap: MultiLevelMap, robot: RobotParams, record: bool,
              goal: Optional[Tuple[float, float, float, float]] = None):
    """Core primitive integrator shared by :func:`rollout` and the search loop.

    Returns None when a step lands off traversable ground, otherwise
    ``(steps, waypoint, hit)``: the recorded waypoints (empty unless
    ``record``), the last waypoint and, when ``goal = (gx, gy, gz, tol)`` is
    given, the 0-based step that first entered the goal ball (None if none
    did; integration stops there).
    """
    res = mlmap.params.res_m
    dt, l, vmax = robot.dt, robot.track_width, robot.v_max
    lo = 0.0 if robot.forward_only else -vmax
    dvl, dvr = u[0] * dt, u[1] * dt
    k_turn = dt / l
    k_acc = dt / (2.0 * l)
    half_dt = 0.5 * dt
    s = w0.state
    x, y, vl, vr, th = s.x, s.y, s.v_left, s.v_right, s.theta
    patch = w0.patch
    hm, hn, hp = patch.home
    xa, ya = patch.x_axis, patch.y_axis
    t11, t12, t21, t22 = xa[0], ya[0], xa[1], ya[1]
    c0, s0 = math.cos(th), math.sin(th)
    cos, sin, floor = math.cos, math.sin, math.floor
    if goal is not None:
        gx, gy, gz, tol = goal
        tol2 = tol * tol
    steps = []
    hit = None
    for k in range(robot.num_iter):
        vl1 = vl + dvl
        if vl1 > vmax:
            vl1 = vmax
        elif vl1 < lo:
            vl1 = lo
        vr1 = vr + dvr
        if vr1 > vmax:
            vr1 = vmax
        elif vr1 < lo:
            vr1 = lo
        # accelerations actually realised after clamping
        th1 = th + ((vl - vr) * k_turn + ((vl1 - vl) - (vr1 - vr)) * k_acc)
        c1, s1 = cos(th1), sin(th1)
        v0 = (vl + vr) * half_dt
        v1 = (vl1 + vr1) * half_dt
        cx = 0.5 * (v0 * c0 + v1 * c1)
        cy = 0.5 * (v0 * s0 + v1 * s1)
        x = x + cx * t11 + cy * t12
        y = y + cx * t21 + cy * t22
        vl, vr, th = vl1, vr1, th1
        m = floor(x / res)
        n = floor(y / res)
        part = DOWN if (y - n * res) <= (x - m * res) else UP
        if m != hm or n != hn or part != hp:
            nxt = locate_patch(x, y, mlmap, hint=patch)
            if nxt is None:
                return None
            try:
                th = _rotate_heading(th, xa, ya, nxt.x_axis, nxt.y_axis)
            except TransitionError:
                return None
            patch = nxt
            hm, hn, hp = patch.home
            xa, ya = patch.x_axis, patch.y_axis
            t11, t12, t21, t22 = xa[0], ya[0], xa[1], ya[1]
            c1, s1 = cos(th), sin(th)
        c0, s0 = c1, s1
        if record:
            steps.append(Waypoint(RobotState(x, y, patch.plane_z(x, y), vl, vr, th), patch))
        if goal is not None:
            d2 = (x - gx) ** 2 + (y - gy) ** 2
            if d2 <= tol2 and d2 + (patch.plane_z(x, y) - gz) ** 2 <= tol2:
                hit = k
                break
    last = steps[-1] if record else Waypoint(RobotState(x, y, patch.plane_z(x, y), vl, vr, th), patch)
    return steps, last, hit


def rollout(w0: Waypoint, u: Tuple[float, float], mlmap: MultiLevelMap,
            robot: RobotParams) -> Optional[List[Waypoint]]:
    """Integrate one primitive; None when a step lands off traversable ground.

    Same arithmetic as :func:`state_transition`, unrolled for speed.
    """
    out = _simulate(w0, u, mlmap, robot, True)
    return None if out is None else out[0]


def expand_node(node: SearchNode, mlmap: MultiLevelMap, robot: RobotParams) -> List[MotionPrimitive]:
    """Every control whose full primitive stays on traversable patches."""
    out = []
    for u in robot.control_set():
        wps = rollout(node.waypoint, u, mlmap, robot)
        if wps is not None:
            out.append(MotionPrimitive(u, wps, robot.primitive_duration))
    return out


def _voxel(x, y, z, size):
    return (math.floor(x / size), math.floor(y / size), math.floor(z / size))


def snap_endpoint(pose: Sequence[float], mlmap: MultiLevelMap, what: str = "endpoint") -> Patch:
    x, y, z_ref = pose
    p = locate_patch(x, y, mlmap, z_ref=z_ref, max_dz=mlmap.params.thr_slice)
    if p is None:
        raise InvalidEndpointError(f"{what} ({x:.3f}, {y:.3f}, {z_ref:.3f}) is not on a traversable patch")
    return p


def search(start: Sequence[float], goal: Sequence[float], mlmap: MultiLevelMap, robot: RobotParams,
           start_yaw: Optional[float] = None, record_pruning: bool = False) -> SearchResult:
    """A* with time as edge cost; ``start``/``goal`` are (x, y, reference z).

    The heuristic is the straight-line distance to the goal ball divided by
    ``v_max``. At most one node per position voxel is kept (the cheapest).
    Endpoints on disconnected patch regions fail fast as infeasible.
    """
    robot.validate()
    sp = snap_endpoint(start, mlmap, "start")
    gp = snap_endpoint(goal, mlmap, "goal")
    sx, sy = float(start[0]), float(start[1])
    gx, gy = float(goal[0]), float(goal[1])
    gz = gp.plane_z(gx, gy)
    if start_yaw is None:
        start_yaw = math.atan2(gy - sy, gx - sx) if (gx, gy) != (sx, sy) else 0.0
    w0 = Waypoint(RobotState(sx, sy, sp.plane_z(sx, sy), 0.0, 0.0, theta_for_world_yaw(start_yaw, sp)), sp)

    vmax, tol, dt = robot.v_max, robot.goal_tol, robot.dt
    vsize = robot.voxel_size or mlmap.params.res_m / 2.0

    def dist(w):
        s = w.state
        return math.sqrt((s.x - gx) ** 2 + (s.y - gy) ** 2 + (s.z - gz) ** 2)

    goal_ball = (gx, gy, gz, tol)
    num_iter = robot.num_iter

    labels = mlmap.components()
    if labels[sp.pid] != labels[gp.pid]:
        raise InfeasibleError("start and goal lie on disconnected patch regions")

    def heuristic(w):
        return max(0.0, dist(w) - tol) / vmax

    root = SearchNode(w0, 0.0, heuristic(w0), voxel=_voxel(*w0.xyz, vsize))
    if dist(w0) <= tol:
        return _finish(SearchNode(w0, 0.0, 0.0, parent=None, is_goal=True), 0, (gx, gy, gz), {}, [],
                       mlmap, robot)

    counter = itertools.count()
    retained: Dict[tuple, SearchNode] = {root.voxel: root}
    pruned: List[Tuple[tuple, float]] = []
    heap = [(root.g + root.h, root.h, next(counter), root)]
    expansions = 0
    controls = robot.control_set()
    span = robot.primitive_duration

    while heap:
        _, _, _, node = heapq.heappop(heap)
        if node.is_goal:
            return _finish(node, expansions, (gx, gy, gz), retained, pruned, mlmap, robot)
        if retained.get(node.voxel) is not node:
            continue
        expansions += 1
        if expansions > robot.max_expansions:
            raise InfeasibleError(f"node budget of {robot.max_expansions} expansions exhausted")
        for u in controls:
            sim = _simulate(node.waypoint, u, mlmap, robot, False, goal_ball)
            if sim is None:
                continue
            _, last, hit = sim
            if hit is not None:
                child = SearchNode(last, node.g + (hit + 1) * dt, 0.0, node, None, None, True, u, hit + 1)
                heapq.heappush(heap, (child.g, 0.0, next(counter), child))
                continue
            key = _voxel(*last.xyz, vsize)
            g = node.g + span
            incumbent = retained.get(key)
            if incumbent is not None and incumbent.g <= g:
                if record_pruning:
                    pruned.append((key, g))
                continue
            if incumbent is not None and record_pruning:
                pruned.append((key, incumbent.g))
            child = SearchNode(last, g, heuristic(last), node, None, key, False, u, num_iter)
            retained[key] = child
            heapq.heappush(heap, (g + child.h, child.h, next(counter), child))
    raise InfeasibleError("open list exhausted without reaching the goal")


def _finish(goal_node, expansions, goal, retained, pruned, mlmap, robot) -> SearchResult:
    chain = []
    node = goal_node
    while node is not None:
        chain.append(node)
        node = node.parent
    chain.reverse()
    waypoints = [chain[0].waypoint]
    controls = []
    times = [0.0]
    for node in chain[1:]:
        # replay with the same goal test so a goal primitive stops where it did in the search
        wps = _simulate(node.parent.waypoint, node.control, mlmap, robot, True, goal + (robot.goal_tol,))[0]
        assert len(wps) == node.steps
        node.primitive = MotionPrimitive(node.control, wps, node.steps * robot.dt)
        waypoints.extend(wps)
        controls.extend([node.control] * len(wps))
        base = times[-1]
        times.extend(base + (k + 1) * robot.dt for k in range(len(wps)))
    traj = Trajectory(waypoints, times, controls)
    return SearchResult(
        trajectory=traj,
        path_nodes=chain,
        cost=goal_node.g,
        expansions=expansions,
        goal=goal,
        pruned=pruned,
        retained={k: v.g for k, v in retained.items()},
    )
