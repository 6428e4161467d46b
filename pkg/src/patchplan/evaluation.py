"""Map accuracy, trajectory quality and batch benchmarking."""
from __future__ import annotations

import csv
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .index import locate_cell
from .mapping import UP, MeshIndex, MultiLevelMap
from .optimize import DegenerateSegmentError, OptParams, nearest_obstacle, optimize_trajectory
from .pointcloud import PointCloud
from .search import InfeasibleError, InvalidEndpointError, RobotParams, search
from .trajectory import Trajectory

HeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class MapAccuracyReport:
    per_patch: Dict[int, float]  # pid -> mean |dz| over associated points
    counts: Dict[int, int]
    E_avg: float
    num_traversable: int
    num_unmatched: int  # traversable patches with no associated point

    def to_dict(self) -> dict:
        return {
            "E_avg": self.E_avg,
            "num_traversable": self.num_traversable,
            "num_evaluated": len(self.per_patch),
            "num_unmatched": self.num_unmatched,
            "E_max": max(self.per_patch.values(), default=0.0),
        }


def _point_keys(xy: np.ndarray, res: float):
    m = np.floor(xy[:, 0] / res).astype(np.int64)
    n = np.floor(xy[:, 1] / res).astype(np.int64)
    up = (xy[:, 1] - n * res) > (xy[:, 0] - m * res)
    return m, n, up


def _triangle_samples(k: int) -> np.ndarray:
    """Barycentric weights of a k-subdivision lattice strictly inside a triangle."""
    rows = []
    for i in range(k):
        for j in range(k - i):
            # centroid of each small upward triangle
            rows.append(((i + 1 / 3) / k, (j + 1 / 3) / k))
    w = np.array(rows)
    return np.column_stack([1.0 - w.sum(axis=1), w])


def map_accuracy(mlmap: MultiLevelMap, ground_truth: Union[PointCloud, HeightFn],
                 samples_per_edge: int = 6) -> MapAccuracyReport:
    """Mean vertical discrepancy between traversable patches and ground truth.

    A ground-truth point counts for a patch when its (x, y) lies in the patch's
    cell half and its z is within ``thr_slice`` of the patch plane; if several
    levels qualify, the nearest plane takes it. A callable ground truth is
    sampled on a barycentric lattice inside every traversable patch.
    """
    thr = mlmap.params.thr_slice
    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    trav = mlmap.traversable

    if callable(ground_truth) and not isinstance(ground_truth, PointCloud):
        bary = _triangle_samples(samples_per_edge)
        for p in trav:
            V = np.array(p.vertices)
            pts = bary @ V
            truth = np.asarray(ground_truth(pts[:, 0], pts[:, 1]), dtype=np.float64)
            dz = np.abs(pts[:, 2] - truth)
            dz = dz[dz <= thr]
            if len(dz):
                sums[p.pid] = float(dz.sum())
                counts[p.pid] = len(dz)
    else:
        pts = ground_truth.points
        m, n, up = _point_keys(pts, mlmap.params.res_m)
        order = np.lexsort((up, n, m))
        m, n, up, pts = m[order], n[order], up[order], pts[order]
        change = np.flatnonzero((np.diff(m) != 0) | (np.diff(n) != 0) | (np.diff(up) != 0)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(pts)]])
        for s, e in zip(starts.tolist(), ends.tolist()):
            key = MeshIndex(int(m[s]), int(n[s]), UP if up[s] else "down")
            cand = mlmap.traversable_parts.get(key)
            if not cand:
                continue
            P = pts[s:e]
            dz = np.empty((len(cand), len(P)))
            for k, p in enumerate(cand):
                nx, ny, nz = p.normal
                a = p.a
                plane = a[2] - (nx * (P[:, 0] - a[0]) + ny * (P[:, 1] - a[1])) / nz
                dz[k] = np.abs(plane - P[:, 2])
            best = np.argmin(dz, axis=0)
            best_dz = dz[best, np.arange(len(P))]
            ok = best_dz <= thr
            for k, p in enumerate(cand):
                sel = ok & (best == k)
                c = int(sel.sum())
                if c:
                    sums[p.pid] = sums.get(p.pid, 0.0) + float(best_dz[sel].sum())
                    counts[p.pid] = counts.get(p.pid, 0) + c

    per_patch = {pid: sums[pid] / counts[pid] for pid in sorted(sums)}
    e_avg = float(np.mean(list(per_patch.values()))) if per_patch else float("nan")
    return MapAccuracyReport(per_patch, {k: counts[k] for k in sorted(counts)}, e_avg,
                             len(trav), len(trav) - len(per_patch))


@dataclass
class TrajectoryReport:
    length: float
    mean_curvature: float
    max_curvature: float
    collision_free: Optional[bool]  # None when no map was given
    total_time: float
    num_interior: int  # interior waypoints that entered the curvature mean
    num_degenerate: int  # zero-length segments skipped

    def to_dict(self) -> dict:
        return asdict(self)


def discrete_curvatures(P: np.ndarray, eps: float = 1e-9) -> Tuple[List[float], int]:
    """Turning angle over incoming length at interior points, skipping zero-length segments."""
    P = np.asarray(P, dtype=np.float64)
    if len(P) < 2:
        return [], 0
    d = np.diff(P, axis=0)
    seg = np.linalg.norm(d, axis=1)
    good = seg >= eps
    degenerate = int((~good).sum())
    d, seg = d[good], seg[good]
    if len(d) < 2:
        return [], degenerate
    a, b = d[:-1], d[1:]
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    dot = np.sum(a * b, axis=1)
    theta = np.arctan2(cross, dot)
    return (theta / seg[:-1]).tolist(), degenerate


def check_collision_free(traj: Trajectory, mlmap: MultiLevelMap, safety_radius: float = 0.0,
                         z_tol: Optional[float] = None) -> bool:
    """Every waypoint rests on a traversable patch and keeps ``safety_radius`` from same-level obstacles."""
    if z_tol is None:
        z_tol = 0.5 * mlmap.params.thr_rep + 1e-9
    for w in traj.waypoints:
        s, p = w.state, w.patch
        if not p.traversable or locate_cell(s.x, s.y, mlmap.params) != p.home:
            return False
        if abs(p.plane_z(s.x, s.y) - s.z) > z_tol:
            return False
        if safety_radius > 0 and nearest_obstacle(s.x, s.y, p, mlmap, safety_radius) is not None:
            return False
    return True


def trajectory_metrics(traj: Trajectory, mlmap: Optional[MultiLevelMap] = None,
                       safety_radius: float = 0.0) -> TrajectoryReport:
    P = traj.positions()
    length = float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1))) if len(P) > 1 else 0.0
    kappas, degenerate = discrete_curvatures(P)
    collision_free = None if mlmap is None else check_collision_free(traj, mlmap, safety_radius)
    return TrajectoryReport(
        length=length,
        mean_curvature=float(np.mean(kappas)) if kappas else 0.0,
        max_curvature=float(np.max(kappas)) if kappas else 0.0,
        collision_free=collision_free,
        total_time=traj.total_time,
        num_interior=len(kappas),
        num_degenerate=degenerate,
    )


def random_pairs(mlmap: MultiLevelMap, n_pairs: int, seed: int, clearance: float = 0.0,
                 min_separation: float = 1.0):
    """Seeded start/goal pairs on patch centroids of the largest connected component.

    ``clearance`` drops candidate centroids with a same-level obstacle nearer
    than that distance.
    """
    labels = mlmap.components()
    valid = labels[labels >= 0]
    if n_pairs <= 0 or valid.size == 0:
        return []
    big = int(np.bincount(valid).argmax())
    cands = []
    for p in mlmap.patches:
        if labels[p.pid] != big:
            continue
        c = p.centroid
        if clearance > 0 and nearest_obstacle(c[0], c[1], p, mlmap, clearance) is not None:
            continue
        cands.append(tuple(float(v) for v in c))
    if len(cands) < 2:
        return []
    C = np.array(cands)
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        i, j = rng.choice(len(C), size=2, replace=False)
        if np.linalg.norm(C[i] - C[j]) < min_separation:
            continue
        pairs.append((cands[i], cands[j]))
    return pairs


PAIR_COLUMNS = (
    "pair", "start_x", "start_y", "start_z", "goal_x", "goal_y", "goal_z",
    "status", "success", "length", "mean_curvature", "max_curvature",
    "total_time", "expansions", "num_waypoints",
)


@dataclass
class BenchmarkResult:
    rows: List[dict]
    plan_times: List[float]  # wall-clock seconds per pair, kept apart from the deterministic rows
    summary: dict
    timing: dict = field(default_factory=dict)


def plan_and_optimize(start, goal, mlmap: MultiLevelMap, robot: RobotParams, opt: OptParams):
    """Search then both refinement stages; returns (search result, stage1, stage2, log rows)."""
    res = search(start, goal, mlmap, robot)
    stage1, stage2, rows = optimize_trajectory(res.trajectory, mlmap, opt)
    return res, stage1, stage2, rows


def _run_pair(k, start, goal, mlmap, robot, opt, safety_radius, clock):
    row = {c: "" for c in PAIR_COLUMNS}
    row.update(pair=k, start_x=start[0], start_y=start[1], start_z=start[2],
               goal_x=goal[0], goal_y=goal[1], goal_z=goal[2], success=False)
    t0 = clock()
    try:
        res, _, final, _ = plan_and_optimize(start, goal, mlmap, robot, opt)
    except InvalidEndpointError:
        row["status"] = "snap_failure"
    except InfeasibleError:
        row["status"] = "infeasible"
    except DegenerateSegmentError:
        row["status"] = "degenerate"
    else:
        rep = trajectory_metrics(final, mlmap, safety_radius)
        row.update(status="ok" if rep.collision_free else "collision",
                   success=bool(rep.collision_free), length=rep.length,
                   mean_curvature=rep.mean_curvature, max_curvature=rep.max_curvature,
                   total_time=rep.total_time, expansions=res.expansions,
                   num_waypoints=len(final))
    return row, clock() - t0


def run_benchmark(mlmap: MultiLevelMap, pairs: Sequence, robot: RobotParams, opt: OptParams,
                  safety_radius: float = 0.0, clock=time.perf_counter, workers: int = 1) -> BenchmarkResult:
    """Plan and optimize every pair; failures are recorded, never raised.

    With ``workers > 1`` pairs run on a thread pool over the shared read-only
    map; rows keep pair order, and each T_p is measured on its own thread.
    """
    mlmap.neighbors  # build shared lazy caches before any worker starts
    mlmap.components()
    jobs = [(k, start, goal, mlmap, robot, opt, safety_radius, clock) for k, (start, goal) in enumerate(pairs)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_pair(*job), jobs))
    else:
        results = [_run_pair(*job) for job in jobs]
    rows = [r for r, _ in results]
    times = [t for _, t in results]
    return BenchmarkResult(rows, times, summarize(rows), timing_summary(times))


def summarize(rows: Sequence[dict]) -> dict:
    ok = [r for r in rows if r["success"]]
    statuses: Dict[str, int] = {}
    for r in rows:
        statuses[r["status"]] = statuses.get(r["status"], 0) + 1
    return {
        "num_pairs": len(rows),
        "num_success": len(ok),
        "P": len(ok) / len(rows) if rows else None,
        "mean_L": float(np.mean([r["length"] for r in ok])) if ok else None,
        "mean_kappa": float(np.mean([r["mean_curvature"] for r in ok])) if ok else None,
        "status_counts": dict(sorted(statuses.items())),
    }


def timing_summary(times: Sequence[float], build_time: Optional[float] = None) -> dict:
    out = {
        "mean_T_p": statistics.fmean(times) if times else None,
        "median_T_p": statistics.median(times) if times else None,
        "T_p": list(times),
    }
    if build_time is not None:
        out["T_c"] = build_time
    return out


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_pairs_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_COLUMNS)
        for r in rows:
            writer.writerow([_cell(r[c]) for c in PAIR_COLUMNS])


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_summary(result: BenchmarkResult, path, timing_path=None) -> None:
    """Summary JSON, reproducible byte for byte; wall-clock numbers go to ``timing_path``."""
    write_json({"summary": result.summary}, path)
    if timing_path is not None:
        write_json({"timing": result.timing}, timing_path)
