"""Multi-level map construction from point clouds.

Points are clustered into square map cells, each cell is cut into vertical
slices, and slices of neighbouring cells are chained into triangular patches.
A patch lives in one half ("down" or "up") of a mesh cell; the mesh grid is
the map grid shifted by half a cell, so the corners of mesh cell (m, n) are the
centres of map cells (m, n), (m+1, n), (m+1, n+1) and (m, n+1).
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .pointcloud import Point3, PointCloud

DOWN = "down"
UP = "up"
PARTS = (DOWN, UP)


class MapError(ValueError):
    pass


class DegeneratePatchError(MapError):
    pass


class VerticalPatchError(MapError):
    pass


class MeshIndex(NamedTuple):
    m: int
    n: int
    part: str


@dataclass
class MapParams:
    res_pc: float = 0.2
    res_m: float = 0.6
    thr_slice: float = 1.0
    least_num: int = 3
    lam: float = 1.5
    thr_rep: float = 0.4
    thr_slope: float = 40.0  # degrees

    @classmethod
    def for_resolution(cls, res_pc: float, **overrides) -> "MapParams":
        overrides.setdefault("res_m", 3.0 * res_pc)
        return cls(res_pc=res_pc, **overrides)

    def validate(self) -> "MapParams":
        for name in ("res_pc", "res_m", "thr_slice", "lam", "thr_rep", "thr_slope"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise MapError(f"{name} must be a positive number, got {value!r}")
        if not isinstance(self.least_num, int) or self.least_num < 1:
            raise MapError(f"least_num must be a positive integer, got {self.least_num!r}")
        if self.res_m < self.res_pc:
            raise MapError(f"res_m ({self.res_m}) must not be smaller than res_pc ({self.res_pc})")
        if self.lam < 1.0:
            raise MapError(f"lam must be >= 1.0, got {self.lam}")
        if self.thr_slope >= 90.0:
            raise MapError("thr_slope must be below 90 degrees")
        return self


@dataclass(frozen=True)
class Slice:
    z_min: float
    z_max: float
    z_avg: float
    count: int


# ---------------------------------------------------------------------------
# clustering / slicing / connecting primitives


def cell_indices(xy: np.ndarray, res_m: float) -> np.ndarray:
    """Map-cell index of each row of ``xy``; cells are half-open around m * res_m."""
    return np.floor(np.asarray(xy, dtype=np.float64) / res_m + 0.5).astype(np.int64)


def cluster_points(cloud: PointCloud, params: MapParams) -> Dict[Tuple[int, int], np.ndarray]:
    pts = cloud.points
    if len(pts) == 0:
        raise MapError("cannot cluster an empty cloud")
    idx = cell_indices(pts[:, :2], params.res_m)
    order = np.lexsort((idx[:, 1], idx[:, 0]))
    idx_sorted = idx[order]
    change = np.ones(len(order), dtype=bool)
    change[1:] = np.any(idx_sorted[1:] != idx_sorted[:-1], axis=1)
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(order))
    return {
        (int(idx_sorted[s, 0]), int(idx_sorted[s, 1])): pts[np.sort(order[s:e])]
        for s, e in zip(starts, ends)
    }


def _slice_sorted(z: np.ndarray, group_start: np.ndarray, params: MapParams):
    """Split z (sorted within groups) at gaps > thr_slice; returns slice stats arrays."""
    n = len(z)
    split = group_start.copy()
    split[1:] |= (z[1:] - z[:-1]) > params.thr_slice
    starts = np.flatnonzero(split)
    counts = np.diff(np.append(starts, n))
    sums = np.add.reduceat(z, starts) if n else np.zeros(0)
    z_min = z[starts]
    z_max = z[starts + counts - 1]
    z_avg = sums / counts
    return starts, counts, z_min, z_max, z_avg


def slice_cell(z_values: Sequence[float], params: MapParams) -> List[Slice]:
    z = np.asarray(z_values, dtype=np.float64)
    if z.size == 0:
        return []
    if np.any(np.diff(z) < 0):
        raise ValueError("z_values must be sorted ascending")
    head = np.zeros(len(z), dtype=bool)
    head[0] = True
    _, counts, z_min, z_max, z_avg = _slice_sorted(z, head, params)
    return [
        Slice(float(lo), float(hi), float(avg), int(c))
        for lo, hi, avg, c in zip(z_min, z_max, z_avg, counts)
        if c >= params.least_num
    ]


def can_connect(s1: Slice, s2: Slice, params: MapParams) -> bool:
    tol = params.lam * params.res_pc
    return (s1.z_min - s2.z_max <= tol) and (s2.z_min - s1.z_max <= tol)


def representative_z(s: Slice, params: MapParams) -> float:
    return s.z_max if (s.z_max - s.z_min) > params.thr_rep else s.z_avg


def patch_frame(a, b, c):
    """Orthonormal patch frame and 4x4 transform for triangle (a, b, c).

    If the raw normal points down, b and c are treated as swapped so that the
    frame normal always has a positive world-z component. The x axis is
    horizontal (perpendicular to world y).
    """
    a = np.asarray(a, dtype=np.float64)
    ab = np.asarray(b, dtype=np.float64) - a
    ac = np.asarray(c, dtype=np.float64) - a
    cross = np.cross(ab, ac)
    norm = float(np.linalg.norm(cross))
    if norm <= 1e-12 * max(1.0, float(np.linalg.norm(ab) * np.linalg.norm(ac))):
        raise DegeneratePatchError("patch vertices are collinear")
    z_axis = cross / norm
    if z_axis[2] < 0:
        z_axis = -z_axis
    if z_axis[2] <= 1e-12:
        raise VerticalPatchError("patch is vertical; its frame is undefined")
    x_axis = np.array([z_axis[2], 0.0, -z_axis[0]])
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    y_axis /= np.linalg.norm(y_axis)
    T = np.eye(4)
    T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = x_axis, y_axis, z_axis, a
    return (x_axis, y_axis, z_axis), T


# ---------------------------------------------------------------------------
# patches and the map container


class Patch:
    """A triangular map element resting in one half of a mesh cell."""

    __slots__ = (
        "pid", "home", "level", "a", "b", "c", "normal", "x_axis", "y_axis", "traversable", "_vset",
    )

    def __init__(self, home: MeshIndex, a: Point3, b: Point3, c: Point3, normal, x_axis, y_axis,
                 traversable: bool, pid: int = -1, level: int = 0):
        self.pid = pid
        self.home = home
        self.level = level
        self.a, self.b, self.c = a, b, c
        self.normal = normal
        self.x_axis = x_axis
        self.y_axis = y_axis
        self.traversable = traversable
        self._vset = frozenset((a, b, c))

    @classmethod
    def from_vertices(cls, home: MeshIndex, a, b, c, thr_slope_deg: float) -> "Patch":
        a, b, c = Point3(*map(float, a)), Point3(*map(float, b)), Point3(*map(float, c))
        (xa, ya, za), _ = patch_frame(a, b, c)
        traversable = math.degrees(math.acos(min(1.0, float(za[2])))) < thr_slope_deg
        return cls(home, a, b, c, tuple(za.tolist()), tuple(xa.tolist()), tuple(ya.tolist()), traversable)

    @property
    def vertices(self) -> Tuple[Point3, Point3, Point3]:
        return (self.a, self.b, self.c)

    @property
    def slope_deg(self) -> float:
        return math.degrees(math.acos(min(1.0, self.normal[2])))

    @property
    def T(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = self.x_axis, self.y_axis, self.normal, self.a
        return T

    @property
    def mean_z(self) -> float:
        return (self.a.z + self.b.z + self.c.z) / 3.0

    @property
    def centroid(self) -> Tuple[float, float, float]:
        return (
            (self.a.x + self.b.x + self.c.x) / 3.0,
            (self.a.y + self.b.y + self.c.y) / 3.0,
            (self.a.z + self.b.z + self.c.z) / 3.0,
        )

    def plane_z(self, x: float, y: float) -> float:
        n1, n2, n3 = self.normal
        a = self.a
        return a.z - (n1 * (x - a.x) + n2 * (y - a.y)) / n3

    def shares_vertex_with(self, other: "Patch") -> bool:
        return not self._vset.isdisjoint(other._vset)

    def __repr__(self):
        flag = "T" if self.traversable else "U"
        return f"Patch(pid={self.pid}, home={tuple(self.home)}, level={self.level}, {flag}, z~{self.mean_z:.3f})"


@dataclass
class BuildStats:
    num_points: int = 0
    num_slices: int = 0
    discarded_points: int = 0
    num_candidates: int = 0
    num_deduplicated: int = 0
    num_vertical: int = 0


class MultiLevelMap:
    """Immutable collection of patches keyed by mesh cell half."""

    def __init__(self, params: MapParams, patches: Sequence[Patch],
                 slices: Optional[Dict[Tuple[int, int], List[Slice]]] = None,
                 stats: Optional[BuildStats] = None):
        self.params = params
        self.slices = slices or {}
        self.stats = stats or BuildStats()
        by_part: Dict[MeshIndex, List[Patch]] = defaultdict(list)
        for p in patches:
            by_part[p.home].append(p)
        ordered: List[Patch] = []
        self.parts: Dict[MeshIndex, Tuple[Patch, ...]] = {}
        self.traversable_parts: Dict[MeshIndex, Tuple[Patch, ...]] = {}
        for key in sorted(by_part):
            # stable sort keeps input order for equal heights
            group = sorted(by_part[key], key=lambda p: p.mean_z)
            for level, p in enumerate(group):
                p.level = level
            self.parts[key] = tuple(group)
            trav = tuple(p for p in group if p.traversable)
            if trav:
                self.traversable_parts[key] = trav
            ordered.extend(group)
        for pid, p in enumerate(ordered):
            p.pid = pid
        self.patches: Tuple[Patch, ...] = tuple(ordered)
        self._neighbors: Optional[List[Tuple[int, ...]]] = None
        self._components: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def traversable(self) -> List[Patch]:
        return [p for p in self.patches if p.traversable]

    @property
    def num_traversable(self) -> int:
        return sum(1 for p in self.patches if p.traversable)

    def patches_in(self, key: MeshIndex, traversable_only: bool = True) -> Tuple[Patch, ...]:
        table = self.traversable_parts if traversable_only else self.parts
        return table.get(key, ())

    def patch_at_level(self, key: MeshIndex, level: int) -> Patch:
        return self.parts[key][level]

    @property
    def neighbors(self) -> List[Tuple[int, ...]]:
        """For each pid, the traversable patches sharing a vertex with it."""
        if self._neighbors is None:
            by_vertex: Dict[Point3, List[int]] = defaultdict(list)
            for p in self.patches:
                if p.traversable:
                    for v in p.vertices:
                        by_vertex[v].append(p.pid)
            nbrs = []
            for p in self.patches:
                if not p.traversable:
                    nbrs.append(())
                    continue
                s = set()
                for v in p.vertices:
                    s.update(by_vertex[v])
                s.discard(p.pid)
                nbrs.append(tuple(sorted(s)))
            self._neighbors = nbrs
        return self._neighbors

    def components(self) -> np.ndarray:
        """Connected-component label per pid over traversable shared-vertex links (-1 if untraversable)."""
        if self._components is not None:
            return self._components.copy()
        labels = np.full(len(self.patches), -1, dtype=np.int64)
        nbrs = self.neighbors
        label = 0
        for p in self.patches:
            if not p.traversable or labels[p.pid] >= 0:
                continue
            stack = [p.pid]
            labels[p.pid] = label
            while stack:
                q = stack.pop()
                for r in nbrs[q]:
                    if labels[r] < 0:
                        labels[r] = label
                        stack.append(r)
            label += 1
        self._components = labels
        return labels.copy()


def build_map(cloud: PointCloud, params: MapParams) -> MultiLevelMap:
    params.validate()
    pts = cloud.points
    if len(pts) == 0:
        raise MapError("cannot build a map from an empty cloud")
    res = params.res_m
    idx = cell_indices(pts[:, :2], res)
    z_all = pts[:, 2]
    order = np.lexsort((z_all, idx[:, 1], idx[:, 0]))
    ms, ns, z = idx[order, 0], idx[order, 1], z_all[order]
    head = np.ones(len(z), dtype=bool)
    head[1:] = (ms[1:] != ms[:-1]) | (ns[1:] != ns[:-1])
    starts, counts, z_min, z_max, z_avg = _slice_sorted(z, head, params)
    keep = counts >= params.least_num
    stats = BuildStats(num_points=len(pts), num_slices=int(keep.sum()),
                       discarded_points=int(counts[~keep].sum()))

    starts, counts = starts[keep], counts[keep]
    z_min, z_max, z_avg = z_min[keep], z_max[keep], z_avg[keep]
    span = z_max - z_min
    rep = np.where(span > params.thr_rep, z_max, z_avg)
    cell_m, cell_n = ms[starts].tolist(), ns[starts].tolist()

    cells: Dict[Tuple[int, int], List[int]] = {}
    for s, key in enumerate(zip(cell_m, cell_n)):
        cells.setdefault(key, []).append(s)
    slices = {
        key: [Slice(float(z_min[s]), float(z_max[s]), float(z_avg[s]), int(counts[s])) for s in ids]
        for key, ids in cells.items()
    }

    tol = params.lam * params.res_pc
    zlo, zhi, zrep = z_min.tolist(), z_max.tolist(), rep.tolist()

    def linked(i, j):
        return zlo[i] - zhi[j] <= tol and zlo[j] - zhi[i] <= tol

    tri_a, tri_b, tri_c, homes = [], [], [], []
    for m, n in sorted(cells):
        sa = cells[(m, n)]
        diag = cells.get((m + 1, n + 1))
        if diag is None:
            continue
        # chain through the axis-aligned neighbour; vertices ordered so the normal points up
        for part, mid_key in ((DOWN, (m + 1, n)), (UP, (m, n + 1))):
            sb = cells.get(mid_key)
            if sb is None:
                continue
            cands = [(i, j, k) for i in sa for j in sb if linked(i, j) for k in diag if linked(j, k)]
            if not cands:
                continue
            stats.num_candidates += len(cands)
            if len(cands) > 1:
                cands = _keep_uppermost(cands, zrep)
            stats.num_deduplicated += len(cands)
            for i, j, k in cands:
                if part == DOWN:
                    tri_a.append(i), tri_b.append(j), tri_c.append(k)
                else:
                    tri_a.append(i), tri_b.append(k), tri_c.append(j)
                homes.append(MeshIndex(m, n, part))

    patches = _make_patches(homes, tri_a, tri_b, tri_c, ms[starts], ns[starts], rep, params, stats)
    return MultiLevelMap(params, patches, slices, stats)


def _keep_uppermost(cands, zrep):
    """Greedy vertex-disjoint selection, highest mean representative z first."""
    def rank(t):
        zs = [zrep[s] for s in t]
        return (-sum(zs) / 3.0, -max(zs), t)

    kept, used = [], set()
    for t in sorted(cands, key=rank):
        if used.isdisjoint(t):
            kept.append(t)
            used.update(t)
    return kept


def _make_patches(homes, tri_a, tri_b, tri_c, slice_m, slice_n, rep, params, stats) -> List[Patch]:
    if not homes:
        return []
    res = params.res_m
    ia, ib, ic = (np.asarray(t, dtype=np.int64) for t in (tri_a, tri_b, tri_c))
    corners = np.column_stack([slice_m * res, slice_n * res, rep])
    # one shared Point3 per slice: vertex equality between patches is exact by construction
    used = np.unique(np.concatenate([ia, ib, ic]))
    points = dict(zip(used.tolist(), (Point3(*row) for row in corners[used].tolist())))

    A, B, C = corners[ia], corners[ib], corners[ic]
    cross = np.cross(B - A, C - A)
    norm = np.linalg.norm(cross, axis=1)
    nrm = cross / norm[:, None]
    flip = nrm[:, 2] < 0
    nrm[flip] *= -1.0
    valid = nrm[:, 2] > 1e-12
    stats.num_vertical = int((~valid).sum())
    xa = np.column_stack([nrm[:, 2], np.zeros(len(nrm)), -nrm[:, 0]])
    xa /= np.linalg.norm(xa, axis=1)[:, None]
    ya = np.cross(nrm, xa)
    ya /= np.linalg.norm(ya, axis=1)[:, None]
    trav = np.degrees(np.arccos(np.clip(nrm[:, 2], -1.0, 1.0))) < params.thr_slope

    n_l, x_l, y_l = map(tuple, nrm.tolist()), map(tuple, xa.tolist()), map(tuple, ya.tolist())
    rows = zip(homes, ia.tolist(), ib.tolist(), ic.tolist(), n_l, x_l, y_l, trav.tolist(), valid.tolist())
    return [
        Patch(home, points[i], points[j], points[k], nv, xv, yv, t)
        for home, i, j, k, nv, xv, yv, t, ok in rows
        if ok
    ]


# ---------------------------------------------------------------------------
# export / import

MAP_FORMAT = "patchplan-map/1"


def _g9(v: float) -> str:
    return f"{v:.9g}"


def _r9(v: float) -> float:
    return float(_g9(v))


def _map_paths(prefix) -> Tuple[Path, Path]:
    p = Path(prefix)
    if p.suffix in (".obj", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".obj"), p.with_suffix(".json")


def write_map(mlmap: MultiLevelMap, prefix) -> Tuple[Path, Path]:
    """Write ``prefix.obj`` (geometry) and ``prefix.json`` (params and per-patch metadata)."""
    obj_path, json_path = _map_paths(prefix)
    groups = [("traversable", [p for p in mlmap.patches if p.traversable]),
              ("untraversable", [p for p in mlmap.patches if not p.traversable])]
    lines = ["# patchplan multi-level map", "o multilevel_map"]
    meta = []
    for _, members in groups:
        for p in members:
            for v in p.vertices:
                lines.append(f"v {_g9(v.x)} {_g9(v.y)} {_g9(v.z)}")
    face = 0
    for name, members in groups:
        lines.append(f"g {name}")
        for p in members:
            base = 3 * face + 1
            lines.append(f"f {base} {base + 1} {base + 2}")
            meta.append({
                "face": face,
                "cell": [p.home.m, p.home.n],
                "part": p.home.part,
                "level": p.level,
                "traversable": p.traversable,
                "slope_deg": _r9(p.slope_deg),
            })
            face += 1
    obj_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    doc = {
        "format": MAP_FORMAT,
        "params": {k: (_r9(v) if isinstance(v, float) else v) for k, v in asdict(mlmap.params).items()},
        "num_patches": len(mlmap.patches),
        "num_traversable": mlmap.num_traversable,
        "patches": meta,
    }
    json_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return obj_path, json_path


def read_map(prefix) -> MultiLevelMap:
    obj_path, json_path = _map_paths(prefix)
    try:
        doc = json.loads(json_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise MapError(f"cannot read map sidecar {json_path}: {exc}") from exc
    if doc.get("format") != MAP_FORMAT:
        raise MapError(f"{json_path}: unsupported map format {doc.get('format')!r}")
    params = MapParams(**doc["params"]).validate()
    verts, faces = [], []
    for lineno, raw in enumerate(obj_path.read_text(encoding="utf-8").splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        try:
            if fields[0] == "v":
                verts.append(Point3(float(fields[1]), float(fields[2]), float(fields[3])))
            elif fields[0] == "f":
                faces.append(tuple(int(f.split("/")[0]) - 1 for f in fields[1:4]))
        except (IndexError, ValueError):
            raise MapError(f"{obj_path}: malformed line {lineno}") from None
    meta = doc["patches"]
    if len(meta) != len(faces):
        raise MapError(f"{obj_path}: {len(faces)} faces but sidecar lists {len(meta)} patches")
    patches = []
    for entry in meta:
        ia, ib, ic = faces[entry["face"]]
        home = MeshIndex(int(entry["cell"][0]), int(entry["cell"][1]), entry["part"])
        p = Patch.from_vertices(home, verts[ia], verts[ib], verts[ic], params.thr_slope)
        p.traversable = bool(entry["traversable"])
        patches.append(p)
    return MultiLevelMap(params, patches)
