"""Point cloud loading, writing and synthetic scene generation.

Only ASCII encodings are handled: plain ``x y z`` text, ASCII PLY and ASCII PCD.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

FORMATS = ("xyz-ascii", "ply-ascii", "pcd-ascii")


class Point3(NamedTuple):
    x: float
    y: float
    z: float


class CloudParseError(ValueError):
    """Raised when a cloud file does not parse; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    resolution_hint: Optional[float] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.resolution_hint is not None and not self.resolution_hint > 0:
            raise ValueError("resolution_hint must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def point(self, i: int) -> Point3:
        x, y, z = self.points[i]
        return Point3(float(x), float(y), float(z))


def format_from_suffix(path) -> str:
    suffix = Path(path).suffix.lower()
    try:
        return {".xyz": "xyz-ascii", ".txt": "xyz-ascii", ".ply": "ply-ascii", ".pcd": "pcd-ascii"}[suffix]
    except KeyError:
        raise CloudParseError(f"cannot infer cloud format from suffix {suffix!r}") from None


def _parse_resolution_comment(text: str) -> Optional[float]:
    parts = text.split()
    if len(parts) == 2 and parts[0] == "resolution":
        try:
            value = float(parts[1])
        except ValueError:
            return None
        return value if value > 0 else None
    return None


def _parse_floats(fields, lineno):
    try:
        values = [float(f) for f in fields]
    except ValueError:
        raise CloudParseError(f"non-numeric value in {' '.join(fields)!r}", lineno) from None
    return values


def _load_xyz(lines):
    points = []
    resolution = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if line.startswith("#"):
            resolution = _parse_resolution_comment(line[1:]) or resolution
            continue
        if "#" in line:
            line = line[: line.index("#")].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 3:
            raise CloudParseError(f"expected 3 coordinates, got {len(fields)}", lineno)
        values = _parse_floats(fields[:3], lineno)
        if not all(math.isfinite(v) for v in values):
            raise CloudParseError("non-finite coordinate", lineno)
        points.append(values)
    return points, resolution


def _load_ply(lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError("missing 'ply' magic", 1)
    resolution = None
    elements = []  # (name, count, [property names])
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        fields = raw.split()
        if not fields:
            continue
        key = fields[0]
        if key == "format":
            if len(fields) < 2 or fields[1] != "ascii":
                raise CloudParseError("only ASCII PLY is supported", lineno)
        elif key == "comment":
            resolution = _parse_resolution_comment(" ".join(fields[1:])) or resolution
        elif key == "element":
            if len(fields) != 3:
                raise CloudParseError("malformed element line", lineno)
            try:
                elements.append((fields[1], int(fields[2]), []))
            except ValueError:
                raise CloudParseError("element count is not an integer", lineno) from None
        elif key == "property":
            if not elements:
                raise CloudParseError("property before any element", lineno)
            if fields[1] == "list":
                elements[-1][2].append(("list", fields[-1]))
            else:
                elements[-1][2].append(("scalar", fields[-1]))
        elif key == "end_header":
            header_end = lineno
            break
        elif key == "obj_info":
            continue
        else:
            raise CloudParseError(f"unknown header keyword {key!r}", lineno)
    if header_end is None:
        raise CloudParseError("missing end_header")

    points = []
    lineno = header_end
    body = lines[header_end:]
    cursor = 0
    for name, count, props in elements:
        names = [p[1] for p in props]
        has_list = any(kind == "list" for kind, _ in props)
        if name == "vertex":
            try:
                ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
            except ValueError:
                raise CloudParseError("vertex element lacks x/y/z properties", header_end) from None
            if has_list:
                raise CloudParseError("list properties on vertices are not supported", header_end)
        for _ in range(count):
            while cursor < len(body) and not body[cursor].strip():
                cursor += 1
            if cursor >= len(body):
                raise CloudParseError(f"unexpected end of file in element {name!r}", len(lines))
            lineno = header_end + cursor + 1
            fields = body[cursor].split()
            cursor += 1
            if name != "vertex":
                continue
            if len(fields) != len(props):
                raise CloudParseError(f"expected {len(props)} values, got {len(fields)}", lineno)
            values = _parse_floats([fields[ix], fields[iy], fields[iz]], lineno)
            if not all(math.isfinite(v) for v in values):
                raise CloudParseError("non-finite coordinate", lineno)
            points.append(values)
    return points, resolution


def _load_pcd(lines):
    header = {}
    resolution = None
    data_line = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            resolution = _parse_resolution_comment(line[1:]) or resolution
            continue
        fields = line.split()
        key = fields[0].upper()
        header[key] = fields[1:]
        if key == "DATA":
            if fields[1:] != ["ascii"]:
                raise CloudParseError("only ASCII PCD is supported", lineno)
            data_line = lineno
            break
    if data_line is None:
        raise CloudParseError("missing DATA line")
    if "FIELDS" not in header:
        raise CloudParseError("missing FIELDS line")
    names = header["FIELDS"]
    counts = [int(c) for c in header.get("COUNT", ["1"] * len(names))]
    if len(counts) != len(names):
        raise CloudParseError("COUNT and FIELDS disagree in length")
    offsets = np.concatenate([[0], np.cumsum(counts)]).tolist()
    width = offsets[-1]
    try:
        ix, iy, iz = (offsets[names.index(c)] for c in ("x", "y", "z"))
    except ValueError:
        raise CloudParseError("FIELDS lacks x/y/z") from None
    expected = int(header["POINTS"][0]) if "POINTS" in header else None

    points = []
    for lineno, raw in enumerate(lines[data_line:], start=data_line + 1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) != width:
            raise CloudParseError(f"expected {width} values, got {len(fields)}", lineno)
        values = _parse_floats([fields[ix], fields[iy], fields[iz]], lineno)
        if any(math.isnan(v) for v in values):
            continue  # invalid return in organized clouds
        if not all(math.isfinite(v) for v in values):
            raise CloudParseError("non-finite coordinate", lineno)
        points.append(values)
    if expected is not None and len(points) > expected:
        raise CloudParseError(f"POINTS declares {expected} but file holds {len(points)}")
    return points, resolution


_LOADERS = {"xyz-ascii": _load_xyz, "ply-ascii": _load_ply, "pcd-ascii": _load_pcd}


def load_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Read a point cloud; extra per-point attributes (colors, normals) are dropped."""
    fmt = format or format_from_suffix(path)
    if fmt not in _LOADERS:
        raise ValueError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    points, resolution = _LOADERS[fmt](lines)
    if not points:
        raise EmptyCloudError(f"{path}: cloud contains no points")
    return PointCloud(np.array(points, dtype=np.float64), resolution)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_cloud(cloud: PointCloud, path, format: Optional[str] = None) -> None:
    fmt = format or format_from_suffix(path)
    rows = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in cloud.points]
    res = cloud.resolution_hint
    if fmt == "xyz-ascii":
        header = [f"# resolution {_fmt(res)}"] if res else []
    elif fmt == "ply-ascii":
        header = ["ply", "format ascii 1.0"]
        if res:
            header.append(f"comment resolution {_fmt(res)}")
        header += [
            f"element vertex {len(rows)}",
            "property double x",
            "property double y",
            "property double z",
            "end_header",
        ]
    elif fmt == "pcd-ascii":
        header = ["# .PCD v0.7 - Point Cloud Data file format"]
        if res:
            header.append(f"# resolution {_fmt(res)}")
        header += [
            "VERSION 0.7",
            "FIELDS x y z",
            "SIZE 8 8 8",
            "TYPE F F F",
            "COUNT 1 1 1",
            f"WIDTH {len(rows)}",
            "HEIGHT 1",
            "VIEWPOINT 0 0 0 1 0 0 0",
            f"POINTS {len(rows)}",
            "DATA ascii",
        ]
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")
    Path(path).write_text("\n".join(header + rows) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic scenes


def spiral_height(phi, rise_per_turn: float):
    """Height of the helical ramp at unwrapped angle ``phi`` (radians)."""
    return rise_per_turn * np.asarray(phi) / (2.0 * math.pi)


def generate_spiral_scene(
    radius: float,
    width: float,
    turns: float,
    rise_per_turn: float,
    res_pc: float,
    noise_sigma: float = 0.0,
    seed: int = 0,
    apron_length: float = 0.0,
) -> PointCloud:
    """Helical ramp around the z axis, optionally fed by a flat straight apron.

    The ramp occupies the annulus ``radius +- width/2`` and climbs
    ``rise_per_turn`` per revolution starting at z=0 on the +x axis, heading +y.
    The apron is a flat strip at z=0 extending ``apron_length`` along -y from
    the ramp foot. Sampling is polar with spacing ``res_pc`` in both radius
    and arc length, so the count tracks projected area / res_pc**2.
    """
    if min(radius, width, turns, rise_per_turn, res_pc) <= 0:
        raise ValueError("spiral dimensions must be positive")
    if noise_sigma < 0 or apron_length < 0:
        raise ValueError("noise_sigma and apron_length must be non-negative")
    if width / 2 >= radius:
        raise ValueError("width must be smaller than 2 * radius")

    total_angle = 2.0 * math.pi * turns
    n_rad = max(1, int(round(width / res_pc)))
    chunks = []
    for j in range(n_rad):
        r = radius - width / 2 + (j + 0.5) * width / n_rad
        n_arc = max(1, int(round(total_angle * r / res_pc)))
        phi = (np.arange(n_arc) + 0.5) * (total_angle / n_arc)
        chunks.append(np.column_stack([r * np.cos(phi), r * np.sin(phi), spiral_height(phi, rise_per_turn)]))
    if apron_length > 0:
        n_y = max(1, int(round(apron_length / res_pc)))
        xs = radius - width / 2 + (np.arange(n_rad) + 0.5) * width / n_rad
        ys = -(np.arange(n_y) + 0.5) * (apron_length / n_y)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        chunks.append(np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]))
    pts = np.concatenate(chunks)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pts[:, 2] += rng.normal(0.0, noise_sigma, size=len(pts))
    return PointCloud(pts, res_pc)


def octave_gains(octaves: int, persistence: float = 0.5) -> np.ndarray:
    return persistence ** np.arange(octaves)


def _value_noise(x, y, lattice, cell):
    # smoothstep-weighted bilinear blend of lattice values in [-1, 1]
    gx, gy = x / cell, y / cell
    i0, j0 = np.floor(gx).astype(np.int64), np.floor(gy).astype(np.int64)
    tx, ty = gx - i0, gy - j0
    sx, sy = tx * tx * (3 - 2 * tx), ty * ty * (3 - 2 * ty)
    v00 = lattice[i0, j0]
    v10 = lattice[i0 + 1, j0]
    v01 = lattice[i0, j0 + 1]
    v11 = lattice[i0 + 1, j0 + 1]
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


def uneven_height(x, y, extent: float, amplitude: float, octaves: int, seed: int, feature_size=None):
    """Value-noise height field used by :func:`generate_uneven_scene`."""
    if amplitude == 0:
        return np.zeros(np.broadcast(x, y).shape)
    base = feature_size if feature_size is not None else extent / 4.0
    rng = np.random.default_rng(seed)
    gains = octave_gains(octaves)
    z = np.zeros(np.broadcast(x, y).shape)
    for o, gain in enumerate(gains):
        cell = base / (2 ** o)
        n = int(math.ceil(extent / cell)) + 2
        lattice = rng.uniform(-1.0, 1.0, size=(n, n))
        z = z + gain * _value_noise(np.asarray(x, float), np.asarray(y, float), lattice, cell)
    return amplitude * z


def generate_uneven_scene(
    extent: float,
    res_pc: float,
    amplitude: float,
    octaves: int = 3,
    seed: int = 0,
    feature_size: Optional[float] = None,
) -> PointCloud:
    """Single undulating layer over ``[0, extent)^2`` sampled on a res_pc grid.

    ``max |z| <= amplitude * sum(octave_gains(octaves))``.
    """
    if extent <= 0 or res_pc <= 0 or amplitude < 0 or octaves < 1:
        raise ValueError("extent and res_pc must be positive, amplitude >= 0, octaves >= 1")
    n = int(round(extent / res_pc))
    coords = (np.arange(n) + 0.5) * res_pc
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    gz = uneven_height(gx, gy, extent, amplitude, octaves, seed, feature_size)
    return PointCloud(np.column_stack([gx.ravel(), gy.ravel(), np.ravel(gz)]), res_pc)


def generate_plane_scene(
    extent_x: float,
    extent_y: float,
    res_pc: float,
    z: float = 0.0,
    slope_deg: float = 0.0,
    origin=(0.0, 0.0),
) -> PointCloud:
    """Flat (optionally inclined about the world y axis) rectangle on a grid."""
    nx, ny = int(round(extent_x / res_pc)), int(round(extent_y / res_pc))
    xs = origin[0] + (np.arange(nx) + 0.5) * res_pc
    ys = origin[1] + (np.arange(ny) + 0.5) * res_pc
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    gz = z + math.tan(math.radians(slope_deg)) * (gx - origin[0])
    return PointCloud(np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]), res_pc)


def generate_block_scene(
    extent: float,
    res_pc: float,
    block_min,
    block_size: float,
    block_height: float,
) -> PointCloud:
    """Flat ground with a raised square block (walls and roof sampled)."""
    ground = generate_plane_scene(extent, extent, res_pc).points
    bx, by = block_min
    inside = (
        (ground[:, 0] >= bx) & (ground[:, 0] < bx + block_size)
        & (ground[:, 1] >= by) & (ground[:, 1] < by + block_size)
    )
    ground = ground[~inside]
    n_edge = int(round(block_size / res_pc))
    n_up = int(round(block_height / res_pc))
    s = (np.arange(n_edge) + 0.5) * (block_size / n_edge)
    h = (np.arange(1, n_up + 1)) * (block_height / n_up)
    walls = []
    for hz in h:
        walls.append(np.column_stack([bx + s, np.full(n_edge, by), np.full(n_edge, hz)]))
        walls.append(np.column_stack([bx + s, np.full(n_edge, by + block_size), np.full(n_edge, hz)]))
        walls.append(np.column_stack([np.full(n_edge, bx), by + s, np.full(n_edge, hz)]))
        walls.append(np.column_stack([np.full(n_edge, bx + block_size), by + s, np.full(n_edge, hz)]))
    gx, gy = np.meshgrid(bx + s, by + s, indexing="ij")
    roof = np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, block_height)])
    return PointCloud(np.concatenate([ground] + walls + [roof]), res_pc)


def generate_two_level_scene(
    extent: float,
    res_pc: float,
    deck_min,
    deck_size,
    deck_z: float,
    ramp_slope_deg: Optional[float] = None,
) -> PointCloud:
    """Flat ground with an elevated deck overhead, optionally reached by a ramp.

    The deck covers ``[x0, x0 + sx) x [y0, y0 + sy)`` at height ``deck_z``. A
    ramp, when requested, climbs along +x over the deck's y span and ends at
    the deck's low-x edge.
    """
    ground = generate_plane_scene(extent, extent, res_pc).points
    x0, y0 = deck_min
    sx, sy = deck_size
    deck = generate_plane_scene(sx, sy, res_pc, z=deck_z, origin=(x0, y0)).points
    parts = [ground, deck]
    if ramp_slope_deg is not None:
        if not 0 < ramp_slope_deg < 90:
            raise ValueError("ramp_slope_deg must lie in (0, 90)")
        run = deck_z / math.tan(math.radians(ramp_slope_deg))
        ramp = generate_plane_scene(run, sy, res_pc, z=0.0, slope_deg=ramp_slope_deg,
                                    origin=(x0 - run, y0)).points
        parts.append(ramp)
    return PointCloud(np.concatenate(parts), res_pc)
