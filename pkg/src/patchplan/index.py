"""Constant-time lookups over the regular patch layout."""
from __future__ import annotations

import math
from typing import Optional

from .mapping import DOWN, UP, MapParams, MeshIndex, MultiLevelMap, Patch


def locate_cell(x: float, y: float, params: MapParams) -> MeshIndex:
    """Mesh cell half containing (x, y); points on the diagonal belong to the down half."""
    res = params.res_m
    m = math.floor(x / res)
    n = math.floor(y / res)
    part = DOWN if (y - n * res) <= (x - m * res) else UP
    return MeshIndex(m, n, part)


def shares_vertices(p1: Patch, p2: Patch) -> bool:
    return p1.shares_vertex_with(p2)


def locate_patch(
    x: float,
    y: float,
    mlmap: MultiLevelMap,
    hint: Optional[Patch] = None,
    z_ref: Optional[float] = None,
    max_dz: Optional[float] = None,
) -> Optional[Patch]:
    """Traversable patch under (x, y), or None.

    With ``hint`` only patches sharing a vertex with the hint qualify (the hint
    itself when (x, y) is still in its cell half); among several, the one whose
    plane is closest to the hint plane at (x, y) wins. Without a hint,
    ``z_ref`` picks the level: the patch whose plane height at (x, y) is nearest
    to it, optionally no farther than ``max_dz``.
    """
    key = locate_cell(x, y, mlmap.params)
    if hint is not None:
        if hint.home == key and hint.traversable:
            return hint
        best, best_dz = None, math.inf
        zh = hint.plane_z(x, y)
        for p in mlmap.traversable_parts.get(key, ()):
            if p.shares_vertex_with(hint):
                dz = abs(p.plane_z(x, y) - zh)
                if dz < best_dz:
                    best, best_dz = p, dz
        return best

    if z_ref is None:
        raise ValueError("locate_patch needs a hint patch or a reference z")
    best, best_dz = None, math.inf
    for p in mlmap.traversable_parts.get(key, ()):
        dz = abs(p.plane_z(x, y) - z_ref)
        if dz < best_dz:
            best, best_dz = p, dz
    if best is not None and max_dz is not None and best_dz > max_dz:
        return None
    return best


def in_footprint(x: float, y: float, patch: Patch, params: MapParams) -> bool:
    return locate_cell(x, y, params) == patch.home


__all__ = ["DOWN", "UP", "MeshIndex", "locate_cell", "locate_patch", "shares_vertices", "in_footprint"]
