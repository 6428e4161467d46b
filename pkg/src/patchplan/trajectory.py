"""Robot state, waypoints and trajectory files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Tuple

import numpy as np

from .mapping import MeshIndex, MultiLevelMap, Patch

CSV_COLUMNS = (
    "t", "x", "y", "z", "v_left", "v_right", "theta",
    "patch_cell_m", "patch_cell_n", "patch_part", "patch_level",
)


class RobotState(NamedTuple):
    x: float
    y: float
    z: float
    v_left: float
    v_right: float
    theta: float  # heading in the resident patch frame


class Waypoint(NamedTuple):
    state: RobotState
    patch: Patch

    @property
    def xyz(self) -> Tuple[float, float, float]:
        return (self.state.x, self.state.y, self.state.z)


@dataclass
class Trajectory:
    waypoints: List[Waypoint]
    times: List[float]
    # control that produced waypoints[i + 1]; empty for purely geometric paths
    controls: List[Tuple[float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def total_time(self) -> float:
        return self.times[-1] - self.times[0] if self.times else 0.0

    def positions(self) -> np.ndarray:
        return np.array([w.xyz for w in self.waypoints], dtype=np.float64).reshape(-1, 3)


def _row(t: float, w: Waypoint):
    s, p = w.state, w.patch
    return {
        "t": t, "x": s.x, "y": s.y, "z": s.z,
        "v_left": s.v_left, "v_right": s.v_right, "theta": s.theta,
        "patch_cell_m": p.home.m, "patch_cell_n": p.home.n,
        "patch_part": p.home.part, "patch_level": p.level,
    }


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for t, w in zip(traj.times, traj.waypoints):
            row = _row(t, w)
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def write_trajectory_json(traj: Trajectory, path) -> None:
    doc = {
        "columns": list(CSV_COLUMNS),
        "total_time": traj.total_time,
        "waypoints": [_row(t, w) for t, w in zip(traj.times, traj.waypoints)],
        "controls": [list(u) for u in traj.controls],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_trajectory_json(path, mlmap: MultiLevelMap) -> Trajectory:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    waypoints, times = [], []
    for row in doc["waypoints"]:
        key = MeshIndex(int(row["patch_cell_m"]), int(row["patch_cell_n"]), row["patch_part"])
        try:
            patch = mlmap.patch_at_level(key, int(row["patch_level"]))
        except (KeyError, IndexError):
            raise ValueError(f"{path}: waypoint references missing patch {tuple(key)} level {row['patch_level']}")
        state = RobotState(*(float(row[k]) for k in ("x", "y", "z", "v_left", "v_right", "theta")))
        waypoints.append(Waypoint(state, patch))
        times.append(float(row["t"]))
    controls = [tuple(u) for u in doc.get("controls", [])]
    return Trajectory(waypoints, times, controls)
