"""Multi-level patch maps and kinematic trajectory planning for ground robots."""

__version__ = "0.1.0"

from .mapping import MapParams, MultiLevelMap, Patch, build_map, read_map, write_map
from .index import locate_cell, locate_patch
from .optimize import OptParams, optimize_stage1, optimize_stage2, optimize_trajectory, same_level_obstacles
from .pointcloud import PointCloud, load_cloud, write_cloud
from .search import RobotParams, search
from .trajectory import RobotState, Trajectory, Waypoint

__all__ = [
    "MapParams", "MultiLevelMap", "Patch", "build_map", "read_map", "write_map",
    "locate_cell", "locate_patch",
    "OptParams", "optimize_stage1", "optimize_stage2", "optimize_trajectory", "same_level_obstacles",
    "PointCloud", "load_cloud", "write_cloud",
    "RobotParams", "search",
    "RobotState", "Trajectory", "Waypoint",
]
