"""Command-line front end: scene synthesis, map building, planning and benchmarks.

Exit codes: 0 success, 2 bad input or configuration, 3 empty map, 4 an
endpoint does not snap to a traversable patch, 5 no feasible trajectory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import Config, ConfigError, SceneParams, dump_config, resolve_config
from .evaluation import (
    map_accuracy,
    random_pairs,
    run_benchmark,
    trajectory_metrics,
    write_json,
    write_pairs_csv,
    write_summary,
)
from .mapping import MapError, MultiLevelMap, build_map, read_map, write_map
from .optimize import DegenerateSegmentError, InvalidTrajectoryError, optimize_trajectory, write_optimization_log
from .pointcloud import (
    CloudParseError,
    PointCloud,
    generate_block_scene,
    generate_plane_scene,
    generate_spiral_scene,
    generate_two_level_scene,
    generate_uneven_scene,
    load_cloud,
    write_cloud,
)
from .search import InfeasibleError, InvalidEndpointError, search
from .trajectory import Trajectory, read_trajectory_json, write_trajectory_csv, write_trajectory_json

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EMPTY_MAP = 3
EXIT_SNAP = 4
EXIT_INFEASIBLE = 5

log = logging.getLogger("patchplan")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def make_scene(scene: SceneParams) -> PointCloud:
    """Synthesise the configured scene; deterministic for a fixed seed."""
    s = scene
    if s.kind == "spiral":
        return generate_spiral_scene(s.radius, s.width, s.turns, s.rise_per_turn, s.res_pc,
                                     s.noise_sigma, seed=s.seed, apron_length=s.apron_length)
    if s.kind == "uneven":
        cloud = generate_uneven_scene(s.extent, s.res_pc, s.amplitude, s.octaves, seed=s.seed)
    elif s.kind == "plane":
        cloud = generate_plane_scene(s.extent, s.extent, s.res_pc, slope_deg=s.slope_deg)
    elif s.kind == "block":
        cloud = generate_block_scene(s.extent, s.res_pc, tuple(s.block_min), s.block_size, s.block_height)
    else:
        cloud = generate_two_level_scene(s.extent, s.res_pc, tuple(s.deck_min), tuple(s.deck_size),
                                         s.deck_z, s.ramp_slope_deg if s.ramp_slope_deg > 0 else None)
    if s.noise_sigma > 0:
        pts = cloud.points.copy()
        pts[:, 2] += np.random.default_rng(s.seed).normal(0.0, s.noise_sigma, len(pts))
        cloud = PointCloud(pts, cloud.resolution_hint)
    return cloud


def _load_map(path) -> MultiLevelMap:
    try:
        mlmap = read_map(path)
    except (OSError, MapError, KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"cannot load map {path}: {exc}", EXIT_USAGE) from exc
    if mlmap.num_traversable == 0:
        raise CommandError(f"map {path} has no traversable patches", EXIT_EMPTY_MAP)
    return mlmap


def _load_cloud(path) -> PointCloud:
    try:
        return load_cloud(path)
    except (OSError, CloudParseError, ValueError) as exc:
        raise CommandError(f"cannot load cloud {path}: {exc}", EXIT_USAGE) from exc


def _save_trajectory(traj: Trajectory, out_dir: Path, stem: str) -> None:
    write_trajectory_csv(traj, out_dir / f"{stem}.csv")
    write_trajectory_json(traj, out_dir / f"{stem}.json")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args, cfg: Config) -> int:
    if args.kind:
        cfg.scene.kind = args.kind
    if args.seed is not None:
        cfg.scene.seed = args.seed
    cfg.scene.validate()
    cloud = make_scene(cfg.scene)
    write_cloud(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_build_map(args, cfg: Config) -> int:
    cloud = _load_cloud(args.cloud)
    t0 = time.perf_counter()
    try:
        mlmap = build_map(cloud, cfg.map)
    except MapError as exc:
        raise CommandError(str(exc), EXIT_EMPTY_MAP if "empty" in str(exc) else EXIT_USAGE) from exc
    t_c = time.perf_counter() - t0
    if mlmap.num_traversable == 0:
        raise CommandError("map has no traversable patches", EXIT_EMPTY_MAP)
    write_map(mlmap, args.out)
    print(f"patches={len(mlmap)} traversable={mlmap.num_traversable} T_c={t_c:.3f}s")
    if args.ground_truth or args.report:
        report = {"num_patches": len(mlmap), "num_traversable": mlmap.num_traversable,
                  "stats": vars(mlmap.stats) if mlmap.stats else {}}
        if args.ground_truth:
            truth = _load_cloud(args.ground_truth)
            acc = map_accuracy(mlmap, truth)
            report["accuracy"] = acc.to_dict()
            print(f"E_avg={acc.E_avg:.4f} m over {len(acc.per_patch)} patches")
        if args.report:
            write_json(report, args.report)
    return EXIT_OK


def _plan(mlmap, start, goal, yaw, cfg: Config):
    try:
        res = search(start, goal, mlmap, cfg.robot, start_yaw=yaw)
    except InvalidEndpointError as exc:
        raise CommandError(str(exc), EXIT_SNAP) from exc
    except InfeasibleError as exc:
        raise CommandError(str(exc), EXIT_INFEASIBLE) from exc
    return res


def _optimize(traj, mlmap, cfg: Config):
    try:
        return optimize_trajectory(traj, mlmap, cfg.opt)
    except (InvalidTrajectoryError, DegenerateSegmentError) as exc:
        raise CommandError(f"optimization failed: {exc}", EXIT_INFEASIBLE) from exc


def _write_plan_outputs(out_dir: Path, initial, stage1, stage2, rows, mlmap, cfg: Config, extra: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    if initial is not None:
        _save_trajectory(initial, out_dir, "initial")
    _save_trajectory(stage1, out_dir, "stage1")
    _save_trajectory(stage2, out_dir, "stage2")
    write_optimization_log(rows, out_dir / "optimization_log.csv")
    report = dict(extra)
    if initial is not None:
        report["initial"] = trajectory_metrics(initial, mlmap, cfg.bench.safety_radius).to_dict()
    report["stage1"] = trajectory_metrics(stage1, mlmap, cfg.bench.safety_radius).to_dict()
    report["final"] = trajectory_metrics(stage2, mlmap, cfg.bench.safety_radius).to_dict()
    write_json(report, out_dir / "report.json")
    return report


def cmd_plan(args, cfg: Config) -> int:
    mlmap = _load_map(args.map)
    t0 = time.perf_counter()
    res = _plan(mlmap, tuple(args.start), tuple(args.goal), args.yaw, cfg)
    stage1, stage2, rows = _optimize(res.trajectory, mlmap, cfg)
    t_p = time.perf_counter() - t0
    report = _write_plan_outputs(Path(args.out_dir), res.trajectory, stage1, stage2, rows, mlmap, cfg,
                                 {"cost": res.cost, "expansions": res.expansions})
    final = report["final"]
    print(f"T_p={t_p:.3f}s cost={res.cost:.3f}s L={final['length']:.3f}m "
          f"kappa={final['mean_curvature']:.4f} collision_free={final['collision_free']}")
    return EXIT_OK


def cmd_optimize(args, cfg: Config) -> int:
    mlmap = _load_map(args.map)
    try:
        traj = read_trajectory_json(args.trajectory, mlmap)
    except (OSError, KeyError, ValueError) as exc:
        raise CommandError(f"cannot load trajectory {args.trajectory}: {exc}", EXIT_USAGE) from exc
    t0 = time.perf_counter()
    stage1, stage2, rows = _optimize(traj, mlmap, cfg)
    t_o = time.perf_counter() - t0
    _write_plan_outputs(Path(args.out_dir), None, stage1, stage2, rows, mlmap, cfg, {})
    print(f"optimized {len(traj)} waypoints in {t_o:.3f}s")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    mlmap = _load_map(args.map)
    report = {"num_patches": len(mlmap), "num_traversable": mlmap.num_traversable}
    if args.ground_truth:
        report["accuracy"] = map_accuracy(mlmap, _load_cloud(args.ground_truth)).to_dict()
    if args.trajectory:
        try:
            traj = read_trajectory_json(args.trajectory, mlmap)
        except (OSError, KeyError, ValueError) as exc:
            raise CommandError(f"cannot load trajectory {args.trajectory}: {exc}", EXIT_USAGE) from exc
        report["trajectory"] = trajectory_metrics(traj, mlmap, cfg.bench.safety_radius).to_dict()
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_bench(args, cfg: Config) -> int:
    if args.n_pairs is not None:
        cfg.bench.n_pairs = args.n_pairs
    if args.seed is not None:
        cfg.bench.seed = args.seed
    if args.threads is not None:
        cfg.bench.threads = args.threads
    cfg.bench.validate()
    mlmap = _load_map(args.map)
    b = cfg.bench
    pairs = random_pairs(mlmap, b.n_pairs, b.seed, b.clearance, b.min_separation)
    result = run_benchmark(mlmap, pairs, cfg.robot, cfg.opt, b.safety_radius, workers=b.threads)
    write_pairs_csv(result.rows, args.out_csv)
    timing_path = args.out_timing or args.out_json.with_name(args.out_json.stem + ".timing.json")
    write_summary(result, args.out_json, timing_path)
    s, t = result.summary, result.timing
    if s["P"] is None:
        print("no pairs: P not applicable")
    else:
        def fmt(v):
            return "n/a" if v is None else f"{v:.3f}"

        print(f"P={s['P']:.3f} pairs={s['num_pairs']} median_T_p={t['median_T_p']:.3f}s "
              f"mean_T_p={t['mean_T_p']:.3f}s mean_L={fmt(s['mean_L'])}m mean_kappa={fmt(s['mean_kappa'])}")
    return EXIT_OK


def cmd_export(args, cfg: Config) -> int:
    """Traversable patches plus an optional trajectory polyline as one OBJ for viewers."""
    mlmap = _load_map(args.map)
    lines = ["# patchplan export", "o traversable"]
    count = 0
    faces = []
    for p in mlmap.traversable:
        for v in p.vertices:
            lines.append(f"v {v.x:.9g} {v.y:.9g} {v.z:.9g}")
        faces.append(f"f {count + 1} {count + 2} {count + 3}")
        count += 3
    lines.extend(faces)
    if args.trajectory:
        try:
            traj = read_trajectory_json(args.trajectory, mlmap)
        except (OSError, KeyError, ValueError) as exc:
            raise CommandError(f"cannot load trajectory {args.trajectory}: {exc}", EXIT_USAGE) from exc
        lines.append("o trajectory")
        first = count + 1
        for w in traj.waypoints:
            x, y, z = w.xyz
            lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
        if len(traj) > 1:
            lines.append("l " + " ".join(str(first + i) for i in range(len(traj))))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_dump_config(args, cfg: Config) -> int:
    text = dump_config(cfg)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _xyz(parser, name):
    parser.add_argument(f"--{name}", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"),
                        help=f"{name} position; Z is a reference height used to pick the level")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable); wins over the config file")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="patchplan", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", parents=[common], help="synthesise a point cloud scene")
    p.add_argument("--kind", choices=("spiral", "uneven", "plane", "block", "two-level"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="cloud path (.xyz, .ply or .pcd)")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("build-map", parents=[common], help="build the patch map from a cloud")
    p.add_argument("cloud", type=Path)
    p.add_argument("--out", type=Path, required=True, help="map prefix; writes PREFIX.obj and PREFIX.json")
    p.add_argument("--ground-truth", type=Path, help="cloud to measure vertical map error against")
    p.add_argument("--report", type=Path, help="JSON report path")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("plan", parents=[common], help="search and optimize one trajectory")
    p.add_argument("map", type=Path, help="map prefix or its .obj/.json file")
    _xyz(p, "start")
    _xyz(p, "goal")
    p.add_argument("--yaw", type=float, help="start heading in world radians (default: toward the goal)")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("optimize", parents=[common], help="refine an existing trajectory JSON")
    p.add_argument("map", type=Path)
    p.add_argument("--trajectory", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", parents=[common], help="map accuracy and trajectory metrics")
    p.add_argument("map", type=Path)
    p.add_argument("--ground-truth", type=Path)
    p.add_argument("--trajectory", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="success rate over seeded random pairs")
    p.add_argument("map", type=Path)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap for running pairs")
    p.add_argument("--out-csv", type=Path, required=True)
    p.add_argument("--out-json", type=Path, required=True, help="summary JSON (reproducible)")
    p.add_argument("--out-timing", type=Path,
                   help="wall-clock T_p JSON (default: OUT_JSON with a .timing.json suffix)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", parents=[common], help="traversable patches (and a trajectory) as one OBJ")
    p.add_argument("map", type=Path)
    p.add_argument("--trajectory", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("dump-config", parents=[common], help="print the effective configuration as TOML")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, CloudParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
