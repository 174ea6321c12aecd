"""Command-line pipeline: simulate, ba, map, localize, eval.

Exit codes: 0 success, 1 convergence failure, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .ba import BAProblem, assemble, residuals_and_jacobians, solve_ba
from .config import ConfigError, RunConfig
from .localizer import (
    InsufficientOverlapError,
    LocalizationDivergedError,
    LocalizerState,
    localize_frame,
    propagate,
)
from .mapgrid import bounds_from_trajectory, build_map, export_pgm, read_map, write_map
from .optim import UnderConstrainedError
from .preprocess import preprocess_scan, select_keyframes
from .scan import list_scans, read_scan, write_scan
from .se2 import Pose2, Trajectory, read_trajectory, write_trajectory
from .simbench import (
    aligned_errors,
    circle_trajectory,
    evaluate,
    loc_rpe,
    make_world,
    nearest_associations,
    odometry_deltas,
    out_and_back,
    perturb_trajectory,
    render_sequence,
    stationary_trajectory,
)

log = logging.getLogger("sepba")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_INPUT_ERROR = 2

# Timestamps closer than this are treated as the same instant.
TIME_MATCH_S = 1e-6


class InputError(Exception):
    pass


# --- helpers -------------------------------------------------------------


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise InputError(f"output path exists and is not a directory: {path}")
    if path.exists() and any(path.iterdir()) and not force:
        raise InputError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_scans(directory: Path):
    stems = list_scans(directory)
    if not stems:
        raise InputError(f"no scans found in {directory}")
    return [read_scan(s) for s in stems]


def time_indices(available: Sequence[float], wanted: Sequence[float], what: str) -> list[int]:
    """Index into ``available`` of each timestamp in ``wanted``."""
    stamps = np.asarray(available, dtype=float)
    out = []
    for t in wanted:
        k = int(np.argmin(np.abs(stamps - t))) if len(stamps) else -1
        if k < 0 or abs(stamps[k] - t) > TIME_MATCH_S:
            raise InputError(f"{what}: nothing with timestamp {t!r}")
        out.append(k)
    return out


def match_by_time(scans, traj: Trajectory, what: str):
    """Scans whose timestamps appear in ``traj``, in trajectory order."""
    idx = time_indices([s.timestamp_s for s in scans], traj.timestamps, what)
    return [scans[k] for k in idx]


def prepare(scans, cfg: RunConfig):
    blur = cfg.blur.policy() if cfg.blur.enabled else None
    low = cfg.mask.low if cfg.mask.enabled else None
    out_scans, masks, sigmas = [], [], []
    for s in scans:
        s2, m, sig = preprocess_scan(s, blur, low, cfg.mask.high)
        out_scans.append(s2)
        masks.append(m)
        sigmas.append(sig)
    return out_scans, masks, sigmas


def _scan_extent(scans) -> float:
    return max(s.max_range_m for s in scans)


# --- subcommands ---------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path, force: bool = False) -> int:
    sim = cfg.simulate
    out = _prepare_out(out, force)
    if sim.trajectory == "circle":
        gt = circle_trajectory(sim.n_poses, sim.radius_m)
    elif sim.trajectory == "out_and_back":
        gt = out_and_back(sim.length_m, sim.spacing_m, sim.lateral_m)
    elif sim.trajectory == "stationary":
        gt = stationary_trajectory(sim.n_poses)
    else:
        raise InputError(f"unknown trajectory kind {sim.trajectory!r}")
    half = sim.world_half_extent_m
    world = make_world((-half, -half), (half, half), sim.preset, sim.world_seed, sim.world_resolution_m)
    rng = np.random.default_rng(cfg.seed)
    scans = render_sequence(
        world, gt, sim.scan_width, sim.scan_height, sim.scan_resolution_m,
        sim.noise_sigma, rng, sim.occlusion, sim.psf_sigma_px,
    )
    init = perturb_trajectory(gt, sim.init_trans_m, sim.init_rot_deg, seed=cfg.seed + 1)
    odom = odometry_deltas(gt, sim.odom_trans_sigma_m, sim.odom_rot_sigma_deg, seed=cfg.seed + 2)

    write_map(out / "world_map", world.truth_map)
    write_trajectory(out / "groundtruth.csv", gt)
    write_trajectory(out / "initial.csv", init)
    write_trajectory(out / "odometry.csv", odom)
    (out / "scans").mkdir(exist_ok=True)
    for n, s in enumerate(scans):
        write_scan(out / "scans" / f"{n:06d}", s)
    cfg.write(out / "run_config.json")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "preset": sim.preset,
        "seed": cfg.seed,
        "n_scans": len(scans),
        "files": {p.relative_to(out).as_posix(): _sha256(p) for p in files},
    }
    _json_dump(out / "manifest.json", manifest)
    log.info("wrote %d scans to %s", len(scans), out)
    return EXIT_OK


def _hessian_pattern_rows(problem: BAProblem, traj: Trajectory, mode: str):
    ns = assemble(residuals_and_jacobians(problem, list(traj.poses), mode))
    return sorted(ns.block_pattern)


def cmd_ba(cfg: RunConfig, data: Path, out: Path, init_path: Optional[Path] = None, force: bool = False) -> int:
    init_path = init_path or data / "initial.csv"
    init_all = read_trajectory(init_path)
    scans_all = load_scans(data / "scans")
    if len(init_all) != len(scans_all):
        raise InputError(f"{len(scans_all)} scans but {len(init_all)} poses in {init_path}")
    out = _prepare_out(out, force)
    cfg.write(out / "run_config.json")

    keep = select_keyframes(init_all, cfg.keyframe.policy())
    if len(keep) < 2:
        raise InputError("fewer than two keyframes; lower the keyframe thresholds")
    init = init_all.subset(keep)
    scans, masks, sigmas = prepare(match_by_time(scans_all, init, str(init_path)), cfg)
    grid = bounds_from_trajectory(init, _scan_extent(scans) + 2 * cfg.r_v, cfg.r_v)
    problem = BAProblem(scans, init, grid, cfg.weight.model(), masks)
    solver = cfg.solver.config(cfg.jacobian_mode)
    try:
        traj, grid_map, report = solve_ba(problem, solver, threads=cfg.threads)
    except UnderConstrainedError as exc:
        _json_dump(out / "report.json", {"converged": False, "error": str(exc), "states": exc.states})
        log.error("%s", exc)
        return EXIT_NOT_CONVERGED

    # the emitted map covers the final poses, as `map` would lay it out
    final_grid = bounds_from_trajectory(traj, _scan_extent(scans) + 2 * cfg.r_v, cfg.r_v)
    if not (np.array_equal(final_grid.origin_m, grid.origin_m) and (final_grid.rows, final_grid.cols) == (grid.rows, grid.cols)):
        grid_map = build_map(scans, traj, cfg.weight.model(), masks, final_grid, threads=cfg.threads)
    write_trajectory(out / "trajectory.csv", traj)
    write_map(out / "map", grid_map)
    export_pgm(out / "map", grid_map)
    rep = report.to_dict()
    rep.update(
        keyframes=keep,
        blur_sigmas_px=sigmas,
        partial=not report.converged,
        n_cells=int(grid_map.observed.sum()),
    )
    _json_dump(out / "report.json", rep)
    if cfg.dump_hessian_pattern:
        rows = _hessian_pattern_rows(problem, traj, cfg.jacobian_mode)
        with (out / "hessian_pattern.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_pose", "col_pose"])
            w.writerows(rows)
    log.info("ba: %d keyframes, %d iterations, %s", len(keep), report.iterations, report.reason)
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_map(cfg: RunConfig, data: Path, poses_path: Path, out: Path, force: bool = False) -> int:
    traj = read_trajectory(poses_path)
    scans_all = load_scans(data / "scans")
    if len(traj) > len(scans_all):
        raise InputError(f"{len(traj)} poses but only {len(scans_all)} scans")
    scans = match_by_time(scans_all, traj, str(poses_path))
    out = _prepare_out(out, force)
    cfg.write(out / "run_config.json")
    scans, masks, _ = prepare(scans, cfg)
    grid = bounds_from_trajectory(traj, _scan_extent(scans) + 2 * cfg.r_v, cfg.r_v)
    grid_map = build_map(scans, traj, cfg.weight.model(), masks, grid, threads=cfg.threads)
    write_map(out / "map", grid_map)
    export_pgm(out / "map", grid_map)
    return EXIT_OK


def cmd_localize(
    cfg: RunConfig,
    data: Path,
    map_stem: Path,
    out: Path,
    odometry_path: Optional[Path] = None,
    initial_pose: Optional[Pose2] = None,
    force: bool = False,
) -> int:
    odometry_path = odometry_path or data / "odometry.csv"
    grid = read_map(map_stem)
    odom = read_trajectory(odometry_path)
    scans = load_scans(data / "scans")
    if len(odom) != len(scans):
        raise InputError(f"{len(scans)} scans but {len(odom)} odometry rows in {odometry_path}")
    if initial_pose is None:
        initial_pose = read_trajectory(data / "initial.csv")[0]
    out = _prepare_out(out, force)
    cfg.write(out / "run_config.json")

    blur = cfg.blur.policy() if cfg.blur.enabled else None
    low = cfg.mask.low if cfg.mask.enabled else None
    state = LocalizerState(initial_pose, grid, cfg.solver.config(cfg.jacobian_mode, cfg.localizer.max_iterations),
                           cfg.weight.model())
    poses, frames = [], []
    for k, scan in enumerate(scans):
        if k > 0:
            propagate(state, odom[k])
        scan, mask, _ = preprocess_scan(scan, blur, low, cfg.mask.high)
        rec = {"frame": k, "timestamp_s": scan.timestamp_s}
        try:
            _, report = localize_frame(state, scan, mask)
            rec.update(report.to_dict(), flagged=False)
        except LocalizationDivergedError as exc:
            rec.update(exc.report.to_dict(), flagged=True, error="diverged")
        except InsufficientOverlapError as exc:
            rec.update(flagged=True, error=f"insufficient overlap: {exc}")
        poses.append(state.pose)
        frames.append(rec)
    traj = Trajectory(poses, [s.timestamp_s for s in scans])
    write_trajectory(out / "localized.csv", traj)
    n_flagged = sum(f["flagged"] for f in frames)
    _json_dump(out / "localize_report.json", {"frames": frames, "n_flagged": n_flagged})
    log.info("localize: %d frames, %d flagged", len(frames), n_flagged)
    return EXIT_OK if n_flagged == 0 else EXIT_NOT_CONVERGED


def _pair_by_time(est: Trajectory, gt: Trajectory) -> Trajectory:
    """Ground-truth poses at the estimate's timestamps (keyframe subsets allowed)."""
    if len(est) == len(gt):
        return gt
    return gt.subset(time_indices(gt.timestamps, est.timestamps, "ground truth"))


def cmd_eval(
    cfg: RunConfig,
    est_path: Path,
    gt_path: Path,
    out: Path,
    loc_reference: Optional[Path] = None,
    loc_reference_gt: Optional[Path] = None,
    force: bool = False,
) -> int:
    """Metrics of ``est`` against ground truth; localization RPE when a mapping reference is given.

    ``loc_reference`` is the trajectory the map was built from and
    ``loc_reference_gt`` its ground truth, used to pair places and remove
    their true offset.
    """
    est = read_trajectory(est_path)
    gt_all = read_trajectory(gt_path)
    gt = _pair_by_time(est, gt_all)
    out = _prepare_out(out, force)
    cfg.write(out / "run_config.json")
    ev = cfg.eval
    rep = evaluate(est, gt, ev.min_travel_m, ev.max_euclid_m, ev.epe_start_index)
    if loc_reference is not None:
        ref = read_trajectory(loc_reference)
        if loc_reference_gt is None:
            rep.loc_rpe = loc_rpe(ref, est, nearest_associations(ref, gt))
        else:
            ref_gt = _pair_by_time(ref, read_trajectory(loc_reference_gt))
            rep.loc_rpe = loc_rpe(ref, est, nearest_associations(ref_gt, gt), ref_gt, gt)
    _json_dump(out / "metrics.json", rep.to_dict())
    if len(gt) >= 2:
        errs = aligned_errors(est, gt)
        with (out / "aligned_errors.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp_s", "aligned_error_m"])
            for t, e in zip(est.timestamps, errs):
                w.writerow([repr(float(t)), repr(float(e))])
    return EXIT_OK


# --- argument parsing ----------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    p.add_argument("--blur-threshold", type=float, dest="blur.intensity_threshold")
    p.add_argument("--blur-bound", type=float, dest="blur.occupancy_bound")
    p.add_argument("--cum-low", type=float, dest="mask.low")
    p.add_argument("--cum-high", type=float, dest="mask.high")
    p.add_argument("--kf-trans-m", type=float, dest="keyframe.min_translation_m")
    p.add_argument("--kf-rot-deg", type=float, dest="keyframe.min_rotation_deg")
    p.add_argument("--r-v", type=float, dest="r_v", help="map cell size in meters")
    p.add_argument("--jacobian-mode", choices=["exact_varpro", "mean_fixed"], dest="jacobian_mode")
    p.add_argument("--max-iterations", type=int, dest="solver.max_iterations")
    p.add_argument("-v", "--verbose", action="store_true")


OVERRIDE_KEYS = (
    "seed", "threads", "blur.intensity_threshold", "blur.occupancy_bound", "mask.low", "mask.high",
    "keyframe.min_translation_m", "keyframe.min_rotation_deg", "r_v", "jacobian_mode",
    "solver.max_iterations", "simulate.preset", "simulate.trajectory", "simulate.n_poses",
    "simulate.noise_sigma", "simulate.occlusion", "dump_hessian_pattern",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", dest="simulate.preset", choices=["structured", "feature-rich", "sparse-corridor"])
    p.add_argument("--trajectory", dest="simulate.trajectory", choices=["circle", "out_and_back", "stationary"])
    p.add_argument("--n-poses", type=int, dest="simulate.n_poses")
    p.add_argument("--noise", type=float, dest="simulate.noise_sigma")
    p.add_argument("--occlusion", action="store_const", const=True, dest="simulate.occlusion")

    p = sub.add_parser("ba", help="bundle-adjust a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--init", type=Path, help="initial trajectory (default DATA/initial.csv)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-hessian-pattern", action="store_const", const=True, dest="dump_hessian_pattern")

    p = sub.add_parser("map", help="build a map from scans and given poses")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--poses", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("localize", help="localize a scan stream against a map")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True, help="map file stem (without .json/.bin)")
    p.add_argument("--odometry", type=Path, help="odometry deltas (default DATA/odometry.csv)")
    p.add_argument("--initial-pose", type=float, nargs=3, metavar=("X", "Y", "THETA"))
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="score an estimated trajectory")
    _common(p)
    p.add_argument("--est", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--loc-reference", type=Path, help="trajectory the map was built from")
    p.add_argument("--loc-reference-gt", type=Path, help="ground truth of the mapping session")
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    ns = vars(args)
    overrides = {k: ns[k] for k in OVERRIDE_KEYS if k in ns and ns[k] is not None}
    paths = {k: str(v) for k, v in ns.items() if isinstance(v, Path)}
    cfg = cfgmod.with_overrides(cfg, overrides)
    cfg.paths = paths
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out, args.force)
        if args.command == "ba":
            return cmd_ba(cfg, args.data, args.out, args.init, args.force)
        if args.command == "map":
            return cmd_map(cfg, args.data, args.poses, args.out, args.force)
        if args.command == "localize":
            init = None
            if args.initial_pose is not None:
                x, y, th = args.initial_pose
                init = Pose2(th, x, y)
            return cmd_localize(cfg, args.data, args.map, args.out, args.odometry, init, args.force)
        if args.command == "eval":
            return cmd_eval(cfg, args.est, args.gt, args.out, args.loc_reference, args.loc_reference_gt, args.force)
    except (InputError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    parser.error(f"unknown command {args.command}")
    return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
