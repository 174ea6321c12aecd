"""Trajectory and localization error metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from ..se2 import Pose2, Trajectory, compose, inverse, relative, wrap_angle


def _xy(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.positions()
    return np.array([[p.x, p.y] for p in traj], dtype=float).reshape(-1, 2)


def _check_pair(est, gt) -> None:
    if len(est) != len(gt):
        raise ValueError(f"trajectories differ in length: {len(est)} vs {len(gt)}")


def umeyama_se2(src: np.ndarray, dst: np.ndarray) -> Pose2:
    """Rigid transform ``A`` minimizing ``sum |A src_k - dst_k|^2`` (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    t = mu_d - R @ mu_s
    return Pose2(math.atan2(R[1, 0], R[0, 0]), t[0], t[1])


def ate_alignment(est, gt) -> Pose2:
    _check_pair(est, gt)
    if len(gt) < 2:
        raise ValueError("absolute trajectory error needs at least 2 poses")
    return umeyama_se2(_xy(est), _xy(gt))


def aligned_errors(est, gt) -> np.ndarray:
    """Per-pose translation error after the best rigid alignment."""
    A = ate_alignment(est, gt)
    est = est if isinstance(est, Trajectory) else Trajectory(list(est))
    aligned = _xy(est.transformed(A))
    return np.linalg.norm(aligned - _xy(gt), axis=1)


def ate(est, gt) -> float:
    """RMS translation error after rigid (no-scale) alignment of ``est`` onto ``gt``."""
    err = aligned_errors(est, gt)
    return float(np.sqrt(np.mean(err**2)))


def epe(est, gt, start_index: int = 0) -> float:
    """Translation norm of ``(T_N^gt)^-1 T_s^gt (T_s^est)^-1 T_N^est``.

    ``s`` is ``start_index`` (the first pose by default), so the value is the
    start-to-end drift once both trajectories share their start pose.
    """
    _check_pair(est, gt)
    if len(gt) == 0:
        raise ValueError("end-point error needs a non-empty trajectory")
    if not 0 <= start_index < len(gt):
        raise IndexError(f"start_index {start_index} out of range")
    last = len(gt) - 1
    e = compose(compose(inverse(gt[last]), gt[start_index]), compose(inverse(est[start_index]), est[last]))
    return float(math.hypot(e.x, e.y))


def arc_length(traj) -> np.ndarray:
    xy = _xy(traj)
    if len(xy) == 0:
        return np.zeros(0)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])


def revisit_pairs(gt, min_travel_m: float = 300.0, max_euclid_m: float = 25.0) -> list[tuple[int, int]]:
    """For each pose, the closest earlier-or-later pose far along the path but near in space."""
    xy = _xy(gt)
    s = arc_length(gt)
    pairs = []
    for n in range(len(xy)):
        far = np.abs(s - s[n]) >= min_travel_m
        if not far.any():
            continue
        d = np.linalg.norm(xy - xy[n], axis=1)
        d = np.where(far, d, np.inf)
        k = int(np.argmin(d))
        if d[k] <= max_euclid_m:
            pairs.append((n, k))
    return pairs


def self_consistency(
    est, gt, min_travel_m: float = 300.0, max_euclid_m: float = 25.0
) -> Optional[tuple[float, float]]:
    """RMS ``(translation_m, rotation_deg)`` of relative-pose errors at revisits.

    Returns None when the ground truth never revisits a place under the
    given thresholds.
    """
    _check_pair(est, gt)
    pairs = revisit_pairs(gt, min_travel_m, max_euclid_m)
    if not pairs:
        return None
    t2, r2 = [], []
    for n, k in pairs:
        e = compose(inverse(relative(gt[n], gt[k])), relative(est[n], est[k]))
        t2.append(e.x**2 + e.y**2)
        r2.append(math.degrees(wrap_angle(e.theta)) ** 2)
    return float(math.sqrt(np.mean(t2))), float(math.sqrt(np.mean(r2)))


def nearest_associations(map_traj, loc_traj, max_dist_m: float = math.inf) -> list[tuple[int, int]]:
    """Pair each localization pose with the spatially closest mapping pose."""
    a, b = _xy(map_traj), _xy(loc_traj)
    if len(a) == 0:
        return []
    out = []
    for j, p in enumerate(b):
        d = np.linalg.norm(a - p, axis=1)
        i = int(np.argmin(d))
        if d[i] <= max_dist_m:
            out.append((i, j))
    return out


def loc_rpe(
    map_traj,
    loc_traj,
    associations: Sequence[tuple[int, int]],
    map_gt=None,
    loc_gt=None,
) -> tuple[float, float, float]:
    """RMS ``(longitudinal_m, lateral_m, yaw_deg)`` localization error over associations.

    Each pair ``(i, j)`` compares localization pose ``j`` with mapping pose
    ``i`` in the body frame of the mapping pose (longitudinal is body x,
    lateral body y).  Without ground truth the two are assumed to be the same
    physical place, so the error is ``map_i^-1 loc_j``.  With ``map_gt`` and
    ``loc_gt`` the true offset between the places is removed first.
    """
    if len(associations) == 0:
        raise ValueError("no associations between mapping and localization poses")
    if (map_gt is None) != (loc_gt is None):
        raise ValueError("map_gt and loc_gt must be given together")
    rows = []
    for i, j in associations:
        e = relative(map_traj[i], loc_traj[j])
        if map_gt is not None:
            e = compose(inverse(relative(map_gt[i], loc_gt[j])), e)
        rows.append((e.x, e.y, math.degrees(wrap_angle(e.theta))))
    rms = np.sqrt(np.mean(np.square(rows), axis=0))
    return float(rms[0]), float(rms[1]), float(rms[2])


@dataclass
class MetricReport:
    """Evaluation summary; metrics that do not apply stay None (null in JSON)."""

    ate_m: Optional[float] = None
    epe_m: Optional[float] = None
    self_consistency: Optional[tuple[float, float]] = None
    loc_rpe: Optional[tuple[float, float, float]] = None
    n_poses: int = 0
    n_revisits: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("self_consistency", "loc_rpe"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        for k in ("self_consistency", "loc_rpe"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def evaluate(est: Trajectory, gt: Trajectory, min_travel_m=300.0, max_euclid_m=25.0, epe_start=0) -> MetricReport:
    _check_pair(est, gt)
    rep = MetricReport(n_poses=len(gt))
    if len(gt) >= 2:
        rep.ate_m = ate(est, gt)
        rep.epe_m = epe(est, gt, epe_start)
    rep.self_consistency = self_consistency(est, gt, min_travel_m, max_euclid_m)
    rep.n_revisits = len(revisit_pairs(gt, min_travel_m, max_euclid_m))
    return rep
