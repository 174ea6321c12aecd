"""Single-pose direct localization against a fixed intensity map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mapgrid import GridMap, footprint_cells
from .optim import (
    ConvergenceReport,
    DivergedError,
    Linearized,
    Problem,
    SolverConfig,
    gauss_newton,
)
from .scan import Scan, WeightModel, sample_points
from .se2 import Pose2, apply_perturbation, compose

MIN_RESIDUALS = 10


class InsufficientOverlapError(RuntimeError):
    pass


class LocalizationDivergedError(RuntimeError):
    def __init__(self, pose: Pose2, report: ConvergenceReport):
        super().__init__("localization diverged")
        self.pose = pose
        self.report = report


@dataclass
class LocalizerState:
    pose: Pose2
    map: GridMap
    config: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=20))
    wm: WeightModel = field(default_factory=WeightModel)
    last_report: Optional[ConvergenceReport] = None


def _map_samples(grid: GridMap, scan: Scan, pose: Pose2, wm, mask, jacobians):
    cells = footprint_cells(grid, scan, pose)
    if len(cells):
        cells = cells[grid.count.ravel()[cells] > 0]
    b = sample_points(grid.flat_centers(cells).reshape(-1, 2), pose, scan, wm, mask, jacobians)
    ok = b.valid
    map_i = grid.intensity.ravel()[cells[ok]]
    return b, ok, map_i


def localization_cost(grid: GridMap, scan: Scan, pose: Pose2, wm: WeightModel, mask=None) -> float:
    b, ok, map_i = _map_samples(grid, scan, pose, wm, mask, False)
    return float(np.sum(b.weight[ok] * (map_i - b.intensity[ok]) ** 2))


def localization_linearize(grid: GridMap, scan: Scan, pose: Pose2, wm: WeightModel, mask=None):
    """Residuals ``sqrt(w) (i_map - i_scan)`` and their (K, 3) Jacobian."""
    b, ok, map_i = _map_samples(grid, scan, pose, wm, mask, True)
    sw = np.sqrt(b.weight[ok])
    diff = map_i - b.intensity[ok]
    r = sw * diff
    J = b.d_sqrt_weight[ok] * diff[:, None] - sw[:, None] * b.d_intensity[ok]
    return r, J


def localize_frame(state: LocalizerState, scan: Scan, mask=None) -> tuple[Pose2, ConvergenceReport]:
    """Align ``scan`` to the fixed map starting from ``state.pose``.

    Updates ``state.pose`` and ``state.last_report`` on success.
    """
    grid, wm = state.map, state.wm
    r0, _ = localization_linearize(grid, scan, state.pose, wm, mask)
    if len(r0) < MIN_RESIDUALS:
        raise InsufficientOverlapError(f"only {len(r0)} valid residuals overlap the map")

    def linearize(pose):
        r, J = localization_linearize(grid, scan, pose, wm, mask)
        return Linearized(J.T @ J, -(J.T @ r), float(r @ r))

    gn = Problem(
        linearize=linearize,
        cost=lambda pose: localization_cost(grid, scan, pose, wm, mask),
        retract=apply_perturbation,
    )
    try:
        pose, report = gauss_newton(gn, state.pose, state.config, raise_on_divergence=True)
    except DivergedError as exc:
        state.last_report = exc.report
        raise LocalizationDivergedError(exc.state, exc.report) from exc
    state.pose = pose
    state.last_report = report
    return pose, report


def propagate(state: LocalizerState, odom_delta: Pose2) -> Pose2:
    """Move the estimate by a body-frame odometry increment."""
    state.pose = compose(state.pose, odom_delta)
    return state.pose
