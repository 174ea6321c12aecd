"""Separable direct bundle adjustment.

The map intensities enter the cost linearly, so for fixed poses each cell's
optimum is the weighted mean of its samples.  Substituting that mean leaves a
pose-only least-squares problem whose normal matrix is ``3(N-1)`` square no
matter how many cells the map has.  A joint solver over poses and intensities
is kept as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .mapgrid import GridMap, build_map, footprint_cells
from .optim import (
    ConvergenceReport,
    Linearized,
    Problem,
    SolverConfig,
    gauss_newton,
)
from .scan import Scan, WeightModel, sample_points
from .se2 import Pose2, Trajectory, apply_perturbation

MAX_JOINT_RESIDUALS = 1_000_000


class CovisibilityCache:
    """Candidate map cells per scan, refreshed only when the scan has moved.

    The candidate box is inflated by ``r_v`` and refreshed once any footprint
    point may have moved more than ``r_v / 2``, so it always contains the
    true footprint.
    """

    def __init__(self, grid: GridMap, scans: Sequence[Scan]):
        self.grid = grid
        self.scans = scans
        self.margin = grid.resolution_m
        self._anchor: list[Optional[Pose2]] = [None] * len(scans)
        self._cells: list[np.ndarray] = [np.zeros(0, dtype=np.intp)] * len(scans)
        self.refreshes = 0

    def _moved(self, n: int, pose: Pose2) -> float:
        a = self._anchor[n]
        dtheta = abs(math.remainder(pose.theta - a.theta, 2 * math.pi))
        return math.hypot(pose.x - a.x, pose.y - a.y) + dtheta * self.scans[n].max_range_m

    def candidates(self, n: int, pose: Pose2) -> np.ndarray:
        if self._anchor[n] is None or self._moved(n, pose) > 0.5 * self.grid.resolution_m:
            self._cells[n] = footprint_cells(self.grid, self.scans[n], pose, self.margin)
            self._anchor[n] = pose
            self.refreshes += 1
        return self._cells[n]


@dataclass
class BAProblem:
    scans: list[Scan]
    init_poses: Trajectory
    grid: GridMap
    wm: WeightModel = field(default_factory=WeightModel)
    masks: Optional[list] = None
    covis: Optional[CovisibilityCache] = None

    def __post_init__(self):
        if len(self.scans) != len(self.init_poses):
            raise ValueError(f"{len(self.scans)} scans but {len(self.init_poses)} poses")
        if len(self.scans) < 2:
            raise ValueError("bundle adjustment needs at least two scans")
        if self.masks is None:
            self.masks = [None] * len(self.scans)
        if len(self.masks) != len(self.scans):
            raise ValueError("masks must be index-aligned with scans")
        if self.covis is None:
            self.covis = CovisibilityCache(self.grid, self.scans)

    @property
    def n_poses(self) -> int:
        return len(self.scans)


@dataclass
class SampleSet:
    """Every valid (cell, scan) sample at a set of poses, flattened."""

    cell: np.ndarray
    pose: np.ndarray
    intensity: np.ndarray
    weight: np.ndarray
    d_intensity: Optional[np.ndarray] = None
    d_sqrt_weight: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.cell)


def collect_samples(problem: BAProblem, poses: Sequence[Pose2], jacobians: bool = True) -> SampleSet:
    parts = []
    for n, (scan, pose, mask) in enumerate(zip(problem.scans, poses, problem.masks)):
        cells = problem.covis.candidates(n, pose)
        if not len(cells):
            continue
        b = sample_points(problem.grid.flat_centers(cells), pose, scan, problem.wm, mask, jacobians)
        ok = b.valid
        parts.append(
            (
                cells[ok],
                np.full(int(ok.sum()), n, dtype=np.intp),
                b.intensity[ok],
                b.weight[ok],
                b.d_intensity[ok] if jacobians else None,
                b.d_sqrt_weight[ok] if jacobians else None,
            )
        )
    if not parts:
        empty = np.zeros(0)
        return SampleSet(np.zeros(0, np.intp), np.zeros(0, np.intp), empty, empty,
                         np.zeros((0, 3)) if jacobians else None,
                         np.zeros((0, 3)) if jacobians else None)
    cat = [np.concatenate(col) if col[0] is not None else None for col in zip(*parts)]
    return SampleSet(*cat)


class CellTerm(NamedTuple):
    """Residuals of one map cell and their Jacobian over the co-observing poses."""

    cell: int
    poses: np.ndarray  # (m,) pose indices, sorted
    e: np.ndarray  # (m,)
    J: np.ndarray  # (m, 3m): column block j belongs to poses[j]


@dataclass
class Linearization:
    """Reduced residuals and Jacobian pieces at one set of poses.

    For a sample ``s`` of cell ``v`` the Jacobian row is
    ``a_s`` in its own pose block plus ``sqrt(w_s) * g_t`` in the block of
    every sample ``t`` of the same cell (``g`` is zero in ``mean_fixed`` mode).
    """

    n_poses: int
    mode: str
    cell: np.ndarray  # compact cell id per sample
    cell_ids: np.ndarray  # grid flat index per compact id
    pose: np.ndarray
    sqrt_w: np.ndarray
    e: np.ndarray
    a: np.ndarray
    g: np.ndarray
    mean: np.ndarray  # per compact cell
    weight_sum: np.ndarray  # per compact cell

    @property
    def cost(self) -> float:
        return float(self.e @ self.e)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    def cell_terms(self) -> Iterator[CellTerm]:
        order = np.argsort(self.cell, kind="stable")
        bounds = np.flatnonzero(np.diff(self.cell[order])) + 1
        for group in np.split(order, bounds):
            if not len(group):
                continue
            group = group[np.argsort(self.pose[group], kind="stable")]
            m = len(group)
            J = np.zeros((m, 3 * m))
            for r, s in enumerate(group):
                J[r, 3 * r : 3 * r + 3] += self.a[s]
                for c, t in enumerate(group):
                    J[r, 3 * c : 3 * c + 3] += self.sqrt_w[s] * self.g[t]
            yield CellTerm(int(self.cell_ids[self.cell[group[0]]]), self.pose[group].copy(),
                           self.e[group].copy(), J)

    def jacobian(self) -> sp.csr_matrix:
        """Full (samples x 3N) Jacobian; quadratic in co-visibility, for tests."""
        rows, cols, vals = [], [], []
        order = np.argsort(self.cell, kind="stable")
        bounds = np.flatnonzero(np.diff(self.cell[order])) + 1
        for group in np.split(order, bounds):
            for s in group:
                for j in range(3):
                    rows.append(s)
                    cols.append(3 * self.pose[s] + j)
                    vals.append(self.a[s, j])
                    for t in group:
                        rows.append(s)
                        cols.append(3 * self.pose[t] + j)
                        vals.append(self.sqrt_w[s] * self.g[t, j])
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(self.e), 3 * self.n_poses))


def residuals_and_jacobians(
    problem: BAProblem,
    poses: Sequence[Pose2],
    mode: str = "exact_varpro",
    samples: Optional[SampleSet] = None,
) -> Linearization:
    """Linearize the reduced (map-eliminated) cost at ``poses``.

    Cells seen by fewer than two scans have an identically zero residual and
    are dropped.
    """
    if mode not in ("exact_varpro", "mean_fixed"):
        raise ValueError(f"unknown jacobian mode {mode!r}")
    s = samples if samples is not None else collect_samples(problem, poses, jacobians=True)
    uniq, compact, counts = np.unique(s.cell, return_inverse=True, return_counts=True)
    keep = counts[compact] >= 2
    cell_ids = uniq[counts >= 2]
    remap = np.cumsum(counts >= 2) - 1
    cell = remap[compact[keep]]
    pose = s.pose[keep]
    w = s.weight[keep]
    i = s.intensity[keep]
    di = s.d_intensity[keep]
    dsw = s.d_sqrt_weight[keep]

    n_cells = len(cell_ids)
    W = np.bincount(cell, w, minlength=n_cells)
    mean = np.bincount(cell, w * i, minlength=n_cells) / np.where(W > 0, W, 1.0)
    sqrt_w = np.sqrt(w)
    diff = mean[cell] - i
    e = sqrt_w * diff

    a = -sqrt_w[:, None] * di + dsw * diff[:, None]
    if mode == "mean_fixed":
        g = np.zeros_like(a)
    else:
        dw = 2.0 * sqrt_w[:, None] * dsw
        g = (w[:, None] * di - dw * diff[:, None]) / W[cell][:, None]
    return Linearization(problem.n_poses, mode, cell, cell_ids, pose, sqrt_w, e, a, g, mean, W)


@dataclass
class NormalSystem:
    H: sp.csr_matrix
    b: np.ndarray
    block_pattern: set
    fixed_first: bool = True

    @property
    def dim(self) -> int:
        return self.H.shape[0]


def _block_pattern(H: sp.spmatrix) -> set:
    coo = sp.coo_matrix(H)
    nz = coo.data != 0
    return set(zip((coo.row[nz] // 3).tolist(), (coo.col[nz] // 3).tolist()))


def _full_normal_from_linearization(lin: Linearization):
    N3 = 3 * lin.n_poses
    S = len(lin.e)
    # own-block term: sum_s a_s a_s^T at (pose_s, pose_s)
    idx = 3 * lin.pose[:, None] + np.arange(3)[None, :]
    A = sp.csr_matrix((lin.a.ravel(), (np.repeat(np.arange(S), 3), idx.ravel())), shape=(S, N3))
    H = (A.T @ A).tocsr()
    b = -(A.T @ lin.e)
    if lin.mode == "exact_varpro" and S:
        P = lin.n_cells
        col = np.repeat(lin.cell, 3)
        G = sp.csr_matrix((lin.g.ravel(), (idx.ravel(), col)), shape=(N3, P))
        C = sp.csr_matrix(((lin.sqrt_w[:, None] * lin.a).ravel(), (idx.ravel(), col)), shape=(N3, P))
        Gs = G @ sp.diags(np.sqrt(lin.weight_sum))
        CG = C @ G.T
        H = (H + CG + CG.T + Gs @ Gs.T).tocsr()
        # sum_s sqrt(w_s) e_s per cell vanishes at the weighted mean; kept for exactness
        per_cell = np.bincount(lin.cell, lin.sqrt_w * lin.e, minlength=P)
        b = b - G @ per_cell
    return H, b


def assemble(terms: Linearization | Iterable[CellTerm], n_poses: Optional[int] = None,
             fix_first: bool = True) -> NormalSystem:
    """Accumulate ``H = sum J_v^T J_v`` and ``b = -sum J_v^T e_v``.

    A :class:`Linearization` takes the vectorised path; any iterable of
    :class:`CellTerm` takes the explicit per-cell path (``n_poses`` required).
    Rows and columns of the first pose are removed when ``fix_first``.
    """
    if isinstance(terms, Linearization):
        H, b = _full_normal_from_linearization(terms)
    else:
        if n_poses is None:
            raise ValueError("n_poses is required when assembling from cell terms")
        N3 = 3 * n_poses
        rows, cols, vals = [], [], []
        b = np.zeros(N3)
        for term in terms:
            idx = (3 * term.poses[:, None] + np.arange(3)[None, :]).ravel()
            Hv = term.J.T @ term.J
            rr, cc = np.meshgrid(idx, idx, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(Hv.ravel())
            np.add.at(b, idx, -(term.J.T @ term.e))
        if rows:
            H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(N3, N3))
        else:
            H = sp.csr_matrix((N3, N3))
    H = sp.csr_matrix(H)
    if fix_first:
        H = H[3:, 3:]
        b = b[3:]
    H.sum_duplicates()
    H.eliminate_zeros()
    H = ((H + H.T) * 0.5).tocsr()
    pattern = _block_pattern(H)
    if fix_first:
        pattern = {(i + 1, j + 1) for i, j in pattern}
    return NormalSystem(H.tocsr(), np.asarray(b, dtype=float), pattern, fix_first)


def covisibility_pattern(lin: Linearization, fix_first: bool = True) -> set:
    """Pose pairs that observe at least one common (retained) cell."""
    pairs = set()
    order = np.argsort(lin.cell, kind="stable")
    bounds = np.flatnonzero(np.diff(lin.cell[order])) + 1
    for group in np.split(order, bounds):
        ps = np.unique(lin.pose[group])
        if fix_first:
            ps = ps[ps > 0]
        for i in ps:
            for j in ps:
                pairs.add((int(i), int(j)))
    return pairs


def reduced_cost(problem: BAProblem, poses: Sequence[Pose2]) -> float:
    """Weighted intensity variance summed over cells (map eliminated)."""
    s = collect_samples(problem, poses, jacobians=False)
    return _reduced_cost_from_samples(s)


def _reduced_cost_from_samples(s: SampleSet) -> float:
    if not len(s):
        return 0.0
    uniq, compact = np.unique(s.cell, return_inverse=True)
    W = np.bincount(compact, s.weight)
    mean = np.bincount(compact, s.weight * s.intensity) / W
    return float(np.sum(s.weight * (mean[compact] - s.intensity) ** 2))


def joint_cost(problem: BAProblem, poses: Sequence[Pose2], intensities: np.ndarray) -> float:
    """Full cost over poses and a dense per-cell intensity vector."""
    s = collect_samples(problem, poses, jacobians=False)
    return float(np.sum(s.weight * (intensities[s.cell] - s.intensity) ** 2))


def _retract_poses(poses: list[Pose2], dx: np.ndarray) -> list[Pose2]:
    out = [poses[0]]
    for n in range(1, len(poses)):
        out.append(apply_perturbation(poses[n], dx[3 * (n - 1) : 3 * n]))
    return out


def solve_ba(problem: BAProblem, config: SolverConfig = SolverConfig(), threads: int = 1):
    """Reduced Gauss-Newton over poses 1..N-1, then one map build.

    Returns ``(trajectory, grid_map, report)``.  Pose 0 is returned untouched.
    """
    mode = config.jacobian_mode

    def linearize(poses):
        lin = residuals_and_jacobians(problem, poses, mode)
        ns = assemble(lin)
        return Linearized(ns.H, ns.b, lin.cost)

    gn = Problem(
        linearize=linearize,
        cost=lambda poses: reduced_cost(problem, poses),
        retract=_retract_poses,
    )
    poses, report = gauss_newton(gn, list(problem.init_poses.poses), config)
    report.jacobian_mode = mode
    traj = Trajectory(poses, problem.init_poses.timestamps)
    grid = build_map(problem.scans, traj, problem.wm, problem.masks, problem.grid, threads=threads)
    return traj, grid, report


# --- joint oracle --------------------------------------------------------


def _joint_linearize(problem: BAProblem, poses, intensities, s: SampleSet):
    """Normal equations of the full cost over (poses 1..N-1, observed cells)."""
    obs = np.unique(s.cell)
    col_of_cell = np.full(problem.grid.n_cells, -1, dtype=np.intp)
    n_pose_cols = 3 * (problem.n_poses - 1)
    col_of_cell[obs] = n_pose_cols + np.arange(len(obs))
    S = len(s)
    sqrt_w = np.sqrt(s.weight)
    diff = intensities[s.cell] - s.intensity
    e = sqrt_w * diff
    jp = s.d_sqrt_weight * diff[:, None] - sqrt_w[:, None] * s.d_intensity

    movable = s.pose > 0
    prow = np.repeat(np.flatnonzero(movable), 3)
    pcol = (3 * (s.pose[movable] - 1)[:, None] + np.arange(3)[None, :]).ravel()
    rows = np.concatenate([prow, np.arange(S)])
    cols = np.concatenate([pcol, col_of_cell[s.cell]])
    vals = np.concatenate([jp[movable].ravel(), sqrt_w])
    J = sp.csr_matrix((vals, (rows, cols)), shape=(S, n_pose_cols + len(obs)))
    H = (J.T @ J).tocsr()
    b = -(J.T @ e)
    return H, b, float(e @ e), obs


@dataclass
class _JointState:
    poses: list
    intensities: np.ndarray
    known: np.ndarray


def _init_intensities(problem, poses, intensities, known):
    """Least-squares intensities for cells not yet initialised, poses held fixed."""
    s = collect_samples(problem, poses, jacobians=False)
    fresh = ~known[s.cell]
    if np.any(fresh):
        cells = s.cell[fresh]
        uniq, compact = np.unique(cells, return_inverse=True)
        sqrt_w = np.sqrt(s.weight[fresh])
        J = sp.csr_matrix((sqrt_w, (np.arange(len(cells)), compact)), shape=(len(cells), len(uniq)))
        rhs = sqrt_w * s.intensity[fresh]
        normal = (J.T @ J).diagonal()
        intensities[uniq] = (J.T @ rhs) / normal
        known[uniq] = True


def solve_joint_oracle(problem: BAProblem, config: SolverConfig = SolverConfig()):
    """Gauss-Newton over the stacked state of poses and intensities.

    Only meant for small instances; returns ``(trajectory, intensities, report)``
    where ``intensities`` is a dense per-cell array (NaN where unobserved).
    """
    s0 = collect_samples(problem, list(problem.init_poses.poses), jacobians=False)
    if len(s0) > MAX_JOINT_RESIDUALS:
        raise ValueError(f"instance too large for the joint solver: {len(s0)} residuals")

    intensities = np.zeros(problem.grid.n_cells)
    known = np.zeros(problem.grid.n_cells, dtype=bool)
    _init_intensities(problem, list(problem.init_poses.poses), intensities, known)
    n_pose_cols = 3 * (problem.n_poses - 1)
    last_obs = {}

    def linearize(state: _JointState):
        s = collect_samples(problem, state.poses, jacobians=True)
        if len(s) > MAX_JOINT_RESIDUALS:
            raise ValueError(f"instance too large for the joint solver: {len(s)} residuals")
        H, b, cost, obs = _joint_linearize(problem, state.poses, state.intensities, s)
        last_obs["obs"] = obs
        return Linearized(H, b, cost)

    def cost(state: _JointState):
        return joint_cost(problem, state.poses, state.intensities)

    def retract(state: _JointState, dx):
        poses = _retract_poses(state.poses, dx[:n_pose_cols])
        inten = state.intensities.copy()
        inten[last_obs["obs"]] += dx[n_pose_cols:]
        known = state.known.copy()
        _init_intensities(problem, poses, inten, known)
        return _JointState(poses, inten, known)

    gn = Problem(linearize=linearize, cost=cost, retract=retract, block=1)
    state0 = _JointState(list(problem.init_poses.poses), intensities, known)
    state, report = gauss_newton(gn, state0, config)
    s = collect_samples(problem, state.poses, jacobians=False)
    out = np.full(problem.grid.n_cells, np.nan)
    seen = np.unique(s.cell)
    out[seen] = state.intensities[seen]
    report.jacobian_mode = "joint"
    return Trajectory(state.poses, problem.init_poses.timestamps), out, report
