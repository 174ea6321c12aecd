import math

import numpy as np
import pytest

import sepba.ba as ba
from sepba.ba import (
    BAProblem,
    CovisibilityCache,
    _joint_linearize,
    _retract_poses,
    assemble,
    collect_samples,
    covisibility_pattern,
    joint_cost,
    reduced_cost,
    residuals_and_jacobians,
    solve_ba,
    solve_joint_oracle,
)
from sepba.mapgrid import GridMap, bounds_from_trajectory, footprint_cells
from sepba.optim import SolverConfig, UnderConstrainedError
from sepba.scan import Scan, WeightModel
from sepba.se2 import Pose2, Trajectory
from sepba.simbench import circle_trajectory, make_world, perturb_trajectory, render_sequence, stationary_trajectory


@pytest.fixture(scope="module")
def world():
    return make_world((-30, -30), (30, 30), "structured", seed=1)


@pytest.fixture(scope="module")
def instance(world):
    gt = circle_trajectory(6, 5.0)
    scans = render_sequence(world, gt, 60, 60, 0.25, noise_sigma=0.02, seed=3, psf_sigma_px=1.0)
    init = perturb_trajectory(gt, 0.5, 1.0, seed=5)
    grid = bounds_from_trajectory(gt, 12.0, 1.0)
    return scans, init, grid, gt


def _fd_gradient(prob, poses, eps=1e-6):
    g = np.zeros(3 * (len(poses) - 1))
    for k in range(len(g)):
        dx = np.zeros_like(g)
        dx[k] = eps
        cp = reduced_cost(prob, _retract_poses(poses, dx))
        cm = reduced_cost(prob, _retract_poses(poses, -dx))
        g[k] = (cp - cm) / (2 * eps)
    return g


# --- residual structure --------------------------------------------------


def test_identical_scans_and_poses_give_zero_residuals(world):
    gt = stationary_trajectory(3)
    scans = render_sequence(world, gt, 30, 30, 0.25)
    prob = BAProblem(scans, gt, bounds_from_trajectory(gt, 6.0, 0.5))
    lin = residuals_and_jacobians(prob, list(gt.poses))
    assert len(lin.e) > 0
    np.testing.assert_allclose(lin.e, 0.0, atol=1e-12)
    np.testing.assert_allclose(assemble(lin).b, 0.0, atol=1e-12)


def test_two_scans_equal_weights_split_difference():
    a, b = Scan(np.full((5, 5), 0.2), 1.0), Scan(np.full((5, 5), 0.6), 1.0)
    poses = Trajectory([Pose2(), Pose2()])
    grid = GridMap([-1.0, -1.0], 1.0, 3, 3)
    lin = residuals_and_jacobians(BAProblem([a, b], poses, grid), list(poses.poses))
    sw = np.sqrt(lin.sqrt_w**2)
    for pose_idx, sign in ((0, 1.0), (1, -1.0)):
        sel = lin.pose == pose_idx
        # mean is 0.4: scan a residual = sqrt(w)(0.4 - 0.2), scan b = sqrt(w)(0.4 - 0.6)
        np.testing.assert_allclose(lin.e[sel], sign * sw[sel] * 0.2, atol=1e-12)


def test_single_observation_cells_are_dropped():
    a = Scan(np.full((5, 5), 0.3), 1.0)
    poses = Trajectory([Pose2(), Pose2(0, 3.0, 0.0)])
    grid = GridMap([-2.0, -2.0], 1.0, 8, 5)
    lin = residuals_and_jacobians(BAProblem([a, a], poses, grid), list(poses.poses))
    counts = np.bincount(lin.cell)
    assert np.all(counts >= 2)


@pytest.mark.parametrize("mode", ["exact_varpro", "mean_fixed"])
def test_gradient_matches_finite_differences(instance, mode):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    poses = list(init.poses)
    ns = assemble(residuals_and_jacobians(prob, poses, mode))
    g_fd = _fd_gradient(prob, poses) / 2.0  # cost = e^T e, gradient = 2 J^T e = -2 b
    rel = np.abs(-ns.b - g_fd).max() / np.abs(g_fd).max()
    assert rel < 1e-4


def test_modes_share_gradient_but_not_hessian(instance):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    poses = list(init.poses)
    ex = assemble(residuals_and_jacobians(prob, poses, "exact_varpro"))
    mf = assemble(residuals_and_jacobians(prob, poses, "mean_fixed"))
    np.testing.assert_allclose(ex.b, mf.b, rtol=1e-9, atol=1e-12)
    assert np.abs((ex.H - mf.H).toarray()).max() > 1e-6


def test_exact_jacobian_matches_finite_differences(instance):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    poses = list(init.poses)
    lin = residuals_and_jacobians(prob, poses)
    J = lin.jacobian().toarray()[:, 3:]
    eps = 1e-6
    Jfd = np.zeros_like(J)
    for k in range(J.shape[1]):
        dx = np.zeros(J.shape[1])
        dx[k] = eps
        lp = residuals_and_jacobians(prob, _retract_poses(poses, dx))
        lm = residuals_and_jacobians(prob, _retract_poses(poses, -dx))
        assert len(lp.e) == len(lin.e) == len(lm.e)
        Jfd[:, k] = (lp.e - lm.e) / (2 * eps)
    assert np.abs(J - Jfd).max() / np.abs(Jfd).max() < 1e-4


@pytest.mark.parametrize("mode", ["exact_varpro", "mean_fixed"])
def test_assembly_paths_agree_with_explicit_jacobian(instance, mode):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    lin = residuals_and_jacobians(prob, list(init.poses), mode)
    fast = assemble(lin)
    slow = assemble(lin.cell_terms(), n_poses=lin.n_poses)
    J = lin.jacobian().toarray()[:, 3:]
    np.testing.assert_allclose(fast.H.toarray(), J.T @ J, atol=1e-8 * np.abs(J.T @ J).max())
    np.testing.assert_allclose(slow.H.toarray(), J.T @ J, atol=1e-8 * np.abs(J.T @ J).max())
    np.testing.assert_allclose(fast.b, -J.T @ lin.e, atol=1e-9 * np.abs(fast.b).max())
    np.testing.assert_allclose(slow.b, fast.b, atol=1e-9 * np.abs(fast.b).max())
    assert fast.block_pattern == slow.block_pattern


def test_hessian_symmetric_psd_and_pattern_is_covisibility(instance):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    lin = residuals_and_jacobians(prob, list(init.poses))
    ns = assemble(lin)
    H = ns.H.toarray()
    assert ns.dim == 3 * (len(scans) - 1)
    np.testing.assert_array_equal(H, H.T)
    assert np.linalg.eigvalsh(H).min() > -1e-9 * np.abs(H).max()
    # oracle: explicit pose pairs sharing a cell, from the raw samples
    s = collect_samples(prob, list(init.poses), jacobians=False)
    cells = {}
    for c, p in zip(s.cell, s.pose):
        cells.setdefault(int(c), set()).add(int(p))
    expected = {(i, j) for ps in cells.values() if len(ps) >= 2 for i in ps for j in ps if i > 0 and j > 0}
    assert ns.block_pattern == expected == covisibility_pattern(lin)


def test_two_pose_problem_single_block(instance):
    scans, init, grid, _ = instance
    prob = BAProblem(scans[:2], init.subset([0, 1]), grid)
    ns = assemble(residuals_and_jacobians(prob, list(prob.init_poses.poses)))
    assert ns.H.shape == (3, 3) and ns.block_pattern == {(1, 1)}


def test_separability_identity(instance):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    rng = np.random.default_rng(0)
    for _ in range(5):
        poses = list(perturb_trajectory(init, 0.3, 0.5, seed=int(rng.integers(1 << 30))).poses)
        lin = residuals_and_jacobians(prob, poses, "mean_fixed")
        s = collect_samples(prob, poses, jacobians=False)
        dense = np.zeros(grid.n_cells)
        uniq, inv = np.unique(s.cell, return_inverse=True)
        dense[uniq] = np.bincount(inv, s.weight * s.intensity) / np.bincount(inv, s.weight)
        r = reduced_cost(prob, poses)
        assert r == pytest.approx(joint_cost(prob, poses, dense), rel=1e-12)
        assert r == pytest.approx(lin.cost, rel=1e-12)


def test_reduced_gradient_equals_joint_pose_gradient(instance):
    scans, init, grid, _ = instance
    prob = BAProblem(scans, init, grid)
    poses = list(init.poses)
    lin = residuals_and_jacobians(prob, poses, "exact_varpro")
    ns = assemble(lin)
    s = collect_samples(prob, poses, jacobians=True)
    dense = np.zeros(grid.n_cells)
    uniq, inv = np.unique(s.cell, return_inverse=True)
    dense[uniq] = np.bincount(inv, s.weight * s.intensity) / np.bincount(inv, s.weight)
    _, bj, _, _ = _joint_linearize(prob, poses, dense, s)
    n = ns.dim
    np.testing.assert_allclose(ns.b, bj[:n], atol=1e-10 * max(1.0, np.abs(bj[:n]).max()))
    # the intensity block of the joint gradient vanishes at the weighted mean
    assert np.abs(bj[n:]).max() < 1e-10


# --- solve ---------------------------------------------------------------


def test_gauge_pose_bit_identical(instance):
    scans, init, grid, _ = instance
    traj, _, rep = solve_ba(BAProblem(scans, init, grid), SolverConfig(max_iterations=5))
    p0 = init[0]
    assert (traj[0].theta, traj[0].x, traj[0].y) == (p0.theta, p0.x, p0.y)
    assert all(b <= a for a, b in zip(rep.costs, rep.costs[1:]))
    assert rep.jacobian_mode == "exact_varpro"


def test_solve_reduces_error(instance):
    scans, init, grid, gt = instance
    traj, m, rep = solve_ba(BAProblem(scans, init, grid))
    assert rep.converged
    err0 = np.abs(init.as_array() - gt.as_array())[1:, 1:].max()
    err1 = np.abs(traj.as_array() - gt.as_array())[1:, 1:].max()
    assert err1 < 0.1 * err0
    assert m.observed.sum() > 0


def test_lattice_aligned_truth_is_fixed_point(world):
    # headings on multiples of 90 degrees, positions on the truth lattice, odd
    # scan size: every sample hits a lattice point, so residuals vanish
    gt = Trajectory([Pose2(0, 0, 0), Pose2(math.pi / 2, 1.0, 0.5), Pose2(math.pi, -0.75, 1.25),
                     Pose2(-math.pi / 2, 0.25, -1.0)])
    scans = render_sequence(world, gt, 41, 41, 0.25)
    grid = bounds_from_trajectory(gt, 6.0, 0.5)
    traj, _, rep = solve_ba(BAProblem(scans, gt, grid))
    assert rep.converged and rep.iterations <= 2
    assert rep.costs[0] < 1e-20
    assert np.abs(traj.as_array() - gt.as_array()).max() < 1e-9


def test_reduced_matches_joint_on_small_stationary_instance(world):
    gt = stationary_trajectory(3)
    scans = render_sequence(world, gt, 40, 40, 0.25, noise_sigma=0.02, seed=4)
    init = perturb_trajectory(gt, 0.2, 0.5, seed=2)
    grid = bounds_from_trajectory(gt, 5.0, 1.0)  # 11 x 11 cells
    cfg = SolverConfig(max_iterations=100, update_tolerance=1e-10, cost_rel_tolerance=1e-15)
    tb, _, _ = solve_ba(BAProblem(scans, init, grid), cfg)
    tj, inten, rj = solve_joint_oracle(BAProblem(scans, init, grid), cfg)
    assert np.abs(tb.as_array() - tj.as_array()).max() < 1e-6
    # the joint optimum intensities are the weighted means at the joint poses
    prob = BAProblem(scans, init, grid)
    s = collect_samples(prob, list(tj.poses), jacobians=False)
    uniq, inv = np.unique(s.cell, return_inverse=True)
    means = np.bincount(inv, s.weight * s.intensity) / np.bincount(inv, s.weight)
    np.testing.assert_allclose(inten[uniq], means, atol=1e-10)
    assert rj.jacobian_mode == "joint"


def test_reduced_nnz_independent_of_cell_count(world):
    gt = stationary_trajectory(4)
    scans = render_sequence(world, gt, 40, 40, 0.25, noise_sigma=0.02, seed=4)
    init = perturb_trajectory(gt, 0.2, 0.5, seed=2)
    cfg = SolverConfig(max_iterations=2)
    reduced, joint = [], []
    for rv in (1.0, 0.5):
        grid = bounds_from_trajectory(gt, 5.0, rv)
        _, _, rb = solve_ba(BAProblem(scans, init, grid), cfg)
        _, _, rj = solve_joint_oracle(BAProblem(scans, init, grid), cfg)
        reduced.append(rb.h_nnz)
        joint.append(rj.h_nnz)
    assert reduced[0] == reduced[1] == 81
    assert joint[1] > 2 * joint[0]


def test_joint_oracle_refuses_large_instances(world, monkeypatch):
    gt = stationary_trajectory(2)
    scans = render_sequence(world, gt, 20, 20, 0.25)
    monkeypatch.setattr(ba, "MAX_JOINT_RESIDUALS", 10)
    with pytest.raises(ValueError, match="too large"):
        solve_joint_oracle(BAProblem(scans, gt, bounds_from_trajectory(gt, 3.0, 0.5)))


def test_disconnected_pose_is_named():
    # pose 2 sees nothing any other pose sees
    s = Scan(np.full((5, 5), 0.4), 1.0)
    poses = Trajectory([Pose2(), Pose2(0, 0.5, 0.0), Pose2(0, 40.0, 0.0)])
    grid = bounds_from_trajectory(poses, 4.0, 1.0)
    with pytest.raises(UnderConstrainedError) as exc:
        solve_ba(BAProblem([s, s, s], poses, grid))
    assert 2 in [st + 1 for st in exc.value.states]


def test_problem_validation(instance):
    scans, init, grid, _ = instance
    with pytest.raises(ValueError):
        BAProblem(scans[:3], init, grid)
    with pytest.raises(ValueError):
        BAProblem(scans[:1], init.subset([0]), grid)
    with pytest.raises(ValueError):
        BAProblem(scans, init, grid, masks=[None])


def test_covisibility_cache_refreshes_only_after_motion(instance):
    scans, init, grid, _ = instance
    cache = CovisibilityCache(grid, scans)
    p = init[1]
    first = cache.candidates(1, p)
    cache.candidates(1, Pose2(p.theta, p.x + 0.1, p.y))
    assert cache.refreshes == 1
    moved = cache.candidates(1, Pose2(p.theta, p.x + 0.6, p.y))
    assert cache.refreshes == 2 and not np.array_equal(first, moved)


def test_cached_candidates_cover_true_footprint(instance):
    scans, init, grid, _ = instance
    cache = CovisibilityCache(grid, scans)
    p = init[2]
    cache.candidates(2, p)
    q = Pose2(p.theta + 0.001, p.x + 0.3, p.y - 0.2)  # moved less than r_v / 2
    cached = set(cache.candidates(2, q).tolist())
    assert cache.refreshes == 1
    assert set(footprint_cells(grid, scans[2], q).tolist()) <= cached
