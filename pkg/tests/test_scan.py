import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import smooth_image
from sepba.preprocess import CumulativeMask
from sepba.scan import (
    InvalidSampleError,
    Scan,
    WeightModel,
    bilinear,
    list_scans,
    pixel_to_world,
    read_scan,
    sample,
    sample_jacobian_pose,
    sample_points,
    world_to_pixel,
    write_scan,
)
from sepba.se2 import Pose2, apply_perturbation

IDENTITY = Pose2(0.0, 0.0, 0.0)
WM = WeightModel()


def blank(w=11, h=11, res=1.0):
    return Scan(np.zeros((h, w)), res)


# --- projection ----------------------------------------------------------


def test_origin_projects_to_centre():
    np.testing.assert_allclose(world_to_pixel([0.0, 0.0], IDENTITY, blank()), [5.0, 5.0])


def test_point_ahead_projects_up():
    np.testing.assert_allclose(world_to_pixel([1.0, 0.0], IDENTITY, blank(res=0.5)), [5.0, 3.0])


def test_rotated_pose_projection():
    # q = R(-pi/2) (0, 1) = (1, 0) -> v = -1 + 5
    p = world_to_pixel([0.0, 1.0], Pose2(math.pi / 2, 0.0, 0.0), blank())
    np.testing.assert_allclose(p, [5.0, 4.0], atol=1e-12)


def test_sensor_left_maps_to_plus_u():
    np.testing.assert_allclose(world_to_pixel([0.0, 2.0], IDENTITY, blank()), [7.0, 5.0])


@given(
    st.floats(-3.1, 3.1), st.floats(-20, 20), st.floats(-20, 20),
    st.floats(0, 24), st.floats(0, 20),
)
def test_pixel_world_round_trip(th, x, y, u, v):
    scan = Scan(np.zeros((21, 25)), 0.37)
    pose = Pose2(th, x, y)
    m = pixel_to_world([u, v], pose, scan)
    np.testing.assert_allclose(world_to_pixel(m, pose, scan), [u, v], atol=1e-9)
    np.testing.assert_allclose(pixel_to_world(world_to_pixel(m, pose, scan), pose, scan), m, atol=1e-9)


# --- sampling ------------------------------------------------------------


def test_sample_at_lattice_point_returns_pixel(small_scan):
    pose = Pose2(0.4, 3.0, -1.0)
    m = pixel_to_world([7.0, 4.0], pose, small_scan)
    s = sample(m, pose, small_scan, WM)
    assert s.valid
    assert s.intensity == pytest.approx(small_scan.pixels[4, 7], abs=1e-12)
    rng_m = math.hypot(*((np.array([7.0, 4.0]) - small_scan.center_px) * small_scan.resolution_m))
    assert s.weight == pytest.approx(1.0 / (0.1**2 + (0.005 * rng_m) ** 2))


def test_midpoint_of_two_columns():
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    valid, val, du, dv = bilinear(img, np.array([0.5]), np.array([0.5]))
    assert valid[0] and val[0] == pytest.approx(0.5)
    assert du[0] == pytest.approx(1.0) and dv[0] == pytest.approx(0.0)


def test_weight_at_twenty_metres():
    assert WM.weight(20.0) == pytest.approx(50.0)
    scan = Scan(np.full((101, 101), 0.5), 0.5)
    s = sample([20.0, 0.0], IDENTITY, scan, WM)
    assert s.valid and s.weight == pytest.approx(50.0)


def test_weight_decreases_with_range():
    r = np.linspace(0, 100, 200)
    assert np.all(np.diff(WM.weight(r)) < 0)


def test_weight_model_rejects_nonpositive():
    with pytest.raises(ValueError):
        WeightModel(0.0, 0.005)
    with pytest.raises(ValueError):
        WeightModel(0.1, -1.0)


def test_out_of_bounds_is_invalid():
    scan = Scan(np.full((11, 11), 0.5), 1.0)
    assert not sample([5.5, 0.0], IDENTITY, scan, WM).valid
    assert not sample([0.0, -5.01], IDENTITY, scan, WM).valid
    # the far border itself is sampleable
    assert sample([-5.0, 5.0], IDENTITY, scan, WM).valid


def test_masked_neighbour_invalidates_sample():
    scan = Scan(np.full((11, 11), 0.5), 1.0)
    excluded = np.zeros((11, 11), dtype=bool)
    excluded[3, 6] = True
    mask = CumulativeMask(np.zeros((11, 11)), excluded)
    # pixel (5.5, 3.5) touches (6, 3); (4.5, 3.5) does not
    m_touch = pixel_to_world([5.5, 3.5], IDENTITY, scan)
    m_clear = pixel_to_world([4.5, 3.5], IDENTITY, scan)
    assert not sample(m_touch, IDENTITY, scan, WM, mask).valid
    assert sample(m_clear, IDENTITY, scan, WM, mask).valid
    assert sample(m_touch, IDENTITY, scan, WM).valid


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-2, 2))
def test_bilinear_exact_on_planes(a, b, c):
    vv, uu = np.mgrid[0:9, 0:12].astype(float)
    img = a * uu + b * vv + c
    rng = np.random.default_rng(0)
    u, v = rng.uniform(0, 11, 50), rng.uniform(0, 8, 50)
    valid, val, du, dv = bilinear(img, u, v)
    assert valid.all()
    np.testing.assert_allclose(val, a * u + b * v + c, atol=1e-12)
    np.testing.assert_allclose(du, a, atol=1e-12)
    np.testing.assert_allclose(dv, b, atol=1e-12)


def test_grad_px_matches_interpolant_differences():
    img = smooth_image(15, 15, seed=8)
    rng = np.random.default_rng(2)
    u = rng.integers(0, 13, 200) + rng.uniform(0.1, 0.9, 200)
    v = rng.integers(0, 13, 200) + rng.uniform(0.1, 0.9, 200)
    h = 1e-6
    _, _, du, dv = bilinear(img, u, v)
    fu = (bilinear(img, u + h, v)[1] - bilinear(img, u - h, v)[1]) / (2 * h)
    fv = (bilinear(img, u, v + h)[1] - bilinear(img, u, v - h)[1]) / (2 * h)
    np.testing.assert_allclose(du, fu, atol=1e-6)
    np.testing.assert_allclose(dv, fv, atol=1e-6)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_sampled_intensity_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    scan = Scan(rng.uniform(0, 1, (9, 13)), 0.5)
    b = sample_points(rng.uniform(-4, 4, (100, 2)), Pose2(rng.uniform(-3, 3), 0.2, -0.1), scan, WM)
    assert np.all((b.intensity[b.valid] >= 0) & (b.intensity[b.valid] <= 1))
    assert np.all(b.weight > 0)


def test_scan_invariants():
    with pytest.raises(ValueError):
        Scan(np.zeros((1, 5)), 1.0)
    with pytest.raises(ValueError):
        Scan(np.zeros((5, 5)), 0.0)
    s = Scan(np.array([[-0.5, 0.3], [1.7, 1.0]]), 1.0)
    assert s.pixels.min() >= 0.0 and s.pixels.max() <= 1.0


# --- pose Jacobian -------------------------------------------------------


def test_constant_scan_has_zero_jacobian():
    scan = Scan(np.full((11, 11), 0.7), 1.0)
    np.testing.assert_allclose(sample_jacobian_pose([1.3, -0.4], Pose2(0.2, 0.1, 0.0), scan), 0.0)


def test_ramp_jacobian():
    # intensity = c + s*u; identity pose; point at sensor coords q
    s, r = 0.01, 0.5
    vv, uu = np.mgrid[0:41, 0:41].astype(float)
    scan = Scan(0.3 + s * uu, r)
    q = np.array([2.3, -1.1])
    jac = sample_jacobian_pose(q, IDENTITY, scan)
    # u = q_y / r + c ; moving the body by dy shifts q_y by -dy
    assert jac[1] == pytest.approx(0.0, abs=1e-12)
    assert jac[2] == pytest.approx(-s / r)
    # rotating the body by dtheta moves q_y by -q_x dtheta: lever arm q_x
    assert jac[0] == pytest.approx(-s / r * q[0])


def test_invalid_sample_jacobian_raises():
    with pytest.raises(InvalidSampleError):
        sample_jacobian_pose([100.0, 0.0], IDENTITY, blank())


def _fd_jacobian(m, pose, scan, h=1e-6):
    out = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        hi = sample(m, apply_perturbation(pose, e), scan, WM).intensity
        lo = sample(m, apply_perturbation(pose, -e), scan, WM).intensity
        out[k] = (hi - lo) / (2 * h)
    return out


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(100):
        scan = Scan(smooth_image(31, 31, seed=trial), 0.5)
        pose = Pose2(rng.uniform(-3, 3), rng.uniform(-5, 5), rng.uniform(-5, 5))
        # avoid lattice lines, where the interpolant has kinks
        p = rng.integers(3, 27, 2) + rng.uniform(0.2, 0.8, 2)
        m = pixel_to_world(p, pose, scan)
        jac = sample_jacobian_pose(m, pose, scan)
        fd = _fd_jacobian(m, pose, scan)
        worst = max(worst, np.linalg.norm(jac - fd) / max(np.linalg.norm(fd), 1e-8))
    assert worst < 1e-4


def test_sqrt_weight_derivative_matches_finite_differences():
    scan = Scan(smooth_image(31, 31, seed=1), 0.5)
    pose = Pose2(0.7, 1.0, -2.0)
    m = pixel_to_world([20.3, 6.6], pose, scan)
    b = sample_points(m.reshape(1, 2), pose, scan, WM, jacobians=True)
    h = 1e-6
    fd = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        hi = sample(m, apply_perturbation(pose, e), scan, WM).weight
        lo = sample(m, apply_perturbation(pose, -e), scan, WM).weight
        fd[k] = (math.sqrt(hi) - math.sqrt(lo)) / (2 * h)
    np.testing.assert_allclose(b.d_sqrt_weight[0], fd, rtol=1e-5, atol=1e-9)


# --- file format ---------------------------------------------------------


def test_scan_file_round_trip(tmp_path, small_scan):
    meta, binf = write_scan(tmp_path / "000001", small_scan)
    assert binf.stat().st_size == 4 * small_scan.width * small_scan.height
    back = read_scan(tmp_path / "000001")
    np.testing.assert_allclose(back.pixels, small_scan.pixels, atol=1e-7)
    assert back.id == 7 and back.timestamp_s == 1.5 and back.resolution_m == 0.5
    assert back.pose_hint.theta == pytest.approx(0.3) and back.pose_hint.x == 1.0
    assert list_scans(tmp_path) == [tmp_path / "000001"]


def test_binary_layout_is_row_major(tmp_path):
    img = np.arange(6, dtype=float).reshape(2, 3) / 10
    write_scan(tmp_path / "s", Scan(img, 1.0))
    raw = np.frombuffer((tmp_path / "s.bin").read_bytes(), dtype="<f4")
    np.testing.assert_allclose(raw, img.ravel(), atol=1e-7)


def test_read_scan_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_scan(tmp_path / "missing")
    write_scan(tmp_path / "s", Scan(np.zeros((3, 3)), 1.0))
    (tmp_path / "s.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError, match="expected 9"):
        read_scan(tmp_path / "s")
