"""Synthetic intensity worlds, scan rendering and trajectory generators."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..mapgrid import GridMap
from ..scan import Scan, bilinear, pixel_to_sensor
from ..se2 import Pose2, Trajectory, compose, relative, transform_point


@dataclass(frozen=True)
class FeatureSpec:
    """Parameters of the generated structure.

    Widths are Gaussian standard deviations in meters.  ``empty_fraction`` is
    the probability that a generated feature is dropped, so higher values
    give emptier worlds.  Counts are per 120 m x 120 m and scale with area,
    so a larger world keeps the same feature density.
    """

    n_buildings: int = 20
    building_size_m: tuple[float, float] = (6.0, 18.0)
    wall_width_m: float = 2.0
    wall_intensity: tuple[float, float] = (0.6, 1.0)
    n_blobs: int = 25
    blob_sigma_m: tuple[float, float] = (2.0, 5.0)
    blob_intensity: tuple[float, float] = (0.3, 0.8)
    clutter_per_100m2: float = 1.0
    clutter_sigma_m: float = 1.0
    clutter_intensity: tuple[float, float] = (0.4, 0.9)
    empty_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


REFERENCE_AREA_M2 = 120.0 * 120.0

PRESETS: dict[str, FeatureSpec] = {
    "structured": FeatureSpec(),
    "feature-rich": FeatureSpec(n_buildings=30, n_blobs=40, clutter_per_100m2=3.0),
    "sparse-corridor": FeatureSpec(
        n_buildings=0,
        n_blobs=6,
        blob_sigma_m=(0.4, 0.8),
        blob_intensity=(0.2, 0.45),
        clutter_per_100m2=0.05,
        clutter_sigma_m=0.25,
        clutter_intensity=(0.55, 0.9),
        empty_fraction=0.5,
    ),
}


@dataclass(eq=False)
class SyntheticWorld:
    truth_map: GridMap
    feature_spec: FeatureSpec
    rng_seed: int
    lo_m: np.ndarray = field(default=None)
    hi_m: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lo_m is None:
            self.lo_m = self.truth_map.origin_m.copy()
        if self.hi_m is None:
            self.hi_m = self.truth_map.cell_center(self.truth_map.rows - 1, self.truth_map.cols - 1)

    def intensity_at(self, pts: np.ndarray) -> np.ndarray:
        """Bilinear lookup in the truth map; zero outside it."""
        pts = np.asarray(pts, dtype=float)
        g = self.truth_map
        u = (pts[..., 0] - g.origin_m[0]) / g.resolution_m
        v = (pts[..., 1] - g.origin_m[1]) / g.resolution_m
        valid, val, _, _ = bilinear(g.intensity, u, v)
        return np.where(valid, val, 0.0)


def _segment_distance(px, py, a, b):
    d = b - a
    L2 = float(d @ d)
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / max(L2, 1e-12), 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def make_world(
    lo_m,
    hi_m,
    spec: FeatureSpec | str = "structured",
    seed: int = 0,
    resolution_m: float = 0.25,
) -> SyntheticWorld:
    """Generate a world covering the box ``[lo_m, hi_m]``; deterministic per seed."""
    if isinstance(spec, str):
        spec = PRESETS[spec]
    if resolution_m > 0.25:
        raise ValueError("truth maps must be at least 0.25 m resolution")
    lo = np.asarray(lo_m, dtype=float)
    hi = np.asarray(hi_m, dtype=float)
    rng = np.random.default_rng(seed)
    cols = int(math.ceil((hi[0] - lo[0]) / resolution_m)) + 1
    rows = int(math.ceil((hi[1] - lo[1]) / resolution_m)) + 1
    xs = lo[0] + resolution_m * np.arange(cols)
    ys = lo[1] + resolution_m * np.arange(rows)
    X, Y = np.meshgrid(xs, ys)
    field_ = np.zeros_like(X)

    def keep():
        return rng.random() >= spec.empty_fraction

    scale = float(np.prod(hi - lo)) / REFERENCE_AREA_M2

    def add_local(cx, cy, radius, fn):
        c0 = max(0, int((cx - radius - lo[0]) / resolution_m))
        c1 = min(cols, int((cx + radius - lo[0]) / resolution_m) + 2)
        r0 = max(0, int((cy - radius - lo[1]) / resolution_m))
        r1 = min(rows, int((cy + radius - lo[1]) / resolution_m) + 2)
        if c1 > c0 and r1 > r0:
            sl = (slice(r0, r1), slice(c0, c1))
            field_[sl] = np.maximum(field_[sl], fn(X[sl], Y[sl]))

    for _ in range(int(round(spec.n_buildings * scale))):
        w, h = rng.uniform(*spec.building_size_m, size=2)
        cx, cy = rng.uniform(lo, hi)
        ang = rng.uniform(0, np.pi)
        amp = rng.uniform(*spec.wall_intensity)
        if not keep():
            continue
        R = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        corners = (R @ np.array([[-w, -h], [w, -h], [w, h], [-w, h]]).T / 2).T + (cx, cy)
        # one side left open, like a facade seen from the street
        open_side = rng.integers(4)
        for k in range(4):
            if k == open_side:
                continue
            a, b = corners[k], corners[(k + 1) % 4]
            sig = spec.wall_width_m

            def wall(px, py, a=a, b=b, sig=sig, amp=amp):
                return amp * np.exp(-0.5 * (_segment_distance(px, py, a, b) / sig) ** 2)

            add_local(cx, cy, 0.5 * math.hypot(w, h) + 4 * sig, wall)

    for _ in range(int(round(spec.n_blobs * scale))):
        cx, cy = rng.uniform(lo, hi)
        sig = rng.uniform(*spec.blob_sigma_m)
        amp = rng.uniform(*spec.blob_intensity)
        if not keep():
            continue
        add_local(cx, cy, 4 * sig,
                  lambda px, py, cx=cx, cy=cy, sig=sig, amp=amp:
                  amp * np.exp(-0.5 * ((px - cx) ** 2 + (py - cy) ** 2) / sig**2))

    area = float(np.prod(hi - lo))
    n_clutter = rng.poisson(spec.clutter_per_100m2 * area / 100.0)
    for _ in range(n_clutter):
        cx, cy = rng.uniform(lo, hi)
        amp = rng.uniform(*spec.clutter_intensity)
        sig = spec.clutter_sigma_m
        if not keep():
            continue
        add_local(cx, cy, 4 * sig,
                  lambda px, py, cx=cx, cy=cy, sig=sig, amp=amp:
                  amp * np.exp(-0.5 * ((px - cx) ** 2 + (py - cy) ** 2) / sig**2))

    field_ = np.clip(field_, 0.0, 1.0)
    grid = GridMap(lo, resolution_m, cols, rows, field_, np.ones_like(field_), np.ones(field_.shape, np.int64))
    return SyntheticWorld(grid, spec, seed, lo, hi)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def occlusion_mask(clean: np.ndarray, threshold: float = 0.8) -> np.ndarray:
    """Pixels more than one pixel beyond the first return above ``threshold`` on their ray."""
    h, w = clean.shape
    cu, cv = (w - 1) / 2.0, (h - 1) / 2.0
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    du, dv = uu - cu, vv - cv
    dist = np.hypot(du, dv)
    K = int(np.ceil(dist.max())) + 1
    s = np.arange(K, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        ux = np.where(dist > 0, du / dist, 0.0)
        vy = np.where(dist > 0, dv / dist, 0.0)
    su = cu + s[None, None, :] * ux[..., None]
    sv = cv + s[None, None, :] * vy[..., None]
    # nearest-pixel lookup at unit steps cannot step over a one-pixel wall
    ru = np.clip(np.rint(su).astype(np.intp), 0, w - 1)
    rv = np.clip(np.rint(sv).astype(np.intp), 0, h - 1)
    vals = clean[rv, ru]
    before = s[None, None, :] <= dist[..., None]
    hits = (vals > threshold) & before
    first = np.where(hits.any(axis=-1), hits.argmax(axis=-1), np.inf)
    return dist > first + 1.0


def render_scan(
    world: SyntheticWorld,
    pose: Pose2,
    w: int,
    h: int,
    r_r: float,
    noise_sigma: float = 0.0,
    seed=0,
    occlusion: bool = False,
    occlusion_threshold: float = 0.8,
    scan_id: int = 0,
    timestamp_s: float = 0.0,
    psf_sigma_px: float = 0.0,
) -> Scan:
    """Render a Cartesian scan by sampling the truth map at every pixel.

    Noise is drawn per pixel and, when ``psf_sigma_px > 0``, smoothed together
    with the signal by a Gaussian point-spread function before clipping.
    """
    proto = Scan(np.zeros((h, w)), r_r)
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    q = pixel_to_sensor(np.stack([uu, vv], axis=-1), proto)
    pts = transform_point(pose, q.reshape(-1, 2))
    clean = world.intensity_at(pts).reshape(h, w)
    rng = _as_rng(seed)
    noisy = clean + (rng.normal(0.0, noise_sigma, size=clean.shape) if noise_sigma > 0 else 0.0)
    if psf_sigma_px > 0:
        noisy = ndimage.gaussian_filter(noisy, psf_sigma_px, mode="nearest", truncate=3.0)
    noisy = np.clip(noisy, 0.0, 1.0)
    if occlusion:
        noisy[occlusion_mask(clean, occlusion_threshold)] = 0.0
    return Scan(noisy, r_r, timestamp_s, scan_id, pose)


def render_sequence(world, traj: Trajectory, w, h, r_r, noise_sigma=0.0, seed=0, occlusion=False, psf_sigma_px=0.0):
    rng = _as_rng(seed)
    return [
        render_scan(world, p, w, h, r_r, noise_sigma, rng, occlusion, scan_id=n, timestamp_s=t,
                    psf_sigma_px=psf_sigma_px)
        for n, (p, t) in enumerate(zip(traj.poses, traj.timestamps))
    ]


def perturb_trajectory(traj: Trajectory, max_trans_m: float, max_rot_deg: float, seed: int = 0) -> Trajectory:
    """Uniform per-axis translation and heading noise on every pose but the first."""
    rng = np.random.default_rng(seed)
    n = len(traj)
    dxy = rng.uniform(-max_trans_m, max_trans_m, size=(n, 2))
    dth = rng.uniform(-math.radians(max_rot_deg), math.radians(max_rot_deg), size=n)
    out = [traj[0]] if n else []
    for k in range(1, n):
        p = traj[k]
        out.append(Pose2(p.theta + dth[k], p.x + dxy[k, 0], p.y + dxy[k, 1]))
    return Trajectory(out, traj.timestamps)


# --- trajectory generators ----------------------------------------------


def circle_trajectory(n: int, radius: float, center=(0.0, 0.0), turns: float = 1.0, dt: float = 0.25) -> Trajectory:
    """Counter-clockwise circle, heading tangent to the path."""
    phis = 2 * np.pi * turns * np.arange(n) / n
    poses = [
        Pose2(phi + np.pi / 2, center[0] + radius * np.cos(phi), center[1] + radius * np.sin(phi))
        for phi in phis
    ]
    return Trajectory(poses, [k * dt for k in range(n)])


def stationary_trajectory(n: int, jitter_m: float = 0.0, jitter_deg: float = 0.0, seed: int = 0) -> Trajectory:
    base = Trajectory([Pose2()] * n)
    return perturb_trajectory(base, jitter_m, jitter_deg, seed)


def out_and_back(length_m: float, spacing_m: float, lateral_m: float = 0.0, dt: float = 1.0) -> Trajectory:
    """Drive +x along a street, U-turn, and drive back offset by ``lateral_m``.

    Both passes visit the same stations, so the second pass revisits every
    place of the first after ``~2 * length_m`` of travel.
    """
    xs = np.arange(0.0, length_m + 1e-9, spacing_m)
    poses = [Pose2(0.0, x, 0.0) for x in xs]
    poses += [Pose2(np.pi, x, lateral_m) for x in xs[::-1]]
    return Trajectory(poses, [k * dt for k in range(len(poses))])


def odometry_deltas(traj: Trajectory, trans_sigma: float = 0.0, rot_sigma_deg: float = 0.0, seed: int = 0) -> Trajectory:
    """Body-frame increments; row 0 is the identity, row k maps frame k-1 to k."""
    rng = np.random.default_rng(seed)
    deltas = [Pose2()]
    for k in range(1, len(traj)):
        d = relative(traj[k - 1], traj[k])
        if trans_sigma > 0 or rot_sigma_deg > 0:
            noise = Pose2(
                math.radians(rot_sigma_deg) * rng.normal(),
                trans_sigma * rng.normal(),
                trans_sigma * rng.normal(),
            )
            d = compose(d, noise)
        deltas.append(d)
    return Trajectory(deltas, traj.timestamps)

