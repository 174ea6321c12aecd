"""Cartesian intensity scans, pixel projection, bilinear sampling and weights.

Pixel convention: origin top-left, ``u`` to the right (columns), ``v`` down
(rows).  Sensor ``+x`` points up in the image (``-v``) and sensor ``+y``
points right (``+u``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

from .se2 import Pose2, inverse_transform_point, transform_point

if TYPE_CHECKING:
    from .preprocess import CumulativeMask


class InvalidSampleError(ValueError):
    """Raised when a Jacobian is requested at an invalid sample."""


@dataclass(frozen=True, eq=False)
class Scan:
    pixels: np.ndarray
    resolution_m: float
    timestamp_s: float = 0.0
    id: int = 0
    pose_hint: Optional[Pose2] = None

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("scan pixels must be a 2D array")
        if px.shape[0] < 2 or px.shape[1] < 2:
            raise ValueError("scan must be at least 2x2 pixels")
        if self.resolution_m <= 0:
            raise ValueError("resolution_m must be positive")
        if not np.all(np.isfinite(px)):
            raise ValueError("scan pixels must be finite")
        px = np.clip(px, 0.0, 1.0)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "resolution_m", float(self.resolution_m))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def center_px(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    def with_pixels(self, pixels: np.ndarray) -> "Scan":
        return Scan(pixels, self.resolution_m, self.timestamp_s, self.id, self.pose_hint)

    def footprint_corners(self) -> np.ndarray:
        """Sensor-frame coordinates of the four corner pixel centres."""
        hx = (self.height - 1) / 2.0 * self.resolution_m
        hy = (self.width - 1) / 2.0 * self.resolution_m
        return np.array([[hx, hy], [hx, -hy], [-hx, hy], [-hx, -hy]])

    @property
    def max_range_m(self) -> float:
        return float(np.hypot(*self.footprint_corners()[0]))


@dataclass(frozen=True)
class WeightModel:
    sigma_pixel: float = 0.1
    sigma_range_per_m: float = 0.005

    def __post_init__(self):
        if self.sigma_pixel <= 0 or self.sigma_range_per_m <= 0:
            raise ValueError("weight model standard deviations must be positive")

    def weight(self, range_m):
        r = np.asarray(range_m, dtype=float)
        return 1.0 / (self.sigma_pixel**2 + (self.sigma_range_per_m * r) ** 2)


@dataclass
class SampleResult:
    intensity: float = 0.0
    weight: float = 0.0
    valid: bool = False
    grad_px: np.ndarray = field(default_factory=lambda: np.zeros(2))


def sensor_to_pixel(q: np.ndarray, scan: Scan) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    u = q[..., 1] / scan.resolution_m + (scan.width - 1) / 2.0
    v = -q[..., 0] / scan.resolution_m + (scan.height - 1) / 2.0
    return np.stack([u, v], axis=-1)


def pixel_to_sensor(p: np.ndarray, scan: Scan) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    qx = -(p[..., 1] - (scan.height - 1) / 2.0) * scan.resolution_m
    qy = (p[..., 0] - (scan.width - 1) / 2.0) * scan.resolution_m
    return np.stack([qx, qy], axis=-1)


def world_to_pixel(m, pose: Pose2, scan: Scan) -> np.ndarray:
    """Project world point(s) ``m`` into pixel coordinates of ``scan`` taken at ``pose``."""
    return sensor_to_pixel(inverse_transform_point(pose, m), scan)


def pixel_to_world(p, pose: Pose2, scan: Scan) -> np.ndarray:
    return transform_point(pose, pixel_to_sensor(p, scan))


def pixel_to_sensor_jacobian(scan: Scan) -> np.ndarray:
    """Constant d(u, v)/d(q_x, q_y)."""
    r = scan.resolution_m
    return np.array([[0.0, 1.0 / r], [-1.0 / r, 0.0]])


@dataclass
class SampleBatch:
    """Vectorised sampling output for K query points.

    Arrays are only meaningful where ``valid`` is true.  ``d_intensity`` and
    ``d_sqrt_weight`` are derivatives w.r.t. the body-frame pose twist
    ``(dtheta, dx, dy)`` and are present only when requested.
    """

    valid: np.ndarray
    intensity: np.ndarray
    weight: np.ndarray
    grad_px: np.ndarray
    sensor_pts: np.ndarray
    d_intensity: Optional[np.ndarray] = None
    d_sqrt_weight: Optional[np.ndarray] = None


def bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear interpolation with analytic gradient.

    Returns ``(valid, value, du, dv)``.  Points outside ``[0, w-1] x [0, h-1]``
    are invalid.  The cell is chosen by ``floor`` (clamped at the last row and
    column so the far border remains sampleable).
    """
    h, w = image.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    valid = (u >= 0.0) & (u <= w - 1) & (v >= 0.0) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    fu = uc - u0
    fv = vc - v0
    i00 = image[v0, u0]
    i10 = image[v0, u0 + 1]
    i01 = image[v0 + 1, u0]
    i11 = image[v0 + 1, u0 + 1]
    top = i00 + fu * (i10 - i00)
    bottom = i01 + fu * (i11 - i01)
    value = top + fv * (bottom - top)
    du = (1.0 - fv) * (i10 - i00) + fv * (i11 - i01)
    dv = bottom - top
    return valid, value, du, dv


def _mask_excluded(mask: "CumulativeMask", u: np.ndarray, v: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """True where any of the four interpolation neighbours is excluded."""
    excl = mask.excluded
    h, w = excl.shape
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    hit = excl[v0, u0] | excl[v0, u0 + 1] | excl[v0 + 1, u0] | excl[v0 + 1, u0 + 1]
    return hit & valid


def sample_points(
    m: np.ndarray,
    pose: Pose2,
    scan: Scan,
    wm: WeightModel,
    mask: Optional["CumulativeMask"] = None,
    jacobians: bool = False,
) -> SampleBatch:
    """Sample ``scan`` (taken at ``pose``) at world points ``m`` of shape (K, 2)."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    q = inverse_transform_point(pose, m)
    p = sensor_to_pixel(q, scan)
    valid, value, du, dv = bilinear(scan.pixels, p[:, 0], p[:, 1])
    if mask is not None:
        valid &= ~_mask_excluded(mask, p[:, 0], p[:, 1], valid)
    range2 = q[:, 0] ** 2 + q[:, 1] ** 2
    weight = 1.0 / (wm.sigma_pixel**2 + wm.sigma_range_per_m**2 * range2)
    grad = np.stack([du, dv], axis=-1)
    batch = SampleBatch(valid, value, weight, grad, q)
    if jacobians:
        batch.d_intensity = intensity_pose_jacobian(grad, q, scan)
        # d sqrt(w) / d q = -w^(3/2) s^2 q ; d q / d xi = [[qy, -1, 0], [-qx, 0, -1]]
        coeff = -(weight**1.5) * wm.sigma_range_per_m**2
        dsw = np.zeros((len(q), 3))
        dsw[:, 1] = -coeff * q[:, 0]
        dsw[:, 2] = -coeff * q[:, 1]
        batch.d_sqrt_weight = dsw
    return batch


def intensity_pose_jacobian(grad_px: np.ndarray, q: np.ndarray, scan: Scan) -> np.ndarray:
    """Chain rule ``grad_px . dp/dq . dq/dxi`` for (K, 2) gradients -> (K, 3)."""
    r = scan.resolution_m
    # grad_px . dp/dq with dp/dq = [[0, 1/r], [-1/r, 0]]
    gq_x = -grad_px[:, 1] / r
    gq_y = grad_px[:, 0] / r
    jac = np.empty((len(q), 3))
    jac[:, 0] = gq_x * q[:, 1] - gq_y * q[:, 0]
    jac[:, 1] = -gq_x
    jac[:, 2] = -gq_y
    return jac


def sample(
    m,
    pose: Pose2,
    scan: Scan,
    wm: WeightModel,
    mask: Optional["CumulativeMask"] = None,
) -> SampleResult:
    """Sample a single world point."""
    b = sample_points(np.asarray(m, dtype=float).reshape(1, 2), pose, scan, wm, mask)
    if not b.valid[0]:
        return SampleResult(valid=False)
    return SampleResult(float(b.intensity[0]), float(b.weight[0]), True, b.grad_px[0].copy())


def sample_jacobian_pose(m, pose: Pose2, scan: Scan, wm: WeightModel | None = None, mask=None) -> np.ndarray:
    """d(intensity)/d(xi) at xi = 0 for the body-frame perturbation of ``pose``."""
    wm = wm or WeightModel()
    b = sample_points(np.asarray(m, dtype=float).reshape(1, 2), pose, scan, wm, mask, jacobians=True)
    if not b.valid[0]:
        raise InvalidSampleError("sample is outside the scan footprint or masked")
    return b.d_intensity[0].copy()


# --- file format ---------------------------------------------------------


def scan_sidecar(scan: Scan) -> dict:
    hint = scan.pose_hint
    return {
        "id": int(scan.id),
        "timestamp_s": float(scan.timestamp_s),
        "width": int(scan.width),
        "height": int(scan.height),
        "resolution_m": float(scan.resolution_m),
        "pose_hint": None if hint is None else [hint.x, hint.y, hint.theta],
    }


def write_scan(stem: str | Path, scan: Scan) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.bin``; returns both paths."""
    stem = Path(stem)
    meta_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    meta_path.write_text(json.dumps(scan_sidecar(scan), indent=2, sort_keys=True) + "\n")
    bin_path.write_bytes(scan.pixels.astype("<f4").tobytes(order="C"))
    return meta_path, bin_path


def read_scan(stem: str | Path) -> Scan:
    stem = Path(stem)
    meta_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    for p in (meta_path, bin_path):
        if not p.exists():
            raise FileNotFoundError(f"scan file not found: {p}")
    meta = json.loads(meta_path.read_text())
    w, h = int(meta["width"]), int(meta["height"])
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if raw.size != w * h:
        raise ValueError(f"{bin_path}: expected {w * h} floats, found {raw.size}")
    hint = meta.get("pose_hint")
    pose_hint = None if hint is None else Pose2(hint[2], hint[0], hint[1])
    return Scan(
        raw.reshape(h, w).astype(np.float64),
        float(meta["resolution_m"]),
        float(meta["timestamp_s"]),
        int(meta["id"]),
        pose_hint,
    )


def list_scans(directory: str | Path) -> list[Path]:
    """Scan stems in a directory, sorted by file name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scan directory not found: {directory}")
    return sorted(p.with_suffix("") for p in directory.glob("*.json"))

