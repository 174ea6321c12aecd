"""Scan filtering ahead of the solve: keyframing, adaptive blur, cumulative masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .scan import Scan, bilinear
from .se2 import Trajectory, relative

# Guards the >= comparisons against round-off in accumulated poses.
_THRESHOLD_SLACK = 1e-9
ZERO_INTENSITY = 1e-6


@dataclass(frozen=True)
class KeyframePolicy:
    min_translation_m: float = 5.0
    min_rotation_rad: float = math.radians(30.0)

    def __post_init__(self):
        if self.min_translation_m <= 0 or self.min_rotation_rad <= 0:
            raise ValueError("keyframe thresholds must be positive")


@dataclass(frozen=True)
class BlurPolicy:
    intensity_threshold: float = 0.5
    occupancy_bound: float = 0.003
    sigma_step_px: float = 1.0
    sigma_max_px: float = 15.0

    def __post_init__(self):
        if not 0.0 < self.occupancy_bound < 1.0:
            raise ValueError("occupancy_bound must lie in (0, 1)")
        if self.sigma_step_px <= 0:
            raise ValueError("sigma_step_px must be positive")
        if self.sigma_max_px < self.sigma_step_px:
            raise ValueError("sigma_max_px must be at least one step")


@dataclass(frozen=True, eq=False)
class CumulativeMask:
    """Per-pixel normalised cumulative ray score plus the derived exclusion grid.

    ``ray_pixels``/``ray_scores`` keep the raw per-ray profiles (rays x steps)
    for inspection; entries past a ray's end are -1 / NaN.
    """

    cumulative: np.ndarray
    excluded: np.ndarray
    zero_ignore_threshold: float = 0.2
    saturation_threshold: float = 0.9
    ray_pixels: Optional[np.ndarray] = field(default=None, repr=False)
    ray_scores: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def empty(cls, shape) -> "CumulativeMask":
        return cls(np.zeros(shape), np.zeros(shape, dtype=bool))


def select_keyframes(traj: Trajectory, policy: KeyframePolicy = KeyframePolicy()) -> list[int]:
    """Greedy motion-based keyframe selection; the first pose is always kept."""
    if len(traj) == 0:
        return []
    kept = [0]
    last = traj[0]
    for n in range(1, len(traj)):
        rel = relative(last, traj[n])
        moved = math.hypot(rel.x, rel.y) >= policy.min_translation_m - _THRESHOLD_SLACK
        turned = abs(rel.theta) >= policy.min_rotation_rad - _THRESHOLD_SLACK
        if moved or turned:
            kept.append(n)
            last = traj[n]
    return kept


def occupancy(pixels: np.ndarray, threshold: float) -> float:
    """Fraction of pixels strictly above ``threshold``."""
    return float(np.count_nonzero(pixels > threshold)) / pixels.size


def gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with a 3-sigma kernel and zero padding."""
    return ndimage.gaussian_filter(pixels, sigma=sigma, mode="constant", cval=0.0, truncate=3.0)


def adaptive_blur(scan: Scan, policy: BlurPolicy = BlurPolicy()) -> tuple[Scan, float]:
    """Blur a feature-sparse scan with growing sigma until enough pixels are bright.

    Each candidate sigma is applied to the original image, not compounded.
    Returns the (possibly unchanged) scan and the sigma used, 0 when untouched.
    """
    if occupancy(scan.pixels, policy.intensity_threshold) >= policy.occupancy_bound:
        return scan, 0.0
    n_steps = int(math.floor(policy.sigma_max_px / policy.sigma_step_px + 1e-9))
    blurred, sigma = scan.pixels, 0.0
    for k in range(1, n_steps + 1):
        sigma = k * policy.sigma_step_px
        blurred = gaussian_blur(scan.pixels, sigma)
        if occupancy(blurred, policy.intensity_threshold) >= policy.occupancy_bound:
            break
    return scan.with_pixels(np.clip(blurred, 0.0, 1.0)), sigma


def _border_pixels(w: int, h: int) -> np.ndarray:
    top = [(u, 0) for u in range(w)]
    bottom = [(u, h - 1) for u in range(w)]
    left = [(0, v) for v in range(1, h - 1)]
    right = [(w - 1, v) for v in range(1, h - 1)]
    return np.array(top + right + bottom[::-1] + left[::-1], dtype=float)


def build_cumulative_mask(
    scan: Scan,
    sensor_center: Optional[np.ndarray] = None,
    zero_ignore_threshold: float = 0.2,
    saturation_threshold: float = 0.9,
) -> CumulativeMask:
    """Cast rays from the sensor pixel and accumulate intensity outward.

    One ray per border pixel, bilinear samples at unit pixel steps.  Each
    ray's running sum is divided by ``0.25 * (number of steps on that ray)``.
    A pixel visited by several rays keeps the largest score; the few pixels no
    ray lands on inherit the largest score among their visited neighbours.
    """
    img = scan.pixels
    h, w = img.shape
    center = scan.center_px if sensor_center is None else np.asarray(sensor_center, dtype=float)

    ends = _border_pixels(w, h)
    deltas = ends - center
    lengths = np.hypot(deltas[:, 0], deltas[:, 1])
    n_steps = np.floor(lengths).astype(int) + 1  # includes the centre sample
    max_steps = int(n_steps.max())
    dirs = deltas / np.maximum(lengths, 1e-12)[:, None]

    k = np.arange(max_steps)
    pts = center[None, None, :] + k[None, :, None] * dirs[:, None, :]
    on_ray = k[None, :] < n_steps[:, None]
    _, vals, _, _ = bilinear(img, pts[..., 0], pts[..., 1])
    vals = np.where(on_ray, vals, 0.0)
    cap = 0.25 * n_steps.astype(float)
    scores = np.cumsum(vals, axis=1) / cap[:, None]

    pix = np.rint(pts).astype(int)
    pix[..., 0] = np.clip(pix[..., 0], 0, w - 1)
    pix[..., 1] = np.clip(pix[..., 1], 0, h - 1)

    cumulative = np.full((h, w), -1.0)
    np.maximum.at(cumulative, (pix[on_ray][:, 1], pix[on_ray][:, 0]), scores[on_ray])
    cumulative = _fill_unvisited(cumulative)

    ray_pixels = np.where(on_ray[..., None], pix, -1)
    ray_scores = np.where(on_ray, scores, np.nan)
    excluded = exclusion_grid(cumulative, img, zero_ignore_threshold, saturation_threshold)
    return CumulativeMask(
        cumulative, excluded, zero_ignore_threshold, saturation_threshold, ray_pixels, ray_scores
    )


def _fill_unvisited(grid: np.ndarray) -> np.ndarray:
    grid = grid.copy()
    while np.any(grid < 0):
        grown = ndimage.maximum_filter(grid, size=3, mode="nearest")
        holes = grid < 0
        grid[holes] = grown[holes]
    return grid


def exclusion_grid(cumulative: np.ndarray, pixels: np.ndarray, low: float, high: float) -> np.ndarray:
    zero = np.abs(pixels) <= ZERO_INTENSITY
    return (zero & (cumulative > low)) | (cumulative > high)


def is_excluded(mask: CumulativeMask, pixel, intensity: float) -> bool:
    """Exclusion rule for one pixel given its measured intensity."""
    u, v = (int(round(c)) for c in pixel)
    return score_excluded(
        float(mask.cumulative[v, u]), intensity, mask.zero_ignore_threshold, mask.saturation_threshold
    )


def score_excluded(score: float, intensity: float, low: float = 0.2, high: float = 0.9) -> bool:
    """The exclusion predicate on a raw score (no grid lookup)."""
    return bool((abs(intensity) <= ZERO_INTENSITY and score > low) or score > high)


def preprocess_scan(
    scan: Scan,
    blur: Optional[BlurPolicy] = BlurPolicy(),
    zero_ignore_threshold: Optional[float] = 0.2,
    saturation_threshold: float = 0.9,
) -> tuple[Scan, Optional[CumulativeMask], float]:
    """Mask from the raw scan, then adaptive blur; either step may be disabled with None.

    Returns ``(scan, mask, sigma)``.
    """
    mask = None
    if zero_ignore_threshold is not None:
        mask = build_cumulative_mask(scan, None, zero_ignore_threshold, saturation_threshold)
    sigma = 0.0
    if blur is not None:
        scan, sigma = adaptive_blur(scan, blur)
    return scan, mask, sigma
