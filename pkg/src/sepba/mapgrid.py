"""Regular 2D intensity map and the closed-form weighted-mean map builder."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scan import Scan, WeightModel, sample_points
from .se2 import Pose2, Trajectory, transform_point


@dataclass(eq=False)
class GridMap:
    """Cell ``(row, col)`` is centred at ``origin_m + resolution_m * (col, row)``.

    Columns run along world x, rows along world y.  A cell with ``count == 0``
    is unobserved; its intensity carries no meaning.
    """

    origin_m: np.ndarray
    resolution_m: float
    cols: int
    rows: int
    intensity: np.ndarray = field(default=None, repr=False)
    weight_sum: np.ndarray = field(default=None, repr=False)
    count: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.origin_m = np.asarray(self.origin_m, dtype=float).reshape(2)
        self.resolution_m = float(self.resolution_m)
        if self.resolution_m <= 0 or self.cols <= 0 or self.rows <= 0:
            raise ValueError("grid needs positive resolution and dimensions")
        shape = (self.rows, self.cols)
        if self.intensity is None:
            self.intensity = np.zeros(shape)
        if self.weight_sum is None:
            self.weight_sum = np.zeros(shape)
        if self.count is None:
            self.count = np.zeros(shape, dtype=np.int64)
        for name in ("intensity", "weight_sum", "count"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def observed(self) -> np.ndarray:
        return self.count > 0

    def empty_like(self) -> "GridMap":
        return GridMap(self.origin_m.copy(), self.resolution_m, self.cols, self.rows)

    def cell_center(self, row, col) -> np.ndarray:
        row = np.asarray(row, dtype=float)
        col = np.asarray(col, dtype=float)
        return np.stack(
            [self.origin_m[0] + col * self.resolution_m, self.origin_m[1] + row * self.resolution_m],
            axis=-1,
        )

    def flat_centers(self, flat: np.ndarray) -> np.ndarray:
        row, col = np.divmod(np.asarray(flat), self.cols)
        return self.cell_center(row, col)

    def nearest_cell(self, m) -> Optional[tuple[int, int]]:
        m = np.asarray(m, dtype=float)
        col = int(math.floor((m[0] - self.origin_m[0]) / self.resolution_m + 0.5))
        row = int(math.floor((m[1] - self.origin_m[1]) / self.resolution_m + 0.5))
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row, col
        return None

    def cells_in_box(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Flat indices of cells whose centres fall inside the box [lo, hi]."""
        c0 = max(0, math.ceil((lo[0] - self.origin_m[0]) / self.resolution_m))
        c1 = min(self.cols - 1, math.floor((hi[0] - self.origin_m[0]) / self.resolution_m))
        r0 = max(0, math.ceil((lo[1] - self.origin_m[1]) / self.resolution_m))
        r1 = min(self.rows - 1, math.floor((hi[1] - self.origin_m[1]) / self.resolution_m))
        if c1 < c0 or r1 < r0:
            return np.zeros(0, dtype=np.intp)
        rr, cc = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
        return (rr * self.cols + cc).ravel()


def footprint_cells(grid: GridMap, scan: Scan, pose: Pose2, margin_m: float = 0.0) -> np.ndarray:
    """Cells inside the world-space bounding box of ``scan`` at ``pose``."""
    corners = transform_point(pose, scan.footprint_corners())
    lo = corners.min(axis=0) - margin_m
    hi = corners.max(axis=0) + margin_m
    return grid.cells_in_box(lo, hi)


def bounds_from_trajectory(traj: Trajectory, scan_extent_m: float, r_v: float = 1.0) -> GridMap:
    """Empty grid covering every pose inflated by ``scan_extent_m``."""
    if len(traj) == 0:
        raise ValueError("cannot size a map from an empty trajectory")
    xy = traj.positions()
    lo = xy.min(axis=0) - scan_extent_m
    hi = xy.max(axis=0) + scan_extent_m
    cols = int(math.ceil((hi[0] - lo[0]) / r_v - 1e-9)) + 1
    rows = int(math.ceil((hi[1] - lo[1]) / r_v - 1e-9)) + 1
    return GridMap(lo, r_v, cols, rows)


class MapAccumulator:
    """Per-cell ``(sum w*i, sum w, count)``; ``merge`` is associative and commutative."""

    def __init__(self, n_cells: int):
        self.wi = np.zeros(n_cells)
        self.w = np.zeros(n_cells)
        self.n = np.zeros(n_cells, dtype=np.int64)

    def add(self, cells: np.ndarray, weights: np.ndarray, intensities: np.ndarray) -> None:
        size = len(self.w)
        self.wi += np.bincount(cells, weights * intensities, minlength=size)
        self.w += np.bincount(cells, weights, minlength=size)
        self.n += np.bincount(cells, minlength=size)

    def merge(self, other: "MapAccumulator") -> "MapAccumulator":
        out = MapAccumulator(len(self.w))
        out.wi = self.wi + other.wi
        out.w = self.w + other.w
        out.n = self.n + other.n
        return out

    def means(self) -> np.ndarray:
        out = np.zeros_like(self.w)
        np.divide(self.wi, self.w, out=out, where=self.n > 0)
        return out


def _scan_contribution(grid, scan, pose, wm, mask) -> MapAccumulator:
    acc = MapAccumulator(grid.n_cells)
    cells = footprint_cells(grid, scan, pose)
    if len(cells):
        b = sample_points(grid.flat_centers(cells), pose, scan, wm, mask)
        acc.add(cells[b.valid], b.weight[b.valid], b.intensity[b.valid])
    return acc


def build_map(
    scans: Sequence[Scan],
    poses: Trajectory | Sequence[Pose2],
    wm: WeightModel,
    masks: Optional[Sequence[Optional[object]]],
    grid: GridMap,
    threads: int = 1,
) -> GridMap:
    """Each observed cell gets the weighted mean of the scan samples landing on it."""
    poses = list(poses)
    if len(scans) != len(poses):
        raise ValueError(f"{len(scans)} scans but {len(poses)} poses")
    masks = list(masks) if masks is not None else [None] * len(scans)
    if len(masks) != len(scans):
        raise ValueError("masks must be index-aligned with scans")
    jobs = list(zip(scans, poses, masks))

    def work(job):
        scan, pose, mask = job
        return _scan_contribution(grid, scan, pose, wm, mask)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(j) for j in jobs]

    total = MapAccumulator(grid.n_cells)
    for part in parts:
        total = total.merge(part)
    out = grid.empty_like()
    out.intensity = total.means().reshape(grid.shape)
    out.weight_sum = total.w.reshape(grid.shape)
    out.count = total.n.reshape(grid.shape)
    return out


def query(grid: GridMap, m) -> Optional[tuple[float, float]]:
    """Nearest-cell ``(intensity, weight_sum)``; None when outside or unobserved."""
    cell = grid.nearest_cell(m)
    if cell is None or grid.count[cell] == 0:
        return None
    return float(grid.intensity[cell]), float(grid.weight_sum[cell])


# --- file formats --------------------------------------------------------


def map_header(grid: GridMap) -> dict:
    return {
        "origin_m": [float(grid.origin_m[0]), float(grid.origin_m[1])],
        "resolution_m": grid.resolution_m,
        "cols": int(grid.cols),
        "rows": int(grid.rows),
    }


def write_map(stem: str | Path, grid: GridMap) -> tuple[Path, Path]:
    stem = Path(stem)
    header_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    header_path.write_text(json.dumps(map_header(grid), indent=2, sort_keys=True) + "\n")
    payload = (
        grid.intensity.astype("<f4").tobytes()
        + grid.weight_sum.astype("<f4").tobytes()
        + grid.count.astype("<u4").tobytes()
    )
    bin_path.write_bytes(payload)
    return header_path, bin_path


def read_map(stem: str | Path) -> GridMap:
    stem = Path(stem)
    header_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    for p in (header_path, bin_path):
        if not p.exists():
            raise FileNotFoundError(f"map file not found: {p}")
    hdr = json.loads(header_path.read_text())
    rows, cols = int(hdr["rows"]), int(hdr["cols"])
    n = rows * cols
    raw = bin_path.read_bytes()
    if len(raw) != 12 * n:
        raise ValueError(f"{bin_path}: expected {12 * n} bytes, found {len(raw)}")
    intensity = np.frombuffer(raw, "<f4", n, 0).reshape(rows, cols).astype(float)
    weight = np.frombuffer(raw, "<f4", n, 4 * n).reshape(rows, cols).astype(float)
    count = np.frombuffer(raw, "<u4", n, 8 * n).reshape(rows, cols).astype(np.int64)
    return GridMap(hdr["origin_m"], hdr["resolution_m"], cols, rows, intensity, weight, count)


def _write_pgm(path: Path, image: np.ndarray, maxval: int) -> None:
    h, w = image.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + image.astype(dtype).tobytes())


def export_pgm(stem: str | Path, grid: GridMap) -> tuple[Path, Path]:
    """16-bit grayscale image plus an 8-bit observed-cell mask, north up."""
    stem = Path(stem)
    img_path = stem.with_name(stem.name + "_intensity.pgm")
    mask_path = stem.with_name(stem.name + "_mask.pgm")
    observed = grid.observed
    img = np.where(observed, np.rint(np.clip(grid.intensity, 0, 1) * 65535), 0)
    _write_pgm(img_path, img[::-1], 65535)
    _write_pgm(mask_path, observed[::-1].astype(np.uint8) * 255, 255)
    return img_path, mask_path
