"""SE(2) rigid transforms, exponential/log maps and trajectories.

Poses map points from the sensor frame to the world frame::

    p_world = R(theta) @ p_sensor + (x, y)

Perturbations are applied on the right (body frame): ``T <- T * exp(xi)``.
Twists are ordered ``(dtheta, dx, dy)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

SMALL_ANGLE = 1e-9


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    wrapped = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


@dataclass(frozen=True)
class Pose2:
    theta: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Pose2":
        return cls(arr[0], arr[1], arr[2])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.x, self.y])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        m = np.eye(3)
        m[:2, :2] = self.rotation
        m[:2, 2] = (self.x, self.y)
        return m

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


@dataclass(frozen=True)
class Twist2:
    dtheta: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Twist2":
        return cls(float(arr[0]), float(arr[1]), float(arr[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.dtheta, self.dx, self.dy])

    def hat(self) -> np.ndarray:
        """3x3 Lie algebra matrix."""
        return np.array(
            [
                [0.0, -self.dtheta, self.dx],
                [self.dtheta, 0.0, self.dy],
                [0.0, 0.0, 0.0],
            ]
        )


IDENTITY = Pose2()


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Return ``a * b`` (apply ``b`` first, then ``a``)."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.theta + b.theta,
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
    )


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-p.theta, -(c * p.x + s * p.y), -(-s * p.x + c * p.y))


def _v_matrix(theta: float) -> np.ndarray:
    if abs(theta) < SMALL_ANGLE:
        return np.eye(2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta
    return np.array([[a, -b], [b, a]])


def exp(xi: Twist2 | Sequence[float]) -> Pose2:
    """Exponential map se(2) -> SE(2)."""
    if not isinstance(xi, Twist2):
        xi = Twist2.from_array(xi)
    t = _v_matrix(xi.dtheta) @ np.array([xi.dx, xi.dy])
    return Pose2(xi.dtheta, t[0], t[1])


def log(p: Pose2) -> Twist2:
    """Logarithm map SE(2) -> se(2); rotation part lies in (-pi, pi]."""
    rho = np.linalg.solve(_v_matrix(p.theta), np.array([p.x, p.y]))
    return Twist2(p.theta, float(rho[0]), float(rho[1]))


def apply_perturbation(p: Pose2, xi: Twist2 | Sequence[float]) -> Pose2:
    """Body-frame update ``p * exp(xi)``."""
    return compose(p, exp(xi))


def transform_point(p: Pose2, pt) -> np.ndarray:
    """Map a point (or an (K, 2) array of points) through ``p``."""
    pts = np.asarray(pt, dtype=float)
    c, s = math.cos(p.theta), math.sin(p.theta)
    x, y = pts[..., 0], pts[..., 1]
    return np.stack([c * x - s * y + p.x, s * x + c * y + p.y], axis=-1)


def inverse_transform_point(p: Pose2, pt) -> np.ndarray:
    """Equivalent to ``transform_point(inverse(p), pt)`` without building the inverse."""
    pts = np.asarray(pt, dtype=float)
    c, s = math.cos(p.theta), math.sin(p.theta)
    dx, dy = pts[..., 0] - p.x, pts[..., 1] - p.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def local_point_jacobian(q: np.ndarray) -> np.ndarray:
    """Jacobian of ``(T exp(xi))^-1 m`` w.r.t. xi at xi = 0.

    ``q`` is the point already expressed in the sensor frame, ``T^-1 m``.
    Returns an array of shape (..., 2, 3).
    """
    q = np.asarray(q, dtype=float)
    jac = np.zeros(q.shape[:-1] + (2, 3))
    jac[..., 0, 0] = q[..., 1]
    jac[..., 1, 0] = -q[..., 0]
    jac[..., 0, 1] = -1.0
    jac[..., 1, 2] = -1.0
    return jac


def relative(a: Pose2, b: Pose2) -> Pose2:
    """``a^-1 * b``."""
    return compose(inverse(a), b)


@dataclass
class Trajectory:
    """Time-ordered sequence of sensor-to-world poses."""

    poses: list[Pose2] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.poses = list(self.poses)
        if not self.timestamps:
            self.timestamps = [float(i) for i in range(len(self.poses))]
        self.timestamps = [float(t) for t in self.timestamps]
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses must have the same length")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[Pose2]:
        return iter(self.poses)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Trajectory(self.poses[idx], self.timestamps[idx])
        return self.poses[idx]

    def subset(self, indices: Iterable[int]) -> "Trajectory":
        indices = list(indices)
        return Trajectory([self.poses[i] for i in indices], [self.timestamps[i] for i in indices])

    def as_array(self) -> np.ndarray:
        """(N, 3) array of ``theta, x, y``."""
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.as_array() for p in self.poses])

    def positions(self) -> np.ndarray:
        return self.as_array()[:, 1:3]

    @classmethod
    def from_array(cls, arr: np.ndarray, timestamps: Sequence[float] | None = None) -> "Trajectory":
        poses = [Pose2.from_array(row) for row in np.asarray(arr, dtype=float)]
        return cls(poses, list(timestamps) if timestamps is not None else [])

    def transformed(self, a: Pose2) -> "Trajectory":
        """Left-multiply every pose by ``a`` (change of world frame)."""
        return Trajectory([compose(a, p) for p in self.poses], self.timestamps)


TRAJECTORY_HEADER = ["timestamp_s", "x_m", "y_m", "theta_rad"]


def format_trajectory(traj: Trajectory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRAJECTORY_HEADER)
    for t, p in zip(traj.timestamps, traj.poses):
        writer.writerow([repr(float(t)), repr(float(p.x)), repr(float(p.y)), repr(float(p.theta))])
    return buf.getvalue()


def write_trajectory(path: str | Path, traj: Trajectory) -> None:
    Path(path).write_text(format_trajectory(traj))


def read_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise ValueError(f"{path}: expected header {','.join(TRAJECTORY_HEADER)}")
        stamps, poses = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            t, x, y, th = (float(v) for v in row)
            stamps.append(t)
            poses.append(Pose2(th, x, y))
    return Trajectory(poses, stamps)
