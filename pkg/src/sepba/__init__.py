"""Direct bundle adjustment and localization for 2D intensity scans."""

from .ba import BAProblem, CovisibilityCache, assemble, reduced_cost, residuals_and_jacobians, solve_ba, solve_joint_oracle
from .localizer import (
    InsufficientOverlapError,
    LocalizationDivergedError,
    LocalizerState,
    localize_frame,
    propagate,
)
from .mapgrid import GridMap, bounds_from_trajectory, build_map, query, read_map, write_map
from .optim import ConvergenceReport, SolverConfig, UnderConstrainedError
from .preprocess import BlurPolicy, CumulativeMask, KeyframePolicy, adaptive_blur, build_cumulative_mask, select_keyframes
from .scan import InvalidSampleError, Scan, WeightModel, read_scan, sample, sample_jacobian_pose, write_scan
from .se2 import Pose2, Trajectory, Twist2, compose, exp, inverse, log, read_trajectory, write_trajectory

__version__ = "0.1.0"
