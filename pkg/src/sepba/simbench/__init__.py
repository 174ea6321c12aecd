"""Synthetic worlds, scan rendering and evaluation metrics."""

from .metrics import (
    MetricReport,
    aligned_errors,
    ate,
    epe,
    evaluate,
    loc_rpe,
    nearest_associations,
    revisit_pairs,
    self_consistency,
)
from .world import (
    PRESETS,
    FeatureSpec,
    SyntheticWorld,
    circle_trajectory,
    make_world,
    odometry_deltas,
    out_and_back,
    perturb_trajectory,
    render_scan,
    render_sequence,
    stationary_trajectory,
)
