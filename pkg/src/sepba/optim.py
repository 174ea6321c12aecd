"""Damped Gauss-Newton driver and normal-equation solves shared by all solvers."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Generic, Optional, TypeVar

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

State = TypeVar("State")

# Marquardt damping used once a step increases the cost while damping is zero.
FALLBACK_DAMPING = 1e-3
MAX_DAMPING_RETRIES = 5
# Length of the final probe along the most damped direction, as a fraction of
# stall_tolerance.
PROBE_FRACTION = 1e-2
# Relative pivot size below which a state is reported as unconstrained.
PIVOT_RTOL = 1e-12


class UnderConstrainedError(RuntimeError):
    """The normal matrix is singular even after damping."""

    def __init__(self, states: list[int], message: str = ""):
        self.states = sorted(set(int(s) for s in states))
        msg = message or f"normal equations are rank deficient; under-constrained states: {self.states}"
        super().__init__(msg)


@dataclass
class SolverConfig:
    max_iterations: int = 50
    update_tolerance: float = 1e-6
    cost_rel_tolerance: float = 1e-9
    damping: float = 0.0
    jacobian_mode: str = "exact_varpro"
    # When every damped retry fails, a most-damped step shorter than this means
    # the iterate sits on a kink of the piecewise-smooth cost, not that the
    # solve went wrong.
    stall_tolerance: float = 1e-3

    def __post_init__(self):
        if self.update_tolerance <= 0 or self.cost_rel_tolerance <= 0 or self.stall_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.jacobian_mode not in ("exact_varpro", "mean_fixed"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")


@dataclass
class ConvergenceReport:
    iterations: int = 0
    costs: list[float] = field(default_factory=list)
    update_norms: list[float] = field(default_factory=list)
    h_nnz: int = 0
    wall_time_s: float = 0.0
    converged: bool = False
    reason: str = ""
    jacobian_mode: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class Linearized:
    """Normal equations at a point; ``H`` dense or scipy sparse."""

    H: object
    b: np.ndarray
    cost: float


def _diag(H) -> np.ndarray:
    return H.diagonal() if sp.issparse(H) else np.diag(H)


def _unconstrained_from_diag(H, block: int) -> list[int]:
    d = _diag(H)
    scale = max(1.0, float(np.max(np.abs(d)))) if d.size else 1.0
    bad = np.flatnonzero(d <= PIVOT_RTOL * scale)
    return sorted(set((bad // block).tolist()))


def solve_normal_equations(H, b: np.ndarray, damping: float = 0.0, block: int = 3) -> np.ndarray:
    """Solve ``(H + damping * diag(H)) dx = b``.

    Sparse matrices use SuperLU in symmetric mode with a minimum-degree
    ordering on ``H + H^T``; dense ones use Cholesky.  A factorization
    failure is retried once with light damping; what remains singular is
    reported per ``block``-sized state.
    """
    b = np.asarray(b, dtype=float)
    if b.size == 0:
        return b.copy()
    bad = _unconstrained_from_diag(H, block)
    if bad:
        raise UnderConstrainedError(bad)
    for lam in (damping, max(damping, 1e-6)):
        try:
            return _factor_solve(H, b, lam, block)
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            err = exc
            continue
    states = getattr(err, "states", None)
    if states is not None:
        raise UnderConstrainedError(states)
    raise UnderConstrainedError([], f"normal equations could not be factored: {err}")


class _PivotError(RuntimeError):
    def __init__(self, states):
        super().__init__("non-positive pivot")
        self.states = states


def _factor_solve(H, b, lam, block):
    if sp.issparse(H):
        A = sp.csc_matrix(H, dtype=float)
        if lam > 0:
            A = A + sp.diags(lam * A.diagonal(), format="csc")
        lu = splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        piv = lu.U.diagonal()
        scale = max(1.0, float(np.max(np.abs(A.diagonal()))))
        tiny = np.flatnonzero(piv <= PIVOT_RTOL * scale)
        if tiny.size:
            cols = np.argsort(lu.perm_c)[tiny]
            raise _PivotError(sorted(set((cols // block).tolist())))
        x = lu.solve(b)
    else:
        A = np.array(H, dtype=float)
        if lam > 0:
            A[np.diag_indices_from(A)] *= 1.0 + lam
        L = np.linalg.cholesky(A)
        x = np.linalg.solve(L.T, np.linalg.solve(L, b))
    if not np.all(np.isfinite(x)):
        raise np.linalg.LinAlgError("non-finite solution")
    return x


@dataclass
class Problem(Generic[State]):
    """Callbacks the driver needs."""

    linearize: Callable[[State], Linearized]
    cost: Callable[[State], float]
    retract: Callable[[State, np.ndarray], State]
    block: int = 3


class DivergedError(RuntimeError):
    def __init__(self, state, report: ConvergenceReport):
        super().__init__("cost failed to decrease after damped retries")
        self.state = state
        self.report = report


def gauss_newton(problem: Problem, x0, config: SolverConfig, raise_on_divergence: bool = False):
    """Damped Gauss-Newton with Levenberg-Marquardt fallback.

    Returns ``(state, report)``.  Accepted steps never increase the cost.
    """
    t0 = time.perf_counter()
    report = ConvergenceReport()
    x = x0
    lin = problem.linearize(x)
    cost = lin.cost
    report.costs.append(cost)
    report.h_nnz = _nnz(lin.H)
    lam = config.damping

    for _ in range(config.max_iterations):
        report.iterations += 1
        accepted = False
        trial_lam = lam
        step_norm = np.inf
        new_cost = np.inf
        for _attempt in range(MAX_DAMPING_RETRIES + 1):
            dx = solve_normal_equations(lin.H, lin.b, trial_lam, problem.block)
            step_norm = float(np.linalg.norm(dx))
            x_new = problem.retract(x, dx)
            new_cost = problem.cost(x_new)
            if new_cost <= cost:
                accepted = True
                break
            if step_norm < config.update_tolerance:
                break
            trial_lam = FALLBACK_DAMPING if trial_lam == 0 else trial_lam * 10.0
        report.update_norms.append(step_norm)

        if accepted:
            x = x_new
            rel = (cost - new_cost) / max(cost, np.finfo(float).tiny)
            cost = new_cost
            report.costs.append(cost)
            # relax damping back toward the configured value
            lam = config.damping if trial_lam <= max(config.damping, FALLBACK_DAMPING) else trial_lam / 10.0
            if step_norm < config.update_tolerance:
                report.converged, report.reason = True, "update_norm"
                break
            if rel < config.cost_rel_tolerance:
                report.converged, report.reason = True, "cost_rel"
                break
            lin = problem.linearize(x)
            report.h_nnz = max(report.h_nnz, _nnz(lin.H))
            continue

        if step_norm < config.update_tolerance:
            report.converged, report.reason = True, "update_norm"
            break
        if (new_cost - cost) <= config.cost_rel_tolerance * max(cost, np.finfo(float).tiny):
            report.converged, report.reason = True, "cost_rel"
            break
        # the most damped trial is the shortest; a kink within that radius is a stall
        if step_norm < config.stall_tolerance:
            report.converged, report.reason = True, "stalled"
            break
        # a rough cost can defeat every damped step while the model still points
        # downhill; a very short probe tells that apart from a wrong model
        probe = dx * (PROBE_FRACTION * config.stall_tolerance / step_norm)
        if problem.cost(problem.retract(x, probe)) < cost:
            report.converged, report.reason = True, "stalled"
            break
        report.converged, report.reason = False, "diverged"
        report.wall_time_s = time.perf_counter() - t0
        if raise_on_divergence:
            raise DivergedError(x, report)
        return x, report
    else:
        report.reason = "max_iterations"

    report.wall_time_s = time.perf_counter() - t0
    return x, report


def _nnz(H) -> int:
    if sp.issparse(H):
        Hc = sp.csr_matrix(H)
        Hc.eliminate_zeros()
        return int(Hc.nnz)
    return int(np.count_nonzero(H))
