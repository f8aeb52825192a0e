"""Dynamic estimation (K-LSQ / K-LSE): a nonlinear observer built on the ROM.

Over a window of measurements the node values ``X[m, r] = a_r(t_m)`` on
Chebyshev-Gauss-Lobatto nodes minimise::

    J(X) = sum_m [ c_r * sum_r R_r(X_m)^2 + (X_m - T_m) W (X_m - T_m) ]

where ``R`` is the ROM residual with ``adot = D @ X`` (``D`` couples all
nodes), ``T`` holds static-estimator targets and ``W`` is the identity or
the sensor metric (see :func:`misfit_metric`).  ``J`` is minimised by
Newton's method with an analytic Hessian and an Armijo backtracking line
search.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy import linalg

from .collocation import CollocationOperator, build_collocation, resample
from .estimators import LseModel, lsq_matrix
from .records import CoefficientTrajectory, MeasurementRecord
from .rom import BlowUpError, RomCoefficients, integrate_to
from .sensors import SensorSuite

log = logging.getLogger(__name__)

ARMIJO = 1e-4
ROUNDOFF_DECREASE = 1e-13
DEFAULT_C_R = {"K-LSQ": 10.0, "K-LSE": 0.1}


class Variant(str, Enum):
    K_LSQ = "K-LSQ"
    K_LSE = "K-LSE"


class ObserverError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ObserverProblem:
    rom: RomCoefficients
    op: CollocationOperator
    target: np.ndarray
    c_r: float
    variant: Variant
    metric: np.ndarray | None = None

    def __post_init__(self):
        if not self.c_r > 0:
            raise ObserverError(f"c_r must be positive, got {self.c_r}")
        t = np.asarray(self.target, dtype=float)
        if t.shape != (self.op.n_points, self.rom.n_modes):
            raise ObserverError(f"targets have shape {t.shape}, expected "
                                f"({self.op.n_points}, {self.rom.n_modes})")
        t.setflags(write=False)
        object.__setattr__(self, "target", t)
        w = np.eye(t.shape[1]) if self.metric is None else np.asarray(self.metric, dtype=float)
        if w.shape != (t.shape[1],) * 2 or not np.allclose(w, w.T):
            raise ObserverError(f"misfit metric must be a symmetric {t.shape[1]}x{t.shape[1]} matrix")
        w.setflags(write=False)
        object.__setattr__(self, "metric", w)
        object.__setattr__(self, "variant", Variant(self.variant))

    @property
    def shape(self) -> tuple[int, int]:
        return self.target.shape

    # -- objective pieces ---------------------------------------------------

    def model_residual(self, x: np.ndarray) -> np.ndarray:
        return self.op.diff_matrix @ x - self.rom.rhs(x)

    def objective(self, x: np.ndarray) -> float:
        r = self.model_residual(x)
        e = x - self.target
        return float(self.c_r * np.sum(r * r) + np.sum((e @ self.metric) * e))

    def _jacobian(self, x: np.ndarray) -> np.ndarray:
        nm, nr = self.shape
        rom = self.rom
        bsym = rom.b_quad + rom.b_quad.transpose(1, 0, 2)
        # local[m, r, k] = d R[m, r] / d X[m, k] excluding the derivative term
        local = -rom.c_linear.T[None] + np.einsum("ksr,ms->mrk", bsym, x)
        jac = np.kron(self.op.diff_matrix, np.eye(nr))
        for m in range(nm):
            jac[m * nr:(m + 1) * nr, m * nr:(m + 1) * nr] += local[m]
        return jac

    def gradient(self, x: np.ndarray) -> np.ndarray:
        r = self.model_residual(x)
        jac = self._jacobian(x)
        return (2.0 * self.c_r * jac.T @ r.ravel() + 2.0 * ((x - self.target) @ self.metric).ravel()).reshape(x.shape)

    def hessian(self, x: np.ndarray, gauss_newton: bool = False) -> np.ndarray:
        """Exact Hessian, or its Gauss-Newton part (positive semidefinite) if asked."""
        nm, nr = self.shape
        jac = self._jacobian(x)
        h = jac.T @ jac
        if not gauss_newton:
            r = self.model_residual(x)
            bsym = self.rom.b_quad + self.rom.b_quad.transpose(1, 0, 2)
            second = np.einsum("ksr,mr->mks", bsym, r)
            for m in range(nm):
                h[m * nr:(m + 1) * nr, m * nr:(m + 1) * nr] += second[m]
        h *= 2.0 * self.c_r
        h += 2.0 * np.kron(np.eye(nm), self.metric)
        return h


@dataclass
class NewtonReport:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    objective_history: list[float] = field(default_factory=list)
    converged: bool = False
    shifted: bool = False
    gauss_newton_steps: int = 0


def measurements_at_nodes(record: MeasurementRecord, op: CollocationOperator) -> np.ndarray:
    return resample(record.times, record.values, op.nodes)


def static_targets(variant: Variant, suite: SensorSuite, f_nodes: np.ndarray,
                   static_model: LseModel | None) -> np.ndarray:
    if Variant(variant) is Variant.K_LSQ:
        upsilon, _ = lsq_matrix(suite)
        return (f_nodes - suite.ref_offset) @ upsilon.T
    if static_model is None:
        raise ObserverError("K-LSE needs a fitted LSE model")
    return (f_nodes - static_model.offset) @ static_model.lam


class Misfit(str, Enum):
    COEFFICIENT = "coefficient"
    SENSOR = "sensor"
    AUTO = "auto"


def misfit_metric(suite: SensorSuite, misfit: Misfit | str = "auto") -> np.ndarray | None:
    """Weighting of ``X - T`` in the measurement term.

    ``coefficient`` is the plain sum of squares (identity).  ``sensor`` uses
    ``M^T M`` with ``M`` the mode response, so the term equals the sensor
    residual ``|f - f(ubar) - M a|^2`` up to a constant and leaves the
    unobservable coefficient directions to the model.  ``auto`` picks
    ``sensor`` when ``M`` has fewer than N_r independent columns.
    """
    misfit = Misfit(misfit)
    m = np.asarray(suite.mode_response)
    if misfit is Misfit.AUTO:
        misfit = Misfit.SENSOR if np.linalg.matrix_rank(m) < m.shape[1] else Misfit.COEFFICIENT
    return m.T @ m if misfit is Misfit.SENSOR else None


def assemble_problem(rom: RomCoefficients, suite: SensorSuite, record: MeasurementRecord,
                     variant: Variant | str, static_model: LseModel | None = None,
                     c_r: float | None = None, n_nodes: int | None = None,
                     misfit: Misfit | str = "auto") -> ObserverProblem:
    """Observer problem over the span of ``record``.

    Measurements are resampled onto ``n_nodes`` CGL nodes (default: as many
    nodes as samples); targets come from LSQ (K-LSQ) or the LSE model (K-LSE).
    See :func:`misfit_metric` for ``misfit``.
    """
    variant = Variant(variant)
    n_nodes = len(record) if n_nodes is None else int(n_nodes)
    if n_nodes < 2 or len(record) < 2:
        raise ObserverError("an observer window needs at least 2 nodes and 2 samples")
    if suite.mode_response.shape[1] != rom.n_modes:
        raise ObserverError(f"suite covers {suite.mode_response.shape[1]} modes, ROM has {rom.n_modes}")
    op = build_collocation(*record.span, n_nodes)
    f_nodes = measurements_at_nodes(record, op)
    target = static_targets(variant, suite, f_nodes, static_model)
    c_r = DEFAULT_C_R[variant.value] if c_r is None else float(c_r)
    return ObserverProblem(rom, op, target, c_r, variant, misfit_metric(suite, misfit))


def default_tol(problem: ObserverProblem, x0: np.ndarray) -> float:
    return 1e-10 * (1.0 + abs(problem.objective(x0)))


def solve(problem: ObserverProblem, init="static-targets", tol: float | None = None,
          max_iter: int = 50) -> tuple[CoefficientTrajectory, NewtonReport]:
    """Newton minimisation of the observer functional.

    ``init`` is ``"static-targets"``, ``"zeros"`` or an array of node values.
    Returns the trajectory at the nodes and a report; on non-convergence the
    best iterate is returned with ``converged = False``.
    """
    if isinstance(init, str):
        if init == "static-targets":
            x = problem.target.copy()
        elif init == "zeros":
            x = np.zeros(problem.shape)
        else:
            raise ObserverError(f"unknown init {init!r}")
    else:
        x = np.array(init, dtype=float).reshape(problem.shape)
    tol = default_tol(problem, x) if tol is None else tol
    report = NewtonReport()
    j = problem.objective(x)
    for it in range(max_iter + 1):
        g = problem.gradient(x)
        gnorm = float(np.linalg.norm(g))
        report.residual_history.append(gnorm)
        report.objective_history.append(j)
        if gnorm <= tol:
            report.converged = True
            break
        if it == max_iter:
            break
        step = _newton_step(problem, x, g.ravel(), report).reshape(x.shape)
        slope = float(np.vdot(g, step))
        if -slope <= ROUNDOFF_DECREASE * (1.0 + abs(j)):
            # Newton decrement below what J can resolve: stationary to working precision
            report.converged = True
            break
        alpha = 1.0
        while True:
            x_new = x + alpha * step
            j_new = problem.objective(x_new)
            if j_new <= j + ARMIJO * alpha * slope and j_new < j:
                break
            alpha *= 0.5
            if alpha < 1e-12:
                x_new = None
                break
        if x_new is None:
            # no representable decrease found along a tiny predicted decrease
            report.converged = -slope <= 1e3 * ROUNDOFF_DECREASE * (1.0 + abs(j))
            log.debug("line search stalled at iteration %d, |grad| = %.3g", it, gnorm)
            break
        x, j = x_new, j_new
        report.iterations += 1
    return CoefficientTrajectory(problem.op.nodes, x), report


def _newton_step(problem: ObserverProblem, x: np.ndarray, g: np.ndarray,
                 report: NewtonReport) -> np.ndarray:
    """Newton direction; indefinite Hessians fall back to Gauss-Newton, then to a diagonal shift."""
    h = problem.hessian(x)
    try:
        return -linalg.cho_solve(linalg.cho_factor(h), g)
    except linalg.LinAlgError:
        pass
    report.gauss_newton_steps += 1
    h = problem.hessian(x, gauss_newton=True)
    try:
        return -linalg.cho_solve(linalg.cho_factor(h), g)
    except linalg.LinAlgError:
        pass
    shift = 1e-8 * np.max(np.abs(np.diag(h)))
    eye = np.eye(h.shape[0])
    while True:
        try:
            step = -linalg.cho_solve(linalg.cho_factor(h + shift * eye), g)
        except linalg.LinAlgError:
            shift *= 10.0
            continue
        if not report.shifted:
            warnings.warn(f"observer Hessian singular; diagonal shift {shift:.3g} applied",
                          RuntimeWarning, stacklevel=3)
        report.shifted = True
        return step


# --- sliding-window operation -------------------------------------------------

@dataclass
class SlidingResult:
    estimates: CoefficientTrajectory
    iterations: list[int]
    reports: list[NewtonReport]
    solutions: list[CoefficientTrajectory]


def _shifted_guess(rom: RomCoefficients, previous: CoefficientTrajectory, prev_op: CollocationOperator,
                   problem: ObserverProblem) -> np.ndarray:
    """Previous solution carried onto the new nodes; beyond its end the ROM is integrated."""
    nodes = problem.op.nodes
    end = prev_op.nodes[-1]
    inside = nodes <= end
    guess = problem.target.copy()
    guess[inside] = prev_op.interpolate(previous.values, nodes[inside])
    ahead = nodes[~inside]
    if ahead.size:
        dt = (nodes[-1] - nodes[0]) / (4.0 * nodes.size)
        try:
            traj = integrate_to(rom, previous.values[-1], np.concatenate([[end], ahead]), dt)
            guess[~inside] = traj.values[1:]
        except BlowUpError:
            pass
    return guess


def sliding_window_estimate(rom: RomCoefficients, suite: SensorSuite, stream: MeasurementRecord,
                            window: int, stride: int, variant: Variant | str,
                            c_r: float | None = None, static_model: LseModel | None = None,
                            n_nodes: int | None = None, warm_start: bool = True,
                            tol: float | None = None, max_iter: int = 50,
                            misfit: Misfit | str = "auto") -> SlidingResult:
    """Fixed-size window of ``window`` samples advanced by ``stride``.

    Each window is solved from the previous window's solution (shifted) when
    ``warm_start`` is set, otherwise from its static targets.  The estimate
    at each window's last node is the state at that window's end time.
    """
    if window < 2 or window > len(stream):
        raise ObserverError(f"window must be between 2 and the stream length {len(stream)}, got {window}")
    if stride < 1:
        raise ObserverError(f"stride must be positive, got {stride}")
    times, values, iters, reports, sols = [], [], [], [], []
    previous = prev_op = None
    for start in range(0, len(stream) - window + 1, stride):
        problem = assemble_problem(rom, suite, stream.window(start, start + window), variant,
                                   static_model, c_r, n_nodes, misfit)
        init = "static-targets"
        if warm_start and previous is not None:
            init = _shifted_guess(rom, previous, prev_op, problem)
        sol, report = solve(problem, init, tol, max_iter)
        previous, prev_op = sol, problem.op
        times.append(sol.times[-1])
        values.append(sol.values[-1])
        iters.append(report.iterations)
        reports.append(report)
        sols.append(sol)
    return SlidingResult(CoefficientTrajectory(times, values), iters, reports, sols)


def c_r_sweep(rom: RomCoefficients, suite: SensorSuite, record: MeasurementRecord, variant,
              values: Sequence[float], static_model: LseModel | None = None,
              n_nodes: int | None = None, reference: CoefficientTrajectory | None = None,
              misfit: Misfit | str = "auto") -> list[dict]:
    """Solve one window for each ``c_r``; report model-residual norm, objective and (optionally) error."""
    from .metrics import coefficient_error

    rows = []
    for c in values:
        problem = assemble_problem(rom, suite, record, variant, static_model, c, n_nodes, misfit)
        sol, report = solve(problem)
        e = sol.values - problem.target
        row = {"c_r": float(c),
               "model_residual": float(np.linalg.norm(problem.model_residual(sol.values))),
               "target_misfit": float(np.sqrt(np.sum((e @ problem.metric) * e))),
               "iterations": report.iterations,
               "converged": report.converged}
        if reference is not None:
            row["mean_coefficient_error"] = float(coefficient_error(sol, reference).mean())
        rows.append(row)
    return rows
