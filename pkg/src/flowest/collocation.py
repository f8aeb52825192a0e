"""Chebyshev-Gauss-Lobatto collocation and pseudo-spectral ROM calibration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import FloaterHormannInterpolator

from .records import CoefficientTrajectory
from .rom import RomCoefficients

#: blending degree of the rational interpolant used to resample onto nodes
RESAMPLE_DEGREE = 8


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CollocationOperator:
    """CGL nodes on ``[t_a, t_b]`` with their barycentric weights and derivative matrix."""

    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray

    @property
    def n_points(self) -> int:
        return self.nodes.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.nodes[0]), float(self.nodes[-1])

    def interpolate(self, values: np.ndarray, t) -> np.ndarray:
        """Evaluate the Lagrange interpolant of node ``values`` (rows) at times ``t``."""
        return barycentric_eval(self.nodes, self.weights, values, t)


def cgl_nodes(t_a: float, t_b: float, n_points: int) -> np.ndarray:
    j = np.arange(n_points)
    # sine form keeps the nodes exactly symmetric about the midpoint
    x = np.sin(np.pi * (2 * j - (n_points - 1)) / (2 * (n_points - 1)))
    t = t_a + 0.5 * (t_b - t_a) * (x + 1.0)
    t[0], t[-1] = t_a, t_b
    return t


def build_collocation(t_a: float, t_b: float, n_points: int) -> CollocationOperator:
    if not t_b > t_a:
        raise ValueError(f"need t_b > t_a, got [{t_a}, {t_b}]")
    if n_points < 2:
        raise ValueError(f"need at least 2 collocation points, got {n_points}")
    t = cgl_nodes(float(t_a), float(t_b), int(n_points))
    w = np.ones(n_points)
    w[1::2] = -1.0
    w[0] *= 0.5
    w[-1] *= 0.5
    dt = t[:, None] - t[None, :]
    np.fill_diagonal(dt, 1.0)
    d = (w[None, :] / w[:, None]) / dt
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -d.sum(axis=1))
    for a in (t, w, d):
        a.setflags(write=False)
    return CollocationOperator(t, w, d)


def barycentric_eval(nodes, weights, values, t) -> np.ndarray:
    """Second-form barycentric interpolation; exact at nodes."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    values = np.asarray(values, dtype=float)
    diff = t[:, None] - nodes[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    c = weights[None, :] / diff
    out = (c @ values.reshape(nodes.size, -1)) / c.sum(axis=1, keepdims=True)
    rows, cols = np.nonzero(exact)
    out[rows] = values.reshape(nodes.size, -1)[cols]
    return out.reshape((t.size,) + values.shape[1:])


def resample(times, values, nodes, degree: int = RESAMPLE_DEGREE) -> np.ndarray:
    """Rational barycentric (Floater-Hormann) resampling of ``values`` rows onto ``nodes``.

    Stable on equispaced samples, unlike global polynomial interpolation.
    Nodes outside the sampled interval are refused.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    nodes = np.asarray(nodes, dtype=float)
    if times.shape == nodes.shape and np.array_equal(times, nodes):
        return values.copy()
    tol = 1e-12 * max(1.0, abs(times[0]), abs(times[-1]))
    if nodes.min() < times[0] - tol or nodes.max() > times[-1] + tol:
        raise ValueError(f"nodes [{nodes.min()}, {nodes.max()}] extend beyond samples "
                         f"[{times[0]}, {times[-1]}]")
    d = min(degree, times.size - 1)
    return FloaterHormannInterpolator(times, values, d=d)(np.clip(nodes, times[0], times[-1]))


def resample_trajectory(traj: CoefficientTrajectory, op: CollocationOperator) -> CoefficientTrajectory:
    return CoefficientTrajectory(op.nodes, resample(traj.times, traj.values, op.nodes))


def _design(a: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(a.shape[0]), a])


def calibrate(b_quad: np.ndarray, reference: CoefficientTrajectory, op: CollocationOperator) -> RomCoefficients:
    """Fit ``A`` and ``C`` with ``B`` fixed by least squares on the nodal residuals.

    For every mode r, minimises over ``(A_r, C_.r)``::

        sum_nodes [ (D a)_r - A_r - C_kr a_k + B_ksr a_k a_s ]^2

    The design matrix ``[1, a_k]`` is shared by all modes, so the N_r
    problems are solved together as one multi-right-hand-side system.
    """
    b_quad = np.asarray(b_quad, dtype=float)
    a = np.asarray(reference.values, dtype=float)
    n = a.shape[1]
    if b_quad.shape != (n, n, n):
        raise ValueError(f"B has shape {b_quad.shape}, reference has {n} modes")
    if reference.times.shape != op.nodes.shape or not np.allclose(reference.times, op.nodes,
                                                                   rtol=0, atol=1e-12 * (1 + np.abs(op.nodes).max())):
        raise ValueError("reference must be sampled at the collocation nodes")
    x = _design(a)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    if s[-1] <= 1e-12 * s[0] * max(x.shape):
        null = vt[-1]
        k = int(np.argmax(np.abs(null[1:]))) + 1 if np.abs(null[1:]).max() > 1e-8 else 0
        what = "the constant term" if k == 0 else f"mode {k}"
        raise CalibrationError(f"rank-deficient calibration system: {what} is linearly dependent "
                               f"on the other regressors (is its reference trajectory constant?)")
    y = op.diff_matrix @ a + np.einsum("ksr,mk,ms->mr", b_quad, a, a)
    theta = vt.T @ ((u.T @ y) / s[:, None])
    return RomCoefficients(theta[0], theta[1:], b_quad)


def nodal_residual(rom: RomCoefficients, reference: CoefficientTrajectory, op: CollocationOperator) -> np.ndarray:
    a = np.asarray(reference.values)
    return op.diff_matrix @ a - rom.rhs(a)


def calibration_report(b_quad, reference: CoefficientTrajectory, op: CollocationOperator,
                       rom: RomCoefficients) -> dict:
    """Per-mode residual norms before (A = C = 0) and after calibration, plus conditioning."""
    n = rom.n_modes
    before = RomCoefficients(np.zeros(n), np.zeros((n, n)), b_quad)
    s = np.linalg.svd(_design(np.asarray(reference.values)), compute_uv=False)
    return {
        "residual_before": np.linalg.norm(nodal_residual(before, reference, op), axis=0),
        "residual_after": np.linalg.norm(nodal_residual(rom, reference, op), axis=0),
        # the normal matrix X^T X is shared by every mode
        "condition": np.full(n, (s[0] / s[-1]) ** 2),
    }
