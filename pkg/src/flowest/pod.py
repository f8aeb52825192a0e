"""Snapshot-method proper orthogonal decomposition."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .fields import Grid, SnapshotSet, VectorField, check_same_grid, gram
from .records import read_table, write_table
from .snapshot_io import load_snapshots, save_snapshots

RANK_TOL = 1e-12


class RankError(ValueError):
    """More modes requested than the snapshots support."""


@dataclass(frozen=True, eq=False)
class PodBasis:
    """Orthonormal modes with their eigenvalues and snapshot weights.

    ``snapshot_coeffs[i, k]`` is the weight of fluctuation ``U_i - ubar`` in
    mode ``k``.  Eigenvalues are those of the (unscaled) correlation matrix.
    """

    modes: tuple[VectorField, ...]
    eigenvalues: np.ndarray
    snapshot_coeffs: np.ndarray
    reference: VectorField

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ValueError("a basis needs at least one mode")
        for m in modes:
            check_same_grid(self.reference.grid, m.grid)
        ev = np.array(self.eigenvalues, dtype=float)
        if ev.shape != (len(modes),):
            raise ValueError(f"{ev.size} eigenvalues for {len(modes)} modes")
        if np.any(ev < 0) or np.any(np.diff(ev) > 0):
            raise ValueError("eigenvalues must be non-negative and non-increasing")
        ev.setflags(write=False)
        b = np.array(self.snapshot_coeffs, dtype=float).reshape(-1, len(modes))
        b.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "snapshot_coeffs", b)

    @property
    def grid(self) -> Grid:
        return self.reference.grid

    @property
    def n_retained(self) -> int:
        return len(self.modes)

    def mode_array(self) -> np.ndarray:
        return np.stack([m.data for m in self.modes])

    def truncate(self, n: int) -> "PodBasis":
        return PodBasis(self.modes[:n], self.eigenvalues[:n], self.snapshot_coeffs[:, :n],
                        self.reference)


def correlation_matrix(snaps: SnapshotSet) -> np.ndarray:
    """Time correlation ``K[j, l] = (U_j - ubar, U_l - ubar)``."""
    x = snaps.fluctuations()
    k = gram(x, x, snaps.grid)
    return 0.5 * (k + k.T)


def compute_pod(snaps: SnapshotSet, n_retained: int) -> PodBasis:
    """POD of the snapshot fluctuations about ``snaps.reference``.

    Modes are ``sum_i b_ik (U_i - ubar)`` normalised to unit norm, with the
    largest-magnitude eigenvector entry made positive.  Raises
    :class:`RankError` if a requested eigenvalue falls below
    ``1e-12 * lambda_1``.
    """
    n = len(snaps)
    if not 1 <= n_retained <= n:
        raise RankError(f"n_retained must be in [1, {n}], got {n_retained}")
    k = correlation_matrix(snaps)
    lam, vec = linalg.eigh(k)
    order = np.argsort(lam)[::-1]
    lam, vec = lam[order], vec[:, order]
    lam_max = max(lam[0], 0.0)
    rank = int(np.sum(lam > RANK_TOL * lam_max)) if lam_max > 0 else 0
    if n_retained > rank:
        raise RankError(f"requested {n_retained} modes but the correlation matrix has "
                        f"numerical rank {rank} (eigenvalues below {RANK_TOL:g} * lambda_1 "
                        f"are treated as null)")
    lam, vec = lam[:n_retained], vec[:, :n_retained]
    for j in range(n_retained):
        if vec[np.argmax(np.abs(vec[:, j])), j] < 0:
            vec[:, j] = -vec[:, j]
    b = vec / np.sqrt(lam)
    x = snaps.fluctuations()
    modes = np.tensordot(b.T, x, axes=1)
    # one Cholesky re-orthonormalisation pass cleans up round-off in weak modes
    g = gram(modes, modes, snaps.grid)
    if np.max(np.abs(g - np.eye(n_retained))) > 1e-13:
        lc = np.linalg.cholesky(0.5 * (g + g.T))
        t = linalg.solve_triangular(lc, np.eye(n_retained), lower=True)
        modes = np.tensordot(t, modes, axes=1)
        b = b @ t.T
    grid = snaps.grid
    return PodBasis(tuple(VectorField(grid, m) for m in modes), lam, b, snaps.reference)


def project(basis: PodBasis, field: VectorField) -> np.ndarray:
    """Coefficients ``a_r = (field - ubar, Phi_r)``."""
    check_same_grid(basis.grid, field.grid)
    fl = (field.data - basis.reference.data)[None]
    return gram(fl, basis.mode_array(), basis.grid)[0]


def project_many(basis: PodBasis, fields: Sequence[VectorField] | np.ndarray) -> np.ndarray:
    """Projection of a stack of fields; returns shape ``(n_fields, n_retained)``."""
    if isinstance(fields, np.ndarray):
        arr = fields
    else:
        for f in fields:
            check_same_grid(basis.grid, f.grid)
        arr = np.stack([f.data for f in fields])
    return gram(arr - basis.reference.data[None], basis.mode_array(), basis.grid)


def reconstruct(basis: PodBasis, coeffs: Sequence[float]) -> VectorField:
    """``ubar + sum_i a_i Phi_i``."""
    a = np.asarray(coeffs, dtype=float).ravel()
    if a.size != basis.n_retained:
        raise ValueError(f"expected {basis.n_retained} coefficients, got {a.size}")
    return VectorField(basis.grid, basis.reference.data + np.tensordot(a, basis.mode_array(), axes=1))


def reconstruct_many(basis: PodBasis, coeffs: np.ndarray) -> np.ndarray:
    """Field arrays for each row of ``coeffs``: shape ``(n, n_components, *dims)``."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    if coeffs.shape[1] != basis.n_retained:
        raise ValueError(f"expected {basis.n_retained} coefficients per row, got {coeffs.shape[1]}")
    return basis.reference.data[None] + np.tensordot(coeffs, basis.mode_array(), axes=1)


def save_basis(basis: PodBasis, path, fmt=None, comments: Sequence[str] = ()) -> None:
    """Modes as a snapshot file (mode index as time) plus a ``.eig`` sidecar table.

    The sidecar holds the eigenvalues in its first row block and ``b_ik`` below.
    """
    n = basis.n_retained
    if n < 2:
        # snapshot files need two records; duplicate with a marker time
        fields = basis.modes + (basis.modes[0],)
        times = np.arange(1.0, n + 2.0)
    else:
        fields, times = basis.modes, np.arange(1.0, n + 1.0)
    save_snapshots(SnapshotSet(basis.grid, times, fields, basis.reference), path, fmt, comments)
    rows = np.vstack([basis.eigenvalues[None], basis.snapshot_coeffs])
    write_table(os.fspath(path) + ".eig", np.arange(rows.shape[0], dtype=float), rows,
                [f"mode{k + 1}" for k in range(n)],
                [*comments, f"n_retained {n}", "row 0: eigenvalues; rows 1..N: snapshot weights b_ik"])


def load_basis(path, fmt=None) -> PodBasis:
    snaps = load_snapshots(path, fmt)
    _, rows, _ = read_table(os.fspath(path) + ".eig")
    n = rows.shape[1]
    return PodBasis(snaps.fields[:n], rows[0], rows[1:], snaps.reference)
