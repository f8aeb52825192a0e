"""Rectilinear grids, vector fields on them, and snapshot ensembles.

Field samples are held as arrays of shape ``(n_components, *dims)`` where
``dims`` follows the axis order of the grid (x, y[, z]).  The discrete L2
inner product uses tensor-product trapezoidal weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridMismatchError(ValueError):
    """Two fields live on different grids."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    """One-dimensional trapezoidal weights for the nodes ``x``."""
    x = np.asarray(x, dtype=float)
    if x.size == 1:
        return np.ones(1)
    h = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class Grid:
    """Structured rectilinear grid in 2 or 3 dimensions."""

    coords: tuple[np.ndarray, ...]
    quad_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        coords = tuple(_frozen(np.asarray(c, dtype=float).ravel()) for c in self.coords)
        if len(coords) not in (2, 3):
            raise ValueError(f"grid needs 2 or 3 axes, got {len(coords)}")
        for ax, c in enumerate(coords):
            if c.size < 2:
                raise ValueError(f"axis {ax} needs at least 2 points, got {c.size}")
            if not np.all(np.diff(c) > 0):
                raise ValueError(f"axis {ax} coordinates are not strictly increasing")
            if not np.all(np.isfinite(c)):
                raise ValueError(f"axis {ax} coordinates are not finite")
        object.__setattr__(self, "coords", coords)
        w = trapezoid_weights(coords[0])
        for c in coords[1:]:
            w = np.multiply.outer(w, trapezoid_weights(c))
        object.__setattr__(self, "quad_weights", _frozen(w))

    @classmethod
    def uniform(cls, dims: Sequence[int], lower: Sequence[float] | None = None,
                upper: Sequence[float] | None = None) -> "Grid":
        lower = [0.0] * len(dims) if lower is None else list(lower)
        upper = [1.0] * len(dims) if upper is None else list(upper)
        return cls(tuple(np.linspace(lo, hi, n) for n, lo, hi in zip(dims, lower, upper)))

    @property
    def ndim(self) -> int:
        return len(self.coords)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c.size for c in self.coords)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.dims))

    @property
    def lower(self) -> np.ndarray:
        return np.array([c[0] for c in self.coords])

    @property
    def upper(self) -> np.ndarray:
        return np.array([c[-1] for c in self.coords])

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return np.meshgrid(*self.coords, indexing="ij")

    def mismatch(self, other: "Grid") -> str | None:
        """Describe the first difference from ``other``, or None if identical."""
        if other is self:
            return None
        if self.ndim != other.ndim:
            return f"axis count {self.ndim} != {other.ndim}"
        for ax, (a, b) in enumerate(zip(self.coords, other.coords)):
            if a.size != b.size:
                return f"axis {ax}: {a.size} points != {b.size} points"
            if not np.array_equal(a, b):
                return f"axis {ax}: coordinate values differ"
        return None

    def same_as(self, other: "Grid") -> bool:
        return self.mismatch(other) is None


def check_same_grid(a: Grid, b: Grid) -> None:
    msg = a.mismatch(b)
    if msg is not None:
        raise GridMismatchError(f"grid mismatch: {msg}")


@dataclass(frozen=True, eq=False)
class VectorField:
    """A vector field with one component per grid axis."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        g = self.grid
        if data.shape == (g.ndim, g.n_points):
            data = data.reshape((g.ndim,) + g.dims)
        if data.shape != (g.ndim,) + g.dims:
            raise ValueError(
                f"field data shape {data.shape} does not match grid "
                f"({g.ndim} components on {g.dims})")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros((grid.ndim,) + grid.dims))

    @classmethod
    def constant(cls, grid: Grid, values: Sequence[float]) -> "VectorField":
        values = np.asarray(values, dtype=float).reshape((grid.ndim,) + (1,) * grid.ndim)
        return cls(grid, np.broadcast_to(values, (grid.ndim,) + grid.dims))

    @property
    def n_components(self) -> int:
        return self.data.shape[0]

    def component(self, c: int) -> np.ndarray:
        return self.data[c]

    def _other(self, other: "VectorField") -> np.ndarray:
        check_same_grid(self.grid, other.grid)
        return other.data

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.data + self._other(other))

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.grid, self.data - self._other(other))

    def __mul__(self, alpha: float) -> "VectorField":
        return VectorField(self.grid, float(alpha) * self.data)

    __rmul__ = __mul__

    def __neg__(self) -> "VectorField":
        return VectorField(self.grid, -self.data)


def inner_product(a: VectorField, b: VectorField) -> float:
    """Discrete L2 inner product ``sum_p w_p sum_c a_c(p) b_c(p)``."""
    check_same_grid(a.grid, b.grid)
    w = a.grid.quad_weights.ravel()
    prod = np.einsum("cp,cp->p", a.data.reshape(a.n_components, -1),
                     b.data.reshape(b.n_components, -1))
    return float(np.dot(w, prod))


def norm(a: VectorField) -> float:
    return float(np.sqrt(inner_product(a, a)))


def stack(fields: Sequence[VectorField]) -> np.ndarray:
    """Stack fields into an array of shape ``(n_fields, n_components, *dims)``."""
    if not fields:
        raise ValueError("no fields to stack")
    g = fields[0].grid
    for f in fields[1:]:
        check_same_grid(g, f.grid)
    return np.stack([f.data for f in fields])


def gram(x: np.ndarray, y: np.ndarray, grid: Grid) -> np.ndarray:
    """Matrix of inner products between two stacks of field arrays."""
    w = grid.quad_weights.ravel()
    xf = x.reshape(x.shape[0], -1)
    yf = y.reshape(y.shape[0], -1)
    n_comp = x.shape[1]
    wf = np.tile(w, n_comp)
    return (xf * wf) @ yf.T


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    """Time-ordered velocity snapshots sharing one grid, plus a reference field.

    When ``reference`` is omitted the arithmetic time mean is used.
    """

    grid: Grid
    times: np.ndarray
    fields: tuple[VectorField, ...]
    reference: VectorField | None = None

    def __post_init__(self):
        times = _frozen(np.asarray(self.times, dtype=float).ravel())
        fields = tuple(self.fields)
        if len(fields) < 2:
            raise ValueError(f"a snapshot set needs at least 2 snapshots, got {len(fields)}")
        if times.size != len(fields):
            raise ValueError(f"{times.size} times for {len(fields)} snapshots")
        if not np.all(np.diff(times) > 0):
            raise ValueError("snapshot times are not strictly increasing")
        for i, f in enumerate(fields):
            msg = self.grid.mismatch(f.grid)
            if msg is not None:
                raise GridMismatchError(f"snapshot {i}: {msg}")
        ref = self.reference
        if ref is None:
            ref = VectorField(self.grid, np.mean(np.stack([f.data for f in fields]), axis=0))
        else:
            msg = self.grid.mismatch(ref.grid)
            if msg is not None:
                raise GridMismatchError(f"reference field: {msg}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "fields", fields)
        object.__setattr__(self, "reference", ref)

    def __len__(self) -> int:
        return len(self.fields)

    def array(self) -> np.ndarray:
        return stack(self.fields)

    def fluctuations(self) -> np.ndarray:
        return self.array() - self.reference.data[None]

    def select(self, t_start: float, t_end: float, keep_reference: bool = False) -> "SnapshotSet":
        """Snapshots with ``t_start <= t <= t_end``; the mean is recomputed unless asked."""
        idx = np.flatnonzero((self.times >= t_start) & (self.times <= t_end))
        return SnapshotSet(self.grid, self.times[idx], tuple(self.fields[i] for i in idx),
                           self.reference if keep_reference else None)
