"""Linear measurement functionals on velocity fields.

Every sensor is compiled into a dense weight array ``L`` over the field
samples, so a measurement is ``sum(L * u.data)``.  That keeps all sensor
kinds exactly linear and makes the mode response a single contraction.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .fields import Grid, SnapshotSet, VectorField, check_same_grid
from .pod import PodBasis
from .records import MeasurementRecord


class SensorKind(str, Enum):
    POINT_VELOCITY = "point-velocity"
    WALL_SHEAR = "wall-shear"
    BOX_AVERAGE = "box-average"


class SensorError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSpec:
    """One sensor.

    ``location`` is a physical point; for a box average it is the lower
    corner and ``extent`` the upper corner.  Wall-shear sensors name the
    wall-normal axis and side (``"low"`` or ``"high"``) and read
    ``d u_component / d x_wall_axis`` at the wall node nearest ``location``.
    """

    kind: SensorKind
    location: tuple[float, ...]
    component: int = 0
    weight: float = 1.0
    wall_axis: int | None = None
    wall_side: str | None = None
    extent: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SensorKind(self.kind))
        object.__setattr__(self, "location", tuple(float(x) for x in self.location))
        if self.extent is not None:
            object.__setattr__(self, "extent", tuple(float(x) for x in self.extent))

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSpec":
        known = {"kind", "location", "component", "weight", "wall_axis", "wall_side", "extent"}
        extra = set(d) - known
        if extra:
            raise SensorError(f"unknown sensor keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "location": list(self.location),
               "component": self.component, "weight": self.weight}
        if self.wall_axis is not None:
            out.update(wall_axis=self.wall_axis, wall_side=self.wall_side)
        if self.extent is not None:
            out["extent"] = list(self.extent)
        return out


def _check_inside(grid: Grid, point, what: str) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    if p.size != grid.ndim:
        raise SensorError(f"{what} has {p.size} coordinates, grid has {grid.ndim} axes")
    tol = 1e-9 * (grid.upper - grid.lower)
    if np.any(p < grid.lower - tol) or np.any(p > grid.upper + tol):
        raise SensorError(f"{what} {tuple(p)} outside grid box "
                          f"{tuple(grid.lower)}-{tuple(grid.upper)}")
    return np.clip(p, grid.lower, grid.upper)


def _point_weights(grid: Grid, p: np.ndarray) -> np.ndarray:
    w = np.ones(())
    for ax, c in enumerate(grid.coords):
        i = int(np.clip(np.searchsorted(c, p[ax], side="right") - 1, 0, c.size - 2))
        theta = (p[ax] - c[i]) / (c[i + 1] - c[i])
        line = np.zeros(c.size)
        line[i] = 1.0 - theta
        line[i + 1] += theta
        w = np.multiply.outer(w, line)
    return w


def _one_sided(x0, x1, x2) -> tuple[float, float, float]:
    # derivative at x0 of the quadratic through (x0, x1, x2)
    h1, h2 = x1 - x0, x2 - x0
    return -(h1 + h2) / (h1 * h2), h2 / (h1 * (h2 - h1)), -h1 / (h2 * (h2 - h1))


def functional(spec: SensorSpec, grid: Grid) -> np.ndarray:
    """Weight array of shape ``(n_components, *dims)`` representing ``spec`` on ``grid``."""
    if not 0 <= spec.component < grid.ndim:
        raise SensorError(f"component {spec.component} invalid for {grid.ndim}-component fields")
    p = _check_inside(grid, spec.location, "sensor location")
    out = np.zeros((grid.ndim,) + grid.dims)
    if spec.kind is SensorKind.POINT_VELOCITY:
        out[spec.component] = _point_weights(grid, p)
    elif spec.kind is SensorKind.WALL_SHEAR:
        ax = spec.wall_axis
        if ax is None or not 0 <= ax < grid.ndim or spec.wall_side not in ("low", "high"):
            raise SensorError("wall-shear sensor needs wall_axis in range and wall_side 'low' or 'high'")
        if spec.component == ax:
            raise SensorError("wall-shear component must be tangential to the wall")
        c = grid.coords[ax]
        if c.size < 3:
            raise SensorError(f"axis {ax} has too few points for a 3-point wall stencil")
        idx = [0, 1, 2] if spec.wall_side == "low" else [-1, -2, -3]
        wall = c[idx[0]]
        if abs(p[ax] - wall) > 1e-9 * (c[-1] - c[0]):
            raise SensorError(f"wall-shear sensor at {spec.location} is not on the "
                              f"{spec.wall_side} wall of axis {ax} (x_{ax} = {wall})")
        coef = _one_sided(*c[idx])
        sel: list = []
        for a, ca in enumerate(grid.coords):
            sel.append(None if a == ax else int(np.argmin(np.abs(ca - p[a]))))
        for i, cf in zip(idx, coef):
            s = list(sel)
            s[ax] = i
            out[(spec.component, *s)] += cf
    elif spec.kind is SensorKind.BOX_AVERAGE:
        if spec.extent is None:
            raise SensorError("box-average sensor needs an extent (upper corner)")
        hi = _check_inside(grid, spec.extent, "box upper corner")
        if np.any(hi < p):
            raise SensorError("box upper corner lies below its lower corner")
        mask = np.ones(())
        for ax, c in enumerate(grid.coords):
            mask = np.multiply.outer(mask, ((c >= p[ax]) & (c <= hi[ax])).astype(float))
        w = grid.quad_weights * mask
        if w.sum() <= 0:
            raise SensorError(f"box {spec.location}-{spec.extent} contains no grid points")
        out[spec.component] = w / w.sum()
    return spec.weight * out


def apply(spec: SensorSpec, field: VectorField) -> float:
    """Measurement of ``field`` by one sensor."""
    return float(np.vdot(functional(spec, field.grid), field.data))


@dataclass(frozen=True, eq=False)
class SensorSuite:
    grid: Grid
    specs: tuple[SensorSpec, ...]
    functionals: np.ndarray
    mode_response: np.ndarray
    ref_offset: np.ndarray

    @property
    def n_sensors(self) -> int:
        return len(self.specs)

    def measure(self, field: VectorField) -> np.ndarray:
        check_same_grid(self.grid, field.grid)
        return self.functionals.reshape(self.n_sensors, -1) @ field.data.ravel()

    def measure_array(self, arr: np.ndarray) -> np.ndarray:
        """Measurements of a stack of field arrays, shape ``(n_fields, n_sensors)``."""
        return arr.reshape(arr.shape[0], -1) @ self.functionals.reshape(self.n_sensors, -1).T


def build_suite(specs: Sequence[SensorSpec], basis: PodBasis) -> SensorSuite:
    specs = tuple(s if isinstance(s, SensorSpec) else SensorSpec.from_dict(s) for s in specs)
    if not specs:
        raise SensorError("empty sensor list")
    grid = basis.grid
    fun = np.stack([functional(s, grid) for s in specs])
    flat = fun.reshape(len(specs), -1)
    response = flat @ basis.mode_array().reshape(basis.n_retained, -1).T
    offset = flat @ basis.reference.data.ravel()
    for a in (fun, response, offset):
        a.setflags(write=False)
    return SensorSuite(grid, specs, fun, response, offset)


FieldSource = Callable[[float], VectorField]


def sample_measurements(suite: SensorSuite, source: SnapshotSet | FieldSource, times,
                        noise_std: float = 0.0, rng: np.random.Generator | None = None) -> MeasurementRecord:
    """Sensor readings at ``times``.

    Snapshot sources are interpolated linearly in time between neighbouring
    snapshots (equivalently, their measurements are); times outside the
    snapshot span are refused.  ``noise_std`` adds optional white noise
    (off by default).
    """
    times = np.asarray(times, dtype=float)
    if isinstance(source, SnapshotSet):
        check_same_grid(suite.grid, source.grid)
        per_snap = MeasurementRecord(source.times, suite.measure_array(source.array()))
        values = per_snap.interpolate(times)
    else:
        values = np.stack([suite.measure(source(float(t))) for t in times])
    if noise_std > 0:
        rng = np.random.default_rng() if rng is None else rng
        values = values + noise_std * rng.standard_normal(values.shape)
    return MeasurementRecord(times, values)
