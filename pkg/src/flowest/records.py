"""Time series containers: modal-coefficient trajectories and sensor records."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class _TimeTable:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = _frozen(np.asarray(self.times, dtype=float).ravel())
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] != times.size:
            raise ValueError(f"values shape {values.shape} does not match {times.size} times")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times are not strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", _frozen(values))

    def __len__(self) -> int:
        return self.times.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def window(self, start: int, stop: int):
        return type(self)(self.times[start:stop], self.values[start:stop])

    def between(self, t_start: float, t_end: float):
        idx = (self.times >= t_start) & (self.times <= t_end)
        return type(self)(self.times[idx], self.values[idx])

    def interpolate(self, times: Sequence[float]) -> np.ndarray:
        """Piecewise-linear values at ``times``; refuses extrapolation."""
        times = np.asarray(times, dtype=float)
        lo, hi = self.span
        tol = 1e-12 * max(1.0, abs(lo), abs(hi))
        if times.size and (times.min() < lo - tol or times.max() > hi + tol):
            raise ValueError(f"requested times [{times.min()}, {times.max()}] "
                             f"outside coverage [{lo}, {hi}]")
        t = np.clip(times, lo, hi)
        return np.column_stack([np.interp(t, self.times, v) for v in self.values.T])


@dataclass(frozen=True, eq=False)
class CoefficientTrajectory(_TimeTable):
    """Sampled modal-coefficient histories, one column per mode.

    ``notes`` carries warnings raised while the trajectory was produced.
    """

    notes: tuple[str, ...] = field(default=(), compare=False)

    @property
    def coeffs(self) -> np.ndarray:
        return self.values

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]

    def window(self, start: int, stop: int) -> "CoefficientTrajectory":
        return CoefficientTrajectory(self.times[start:stop], self.values[start:stop], self.notes)

    def between(self, t_start: float, t_end: float) -> "CoefficientTrajectory":
        idx = (self.times >= t_start) & (self.times <= t_end)
        return CoefficientTrajectory(self.times[idx], self.values[idx], self.notes)


@dataclass(frozen=True, eq=False)
class MeasurementRecord(_TimeTable):
    """Sensor readings ``values[m, k] = f_k(u(tau_m))``."""

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        if len(self) < 2:
            return False
        dt = np.diff(self.times)
        return bool(np.all(np.abs(dt - dt.mean()) <= rtol * dt.mean()))


def write_table(path, times, values, columns: Sequence[str], header: Sequence[str] = ()) -> None:
    """Write a whitespace-delimited table with a leading time column.

    ``header`` lines are emitted as ``#`` comments ahead of the column names.
    Values are written with 17 significant digits so they reload bit-identically.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    lines = [f"# {h}" for h in header]
    lines.append("# " + " ".join(["time", *columns]))
    for t, row in zip(np.asarray(times, dtype=float), values):
        lines.append(" ".join(repr(float(x)) for x in (t, *row)))
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write table to {os.fspath(path)}: {exc.strerror}") from exc


def read_table(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Inverse of :func:`write_table`; returns times, values and column names."""
    columns: list[str] = []
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                words = s[1:].split()
                if words and words[0] == "time":
                    columns = words[1:]
                continue
            try:
                rows.append([float(x) for x in s.split()])
            except ValueError as exc:
                raise ValueError(f"{os.fspath(path)}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ValueError(f"{os.fspath(path)}:{lineno}: expected {len(rows[0])} "
                                 f"columns, got {len(rows[-1])}")
    if not rows:
        raise ValueError(f"{os.fspath(path)}: no data rows")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1:], columns


def save_trajectory(traj: CoefficientTrajectory, path, header: Sequence[str] = ()) -> None:
    write_table(path, traj.times, traj.values,
                [f"a{j + 1}" for j in range(traj.n_modes)], header)


def load_trajectory(path) -> CoefficientTrajectory:
    t, v, _ = read_table(path)
    return CoefficientTrajectory(t, v)


def save_record(rec: MeasurementRecord, path, header: Sequence[str] = ()) -> None:
    write_table(path, rec.times, rec.values, [f"f{k + 1}" for k in range(rec.n_sensors)], header)


def load_record(path) -> MeasurementRecord:
    t, v, _ = read_table(path)
    return MeasurementRecord(t, v)
