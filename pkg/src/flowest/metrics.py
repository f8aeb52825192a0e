"""Relative L2 error measures and report tables."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .fields import trapezoid_weights
from .pod import PodBasis, project_many, reconstruct_many
from .records import CoefficientTrajectory

COMPONENT_NAMES = ("U", "V", "W")


class FieldErrorMode(str, Enum):
    TOTAL = "total"
    FLUCTUATING = "fluctuating"
    POD_PROJECTED = "pod-projected"


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ma.MaskedArray:
    """``100 * num / den`` with zero-norm reference channels masked as undefined."""
    undefined = den <= 0
    safe = np.where(undefined, 1.0, den)
    return np.ma.masked_array(100.0 * num / safe, mask=undefined)


def coefficient_error(estimated: CoefficientTrajectory, reference: CoefficientTrajectory) -> np.ma.MaskedArray:
    """Per-mode ``100 * ||a_est - a_ref|| / ||a_ref||`` with trapezoidal time norms.

    The estimate is linearly interpolated onto the reference times when they
    differ.  Channels whose reference norm is zero are masked.
    """
    if estimated.n_modes != reference.n_modes:
        raise ValueError(f"{estimated.n_modes} estimated modes vs {reference.n_modes} reference modes")
    if len(estimated) == len(reference) and np.array_equal(estimated.times, reference.times):
        est = estimated.values
    else:
        est = estimated.interpolate(reference.times)
    w = trapezoid_weights(reference.times)
    diff = est - reference.values
    num = np.sqrt(w @ (diff * diff))
    den = np.sqrt(w @ (reference.values ** 2))
    return _ratio(num, den)


def _as_array(fields) -> np.ndarray:
    if isinstance(fields, np.ndarray):
        return fields
    return np.stack([f.data for f in fields])


def field_error(estimated, reference, times, mode: FieldErrorMode | str = "total",
                basis: PodBasis | None = None) -> np.ma.MaskedArray:
    """Per-component relative L2 error of field histories, in percent.

    ``estimated`` and ``reference`` are sequences of fields (or stacked
    arrays ``(n_t, n_components, *dims)``) at ``times``.  The space L2 norm
    of each snapshot is integrated in time with the trapezoidal rule.

    * total: full fields;
    * fluctuating: ``ubar`` removed from both;
    * pod-projected: the reference is replaced by its projection on ``basis``.
    """
    mode = FieldErrorMode(mode)
    est = _as_array(estimated)
    ref = _as_array(reference)
    if est.shape != ref.shape:
        raise ValueError(f"estimated fields {est.shape} vs reference {ref.shape}")
    if basis is None:
        raise ValueError("field_error needs the basis (grid, reference field, modes)")
    grid = basis.grid
    if mode is FieldErrorMode.POD_PROJECTED:
        ref = reconstruct_many(basis, project_many(basis, ref))
    if mode is FieldErrorMode.FLUCTUATING:
        est = est - basis.reference.data[None]
        ref = ref - basis.reference.data[None]
    wt = trapezoid_weights(np.asarray(times, dtype=float)) if len(times) > 1 else np.ones(1)
    ws = grid.quad_weights
    axes = tuple(range(2, est.ndim))
    diff = est - ref
    num = np.sqrt(wt @ np.sum(ws * diff * diff, axis=axes))
    den = np.sqrt(wt @ np.sum(ws * ref * ref, axis=axes))
    return _ratio(num, den)


@dataclass
class ErrorReport:
    method: str
    per_coefficient: np.ma.MaskedArray | None = None
    per_component: np.ma.MaskedArray | None = None
    fluctuating: np.ma.MaskedArray | None = None
    projected: np.ma.MaskedArray | None = None
    averaging_window: tuple[float, float] | None = None

    def as_dict(self) -> dict:
        def conv(a):
            if a is None:
                return None
            return [None if m else float(v) for v, m in zip(np.ma.getdata(a), np.ma.getmaskarray(a))]

        return {"method": self.method, "per_coefficient": conv(self.per_coefficient),
                "per_component": conv(self.per_component), "fluctuating": conv(self.fluctuating),
                "projected": conv(self.projected),
                "averaging_window": list(self.averaging_window) if self.averaging_window else None}


def _fmt(v, masked) -> str:
    if masked:
        return "n/a"
    return f"{v:.2f}"


def _row(label: str, arr, width: int) -> str:
    if arr is None:
        cells = ["-"] * width
    else:
        cells = [_fmt(v, m) for v, m in zip(np.ma.getdata(arr), np.ma.getmaskarray(arr))]
    return " ".join([f"{label:<8}"] + [f"{c:>10}" for c in cells])


def render_report(reports: Sequence[ErrorReport], layout: str = "coefficient-table",
                  n_columns: int | None = None) -> str:
    """Fixed-width table with two-decimal percentages.

    ``coefficient-table``: one row per method with ``e(a_i)%`` columns.
    ``component-table``: for each of total / fluctuating / projected, one row
    per method with ``e(U)% e(V)% [e(W)%]`` columns.
    """
    reports = list(reports)
    if layout == "coefficient-table":
        if n_columns is None:
            n_columns = max((len(r.per_coefficient) for r in reports if r.per_coefficient is not None),
                            default=0)
        header = " ".join([f"{'method':<8}"] + [f"{f'e(a{i + 1})%':>10}" for i in range(n_columns)])
        lines = [header] + [_row(r.method, r.per_coefficient, n_columns) for r in reports]
    elif layout == "component-table":
        if n_columns is None:
            n_columns = max((len(a) for r in reports for a in (r.per_component, r.fluctuating, r.projected)
                             if a is not None), default=0)
        lines = []
        for title, attr, suffix in (("total", "per_component", ""), ("fluctuating", "fluctuating", "'"),
                                    ("projected", "projected", "_f")):
            lines.append(" ".join([f"{title:<8}"] + [f"{f'e({COMPONENT_NAMES[c]}{suffix})%':>10}"
                                                        for c in range(n_columns)]))
            lines += [_row(r.method, getattr(r, attr), n_columns) for r in reports]
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return "\n".join(lines) + "\n"


def export_key_values(reports: Sequence[ErrorReport]) -> str:
    """Machine-readable export: one JSON object per line."""
    return "".join(json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in reports)
