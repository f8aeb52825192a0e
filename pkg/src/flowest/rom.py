"""Quadratic Galerkin reduced-order model.

The model residual is::

    R_r(a) = adot_r - A_r - C_kr a_k + B_ksr a_k a_s

so the integrated system is ``adot_r = A_r + C_kr a_k - B_ksr a_k a_s``.
Mind the minus sign on the quadratic term.  ``C`` is stored with the
summed index first (``c_linear[k, r]``) and ``B`` as ``b_quad[k, s, r]``.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .fields import VectorField, gram
from .pod import PodBasis
from .records import CoefficientTrajectory

ROM_MAGIC = b"FLWROM01"


class BlowUpError(RuntimeError):
    def __init__(self, message: str, last_time: float):
        super().__init__(message)
        self.last_time = last_time


@dataclass(frozen=True, eq=False)
class RomCoefficients:
    a_const: np.ndarray
    c_linear: np.ndarray
    b_quad: np.ndarray

    def __post_init__(self):
        a = np.array(self.a_const, dtype=float).ravel()
        n = a.size
        c = np.array(self.c_linear, dtype=float)
        b = np.array(self.b_quad, dtype=float)
        if c.shape != (n, n) or b.shape != (n, n, n):
            raise ValueError(f"inconsistent ROM sizes: A {a.shape}, C {c.shape}, B {b.shape}")
        for name, arr in (("A", a), ("C", c), ("B", b)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            arr.setflags(write=False)
        object.__setattr__(self, "a_const", a)
        object.__setattr__(self, "c_linear", c)
        object.__setattr__(self, "b_quad", b)

    @property
    def n_modes(self) -> int:
        return self.a_const.size

    def rhs(self, a: np.ndarray) -> np.ndarray:
        """``A_r + C_kr a_k - B_ksr a_k a_s``; ``a`` may be a stack of states (rows)."""
        a = np.asarray(a, dtype=float)
        n = self.n_modes
        outer = (a[..., :, None] * a[..., None, :]).reshape(a.shape[:-1] + (n * n,))
        quad = outer @ self.b_quad.reshape(n * n, n)
        return self.a_const + a @ self.c_linear - quad

    def jacobian(self, a: np.ndarray) -> np.ndarray:
        """``d rhs_r / d a_k`` as a matrix indexed ``[r, k]``."""
        bsym = self.b_quad + self.b_quad.transpose(1, 0, 2)
        return self.c_linear.T - np.einsum("ksr,s->rk", bsym, np.asarray(a, dtype=float))


def residual(rom: RomCoefficients, a, adot) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    adot = np.asarray(adot, dtype=float)
    if a.shape[-1] != rom.n_modes or adot.shape != a.shape:
        raise ValueError(f"expected vectors of length {rom.n_modes}, got {a.shape} and {adot.shape}")
    return adot - rom.rhs(a)


def _derivative(f: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    # second-order central inside, second-order one-sided at the ends
    return np.gradient(f, coords, axis=axis, edge_order=2)


def mode_gradients(mode: VectorField) -> np.ndarray:
    """``grad[c, d] = d Phi_c / d x_d`` on the grid."""
    g = mode.grid
    return np.stack([np.stack([_derivative(mode.data[c], g.coords[d], d) for d in range(g.ndim)])
                     for c in range(mode.n_components)])


def convective_term(u: VectorField, v: VectorField) -> VectorField:
    """``(u . grad) v``."""
    grad = mode_gradients(v)
    return VectorField(u.grid, np.einsum("d...,cd...->c...", u.data, grad))


BilinearOperator = Callable[[VectorField, VectorField], VectorField]


def assemble_quadratic_tensor(basis: PodBasis, operator: BilinearOperator | None = None) -> np.ndarray:
    """``B[k, s, r] = (N(Phi_k, Phi_s), Phi_r)`` with ``N`` the convective term by default.

    A different bilinear field operator can be supplied (synthetic flows use
    this to carry their own nonlinearity).
    """
    grid = basis.grid
    n = basis.n_retained
    modes = basis.mode_array()
    if operator is None:
        if min(grid.dims) < 3:
            raise ValueError(f"grid {grid.dims} too small for a 3-point derivative stencil")
        grads = np.stack([mode_gradients(m) for m in basis.modes])
        b = np.empty((n, n, n))
        for k in range(n):
            conv = np.einsum("d...,scd...->sc...", modes[k], grads)
            b[k] = gram(conv, modes, grid)
        return b
    b = np.empty((n, n, n))
    for k in range(n):
        conv = np.stack([operator(basis.modes[k], basis.modes[s]).data for s in range(n)])
        b[k] = gram(conv, modes, grid)
    return b


def _rk4_step(rom: RomCoefficients, a: np.ndarray, h: float) -> np.ndarray:
    k1 = rom.rhs(a)
    k2 = rom.rhs(a + 0.5 * h * k1)
    k3 = rom.rhs(a + 0.5 * h * k2)
    k4 = rom.rhs(a + h * k3)
    return a + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rom: RomCoefficients, a0, t_span: tuple[float, float], dt: float) -> CoefficientTrajectory:
    """Fixed-step classical RK4 over ``t_span``.

    The step is shrunk so a whole number of steps covers the span exactly;
    every step is sampled.
    """
    t0, t1 = map(float, t_span)
    if not dt > 0 or not math.isfinite(t1 - t0) or t1 <= t0:
        raise ValueError(f"need dt > 0 and a finite span with t1 > t0, got dt={dt}, span={t_span}")
    n_steps = max(1, math.ceil((t1 - t0) / dt - 1e-9))
    times = t0 + (t1 - t0) * np.arange(n_steps + 1) / n_steps
    return integrate_to(rom, a0, times, dt)


def integrate_to(rom: RomCoefficients, a0, times: Sequence[float], dt: float) -> CoefficientTrajectory:
    """RK4 from ``times[0]`` hitting each requested time exactly, steps no longer than ``dt``."""
    times = np.asarray(times, dtype=float)
    a = np.array(a0, dtype=float).ravel()
    if a.size != rom.n_modes:
        raise ValueError(f"initial state has {a.size} entries, ROM has {rom.n_modes} modes")
    if not np.all(np.isfinite(a)):
        raise BlowUpError("non-finite initial state", float(times[0]))
    out = np.empty((times.size, a.size))
    out[0] = a
    for i in range(1, times.size):
        span = times[i] - times[i - 1]
        n_sub = max(1, math.ceil(span / dt - 1e-9))
        h = span / n_sub
        t = times[i - 1]
        for j in range(n_sub):
            with np.errstate(over="ignore", invalid="ignore"):
                a_new = _rk4_step(rom, a, h)
            if not np.all(np.isfinite(a_new)):
                raise BlowUpError(f"trajectory blew up after t = {t + j * h:.6g}", float(t + j * h))
            a = a_new
        out[i] = a
    return CoefficientTrajectory(times, out)


def save_rom(rom: RomCoefficients, path, comments: Sequence[str] = ()) -> None:
    """Text record (``rom N`` / ``A`` / ``C`` / ``B`` lines) or binary for ``.bin`` paths.

    C is row-major ``[k][r]``; B is k-major, then s, then r.
    """
    n = rom.n_modes
    try:
        if os.fspath(path).endswith(".bin"):
            blob = "\n".join(comments).encode()
            with open(path, "wb") as fh:
                fh.write(ROM_MAGIC + struct.pack("<q", len(blob)) + blob + struct.pack("<q", n))
                for arr in (rom.a_const, rom.c_linear, rom.b_quad):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            return
        with open(path, "w") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            fh.write(f"rom {n}\n")
            for tag, arr in (("A", rom.a_const), ("C", rom.c_linear), ("B", rom.b_quad)):
                fh.write(tag + " " + " ".join(repr(float(x)) for x in arr.ravel()) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write ROM to {os.fspath(path)}: {exc.strerror}") from exc


def load_rom(path) -> RomCoefficients:
    name = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] == ROM_MAGIC:
        (nc,) = struct.unpack("<q", raw[8:16])
        pos = 16 + nc
        (n,) = struct.unpack("<q", raw[pos:pos + 8])
        vals = np.frombuffer(raw, "<f8", offset=pos + 8)
        if vals.size != n + n * n + n ** 3:
            raise ValueError(f"{name}: expected {n + n * n + n ** 3} values, found {vals.size}")
        return RomCoefficients(vals[:n], vals[n:n + n * n].reshape(n, n),
                               vals[n + n * n:].reshape(n, n, n))
    parts = {}
    n = None
    for lineno, line in enumerate(raw.decode().splitlines(), 1):
        toks = line.split("#", 1)[0].split()
        if not toks:
            continue
        if toks[0] == "rom":
            n = int(toks[1])
        elif toks[0] in ("A", "C", "B"):
            parts[toks[0]] = np.array([float(x) for x in toks[1:]])
        else:
            raise ValueError(f"{name}:{lineno}: unknown record {toks[0]!r}")
    if n is None or set(parts) != {"A", "C", "B"}:
        raise ValueError(f"{name}: incomplete ROM record")
    return RomCoefficients(parts["A"], parts["C"].reshape(n, n), parts["B"].reshape(n, n, n))
