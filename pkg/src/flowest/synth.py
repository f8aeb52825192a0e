"""Synthetic flows with exactly known modal coefficients.

A scenario is a set of orthonormal mode shapes ``psi_a`` on a grid, a
quadratic ROM driving their coefficients, and the sampled trajectory.
The flow's nonlinearity is the bilinear field operator

    N(u, v) = sum_abc B_abc (u, psi_a) (v, psi_b) psi_c

so a Galerkin projection of ``N`` onto any basis spanning the same space
reproduces the true quadratic tensor in that basis.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .fields import Grid, SnapshotSet, VectorField, gram
from .pod import PodBasis, load_basis, reconstruct_many, save_basis
from .records import CoefficientTrajectory, load_trajectory, save_trajectory
from .rom import BlowUpError, RomCoefficients, integrate, integrate_to, load_rom, save_rom
from .snapshot_io import save_snapshots


class ModeFamily(str, Enum):
    TRIGONOMETRIC = "trigonometric"
    POLYNOMIAL_BUMP = "polynomial-bump"


class Dynamics(str, Enum):
    LIMIT_CYCLE = "limit-cycle"
    CHAOTIC_QUADRATIC = "chaotic-quadratic"


class SynthesisError(RuntimeError):
    pass


def _raw_mode(grid: Grid, index: int, family: ModeFamily, rng: np.random.Generator) -> np.ndarray:
    x = [(c - c[0]) / (c[-1] - c[0]) for c in grid.coords]
    mesh = np.meshgrid(*x, indexing="ij")
    out = np.zeros((grid.ndim,) + grid.dims)
    kmax = 2 + index // 2
    for c in range(grid.ndim):
        for _ in range(3):
            amp = rng.standard_normal()
            term = np.ones(grid.dims)
            if family is ModeFamily.TRIGONOMETRIC:
                for ax in range(grid.ndim):
                    k = rng.integers(1, kmax + 1)
                    phase = rng.uniform(0, 2 * np.pi)
                    term = term * np.sin(k * np.pi * mesh[ax] + phase)
            else:
                width = 0.15 + 0.25 / (1 + index)
                r2 = sum((mesh[ax] - rng.uniform(0.15, 0.85)) ** 2 for ax in range(grid.ndim))
                poly = 1.0 + sum(rng.standard_normal() * mesh[ax] for ax in range(grid.ndim))
                term = poly * np.exp(-r2 / width ** 2)
            out[c] += amp * term
    return out


def make_modes(grid: Grid, n_modes: int, family: ModeFamily | str = "trigonometric", seed: int = 0,
               reference: VectorField | None = None) -> PodBasis:
    """``n_modes`` smooth fields, Gram-Schmidt orthonormalised (two passes).

    Eigenvalues of the returned basis are unknown and set to zero.
    """
    family = ModeFamily(family)
    rng = np.random.default_rng(seed)
    modes: list[np.ndarray] = []
    for i in range(n_modes):
        v = _raw_mode(grid, i, family, rng)
        n0 = np.sqrt(gram(v[None], v[None], grid)[0, 0])
        for _ in range(2):
            for m in modes:
                v = v - gram(v[None], m[None], grid)[0, 0] * m
        nv = np.sqrt(gram(v[None], v[None], grid)[0, 0])
        if nv < 1e-8 * n0:
            raise SynthesisError(f"mode {i + 1} is linearly dependent on the previous ones; "
                                 f"use a finer grid or higher spatial frequencies")
        modes.append(v / nv)
    ref = VectorField.zeros(grid) if reference is None else reference
    return PodBasis(tuple(VectorField(grid, m) for m in modes), np.zeros(n_modes),
                    np.zeros((0, n_modes)), ref)


def base_flow(grid: Grid) -> VectorField:
    """Uniform stream along axis 0 with a Gaussian deficit across axis 1."""
    y = grid.mesh()[1]
    yc = 0.5 * (grid.coords[1][0] + grid.coords[1][-1])
    width = 0.15 * (grid.coords[1][-1] - grid.coords[1][0])
    data = np.zeros((grid.ndim,) + grid.dims)
    data[0] = 1.0 - 0.5 * np.exp(-((y - yc) / width) ** 2)
    return VectorField(grid, data)


class _QuadraticBuilder:
    def __init__(self, n: int):
        self.a = np.zeros(n)
        self.c = np.zeros((n, n))
        self.b = np.zeros((n, n, n))

    def const(self, r, v):
        self.a[r] += v

    def lin(self, r, k, v):
        self.c[k, r] += v

    def quad(self, r, k, s, v):
        # adot_r += v a_k a_s  ->  B_ksr -= v
        self.b[k, s, r] -= v

    def rom(self) -> RomCoefficients:
        return RomCoefficients(self.a, self.c, self.b)


def limit_cycle_rom(n: int, omega: float = 2 * np.pi, growth: float = 0.5, damping: float = 1.0) -> RomCoefficients:
    """Hopf pair with a shift mode, and harmonic pairs slaved to it.

    Layout: modes 0-1 oscillate at ``omega`` with unit amplitude; mode 2 is
    the shift mode (constant 0.3 on the cycle); then pairs at 2, 3, ...
    times ``omega`` with amplitudes 0.2, 0.05, 0.0125, ...  A left-over
    single mode is a damped response to ``a0^2 - a1^2``.
    """
    if n < 3:
        raise ValueError("the limit-cycle system needs at least 3 modes")
    q = _QuadraticBuilder(n)
    kappa = 0.3
    beta = growth / kappa
    sigma_s = 2.0
    for r, (k0, k1, sgn) in enumerate([(0, 1, -1.0), (1, 0, 1.0)]):
        q.lin(r, r, growth)
        q.lin(r, k1, sgn * omega)
        q.quad(r, 2, r, -beta)
    q.lin(2, 2, -sigma_s)
    q.quad(2, 0, 0, sigma_s * kappa)
    q.quad(2, 1, 1, sigma_s * kappa)
    prev = (0, 1)
    harmonic = 2
    idx = 3
    gains = {2: 0.2}
    while idx + 1 < n:
        g = gains.get(harmonic, 0.25) * damping
        w = harmonic * omega
        p, s = idx, idx + 1
        q.lin(p, p, -damping)
        q.lin(p, s, -w)
        q.lin(s, s, -damping)
        q.lin(s, p, w)
        # z_h' += g z_1 z_prev
        q.quad(p, 0, prev[0], g)
        q.quad(p, 1, prev[1], -g)
        q.quad(s, 0, prev[1], g)
        q.quad(s, 1, prev[0], g)
        prev = (p, s)
        harmonic += 1
        idx += 2
    if idx < n:
        q.lin(idx, idx, -damping)
        q.quad(idx, 0, 0, 0.1)
        q.quad(idx, 1, 1, -0.1)
    return q.rom()


def chaotic_rom(n_resolved: int, n_unresolved: int, forcing: float = 8.0, time_scale: float = 1.0,
                seed: int = 0, tail_strength: float = 0.1, tail_speed: float = 10.0,
                coupling: float = 1.0) -> tuple[RomCoefficients, np.ndarray]:
    """Two-scale Lorenz-96 system in scaled coordinates.

    The slow ring ``x`` (``n_resolved`` variables) is scaled by decreasing
    factors ``s_i`` so its energies are ordered.  The fast ring ``z``
    (``n_unresolved`` variables, ``tail_speed`` times faster) is forced by
    the slow variable it sits over and does not feed back, so the slow
    dynamics stay closed.  Fast variables are scaled by
    ``tail_strength * s_last``.  Returns the ROM and the slow scale factors.
    """
    del seed  # the system is fully determined by its parameters
    n = n_resolved + n_unresolved
    q = _QuadraticBuilder(n)
    scale = 0.35 * np.exp(-1.2 * np.arange(n_resolved) / max(n_resolved, 1))
    inv = 1.0 / time_scale
    for i in range(n_resolved):
        ip1, im1, im2 = (i + 1) % n_resolved, (i - 1) % n_resolved, (i - 2) % n_resolved
        # x_i' = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F,  a_i = s_i x_i
        si = scale[i]
        q.quad(i, ip1, im1, inv * si / (scale[ip1] * scale[im1]))
        q.quad(i, im2, im1, -inv * si / (scale[im2] * scale[im1]))
        q.lin(i, i, -inv)
        q.const(i, inv * si * forcing)
    st = tail_strength * scale[-1] if n_resolved else 1.0
    c = tail_speed * inv
    m = n_unresolved
    for j in range(m):
        r = n_resolved + j
        jp1, jm1, jp2 = (n_resolved + (j + k) % m for k in (1, -1, 2))
        # z_j' = c [z_{j+1} (z_{j-1} - z_{j+2}) - z_j + h x_k],  a_r = st z_j
        q.quad(r, jp1, jm1, c / st)
        q.quad(r, jp1, jp2, -c / st)
        q.lin(r, r, -c)
        if n_resolved:
            k = j * n_resolved // m
            q.lin(r, k, c * coupling * st / scale[k])
    return q.rom(), scale


class _ModalOperator:
    """Bilinear field operator carrying a quadratic tensor on fixed modes."""

    def __init__(self, basis: PodBasis, b_quad: np.ndarray):
        self.basis = basis
        self.b_quad = np.asarray(b_quad)
        self._modes = basis.mode_array()

    def __call__(self, u: VectorField, v: VectorField) -> VectorField:
        grid = self.basis.grid
        pu = gram(u.data[None], self._modes, grid)[0]
        pv = gram(v.data[None], self._modes, grid)[0]
        c = np.einsum("abc,a,b->c", self.b_quad, pu, pv)
        return VectorField(grid, np.tensordot(c, self._modes, axes=1))


@dataclass(frozen=True, eq=False)
class SyntheticScenario:
    grid: Grid
    true_basis: PodBasis
    true_rom: RomCoefficients
    true_trajectory: CoefficientTrajectory
    seed: int
    dynamics: Dynamics
    n_resolved: int

    @property
    def operator(self) -> _ModalOperator:
        return _ModalOperator(self.true_basis, self.true_rom.b_quad)

    def fields(self, times=None) -> np.ndarray:
        traj = self.true_trajectory
        coeffs = traj.values if times is None else traj.interpolate(times)
        return reconstruct_many(self.true_basis, coeffs)

    def snapshots(self, t_start: float | None = None, t_end: float | None = None,
                  every: int = 1) -> SnapshotSet:
        traj = self.true_trajectory
        lo = traj.times[0] if t_start is None else t_start
        hi = traj.times[-1] if t_end is None else t_end
        idx = np.flatnonzero((traj.times >= lo - 1e-12) & (traj.times <= hi + 1e-12))[::every]
        arr = reconstruct_many(self.true_basis, traj.values[idx])
        return SnapshotSet(self.grid, traj.times[idx], tuple(VectorField(self.grid, a) for a in arr))

    def field_source(self):
        """Callable ``t -> VectorField`` with coefficients interpolated linearly in time."""
        def source(t: float) -> VectorField:
            a = self.true_trajectory.interpolate([t])[0]
            return VectorField(self.grid, reconstruct_many(self.true_basis, a[None])[0])
        return source


def make_scenario(grid: Grid, n_modes: int, dynamics: Dynamics | str = "limit-cycle",
                  span: tuple[float, float] = (0.0, 10.0), dt: float = 0.01, seed: int = 0,
                  n_unresolved: int = 0, burn_in: float | None = None,
                  sample_every: int = 1, family: ModeFamily | str = "trigonometric",
                  time_scale: float = 1.0, tail_strength: float = 0.1) -> SyntheticScenario:
    """Build modes, ROM and trajectory.

    ``n_modes`` resolved modes plus ``n_unresolved`` weak ones; the trajectory
    is integrated with RK4 at ``dt`` after ``burn_in`` and sampled every
    ``sample_every`` steps over ``span``.
    """
    dynamics = Dynamics(dynamics)
    rng = np.random.default_rng(seed)
    n = n_modes + n_unresolved
    if dynamics is Dynamics.LIMIT_CYCLE:
        rom = limit_cycle_rom(n)
        a0 = np.zeros(n)
        a0[0], a0[2] = 1.0, 0.3
        a0 += 0.05 * rng.standard_normal(n)
        burn = 30.0 if burn_in is None else burn_in
    else:
        rom, scale = chaotic_rom(n_modes, n_unresolved, time_scale=time_scale, seed=seed,
                                 tail_strength=tail_strength)
        a0 = np.zeros(n)
        a0[:n_modes] = scale * (8.0 + 0.5 * rng.standard_normal(n_modes))
        a0[n_modes:] = 1e-4 * rng.standard_normal(n_unresolved)
        burn = 40.0 * time_scale if burn_in is None else burn_in
    params = dict(dynamics=dynamics.value, n_modes=n_modes, n_unresolved=n_unresolved,
                  span=tuple(span), dt=dt, seed=seed)
    try:
        if burn > 0:
            a0 = integrate(rom, a0, (0.0, burn), dt).values[-1]
        t0, t1 = map(float, span)
        n_samples = int(round((t1 - t0) / (dt * sample_every)))
        times = t0 + (t1 - t0) * np.arange(n_samples + 1) / n_samples
        traj = integrate_to(rom, a0, times, dt)
    except BlowUpError as exc:
        raise SynthesisError(f"synthetic trajectory blew up at t = {exc.last_time:.4g} "
                             f"with parameters {params}") from exc
    basis = make_modes(grid, n, family, seed + 1, reference=base_flow(grid))
    return SyntheticScenario(grid, basis, rom, traj, seed, dynamics, n_modes)


def export_scenario(s: SyntheticScenario, directory, fmt=None, comments=()) -> dict:
    """Write snapshots, truth trajectory, true ROM, true modes and a small manifest."""
    os.makedirs(directory, exist_ok=True)
    ext = ".bin" if fmt in ("binary", "raw-binary") else ".txt"
    paths = {
        "snapshots": os.path.join(directory, "snapshots" + ext),
        "truth": os.path.join(directory, "truth_coefficients.txt"),
        "true_rom": os.path.join(directory, "true_rom.txt"),
        "true_modes": os.path.join(directory, "true_modes" + ext),
        "manifest": os.path.join(directory, "scenario.json"),
    }
    save_snapshots(s.snapshots(), paths["snapshots"], fmt, comments)
    save_trajectory(s.true_trajectory, paths["truth"], comments)
    save_rom(s.true_rom, paths["true_rom"], comments)
    save_basis(s.true_basis, paths["true_modes"], fmt, comments)
    with open(paths["manifest"], "w") as fh:
        json.dump({"seed": s.seed, "dynamics": s.dynamics.value, "n_resolved": s.n_resolved,
                   "files": {k: os.path.basename(v) for k, v in paths.items() if k != "manifest"}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def load_scenario(directory) -> SyntheticScenario:
    with open(os.path.join(directory, "scenario.json")) as fh:
        man = json.load(fh)
    files = {k: os.path.join(directory, v) for k, v in man["files"].items()}
    basis = load_basis(files["true_modes"])
    return SyntheticScenario(basis.grid, basis, load_rom(files["true_rom"]),
                             load_trajectory(files["truth"]), man["seed"], Dynamics(man["dynamics"]),
                             man["n_resolved"])
