"""Static estimators of modal coefficients from sensor readings.

All estimators work on offset-corrected readings ``f - f(ubar)`` and
return fluctuation coefficients.

* LSQ: per-instant least squares through the sensors' mode response.
* LSE: linear map fitted on time correlations over a training interval.
* QSE: LSE plus symmetric quadratic products of the readings.
* SLSE: per-frequency linear map fitted on segment-averaged cross spectra.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .fields import trapezoid_weights
from .records import CoefficientTrajectory, MeasurementRecord
from .sensors import SensorSuite

LSQ_RCOND = 1e-12
LSQ_COND_WARN = 1e12


class EstimatorError(ValueError):
    pass


def _offset(record: MeasurementRecord, offset) -> np.ndarray:
    if offset is None:
        return np.zeros(record.n_sensors)
    offset = np.asarray(offset, dtype=float).ravel()
    if offset.size != record.n_sensors:
        raise EstimatorError(f"offset has {offset.size} entries for {record.n_sensors} sensors")
    return offset


def _paired(training: CoefficientTrajectory, record: MeasurementRecord) -> None:
    if len(training) != len(record) or not np.allclose(training.times, record.times,
                                                       rtol=0, atol=1e-9 * (1 + np.abs(record.times).max())):
        raise EstimatorError("training coefficients and measurements must share sample times")


def _solve_spd(gram: np.ndarray, rhs: np.ndarray, labels) -> np.ndarray:
    """Solve the symmetric normal equations, naming the dependent regressors if singular."""
    lam, vec = linalg.eigh(gram)
    if lam[0] <= 1e-12 * max(lam[-1], np.finfo(float).tiny):
        null = vec[:, 0]
        involved = [labels[i] for i in np.flatnonzero(np.abs(null) > 1e-3 * np.abs(null).max())]
        raise EstimatorError(f"singular measurement covariance; linearly dependent: {', '.join(involved)}")
    return linalg.solve(gram, rhs, assume_a="pos")


# --- LSQ -------------------------------------------------------------------

def lsq_matrix(suite: SensorSuite) -> tuple[np.ndarray, float]:
    """Minimum-norm pseudoinverse of the mode response (N_r x N_s) and its condition number.

    The condition number is taken over all N_r columns, so it is infinite
    when there are fewer sensors than modes.
    """
    m = np.asarray(suite.mode_response)
    s = np.linalg.svd(m, compute_uv=False)
    if s.size < m.shape[1] or s[-1] == 0:
        cond = np.inf
    else:
        cond = float(s[0] / s[-1])
    return np.linalg.pinv(m, rcond=LSQ_RCOND), cond


def lsq_estimate(suite: SensorSuite, record: MeasurementRecord) -> CoefficientTrajectory:
    """Per-instant minimum-norm least-squares coefficients."""
    upsilon, cond = lsq_matrix(suite)
    notes = ()
    if cond > LSQ_COND_WARN:
        msg = (f"LSQ mode response is ill-conditioned (condition {cond:.3g}, "
               f"{suite.n_sensors} sensors for {upsilon.shape[0]} modes)")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes = (msg,)
    fp = record.values - suite.ref_offset
    return CoefficientTrajectory(record.times, fp @ upsilon.T, notes)


# --- LSE -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LseModel:
    """``alpha_j = sum_k lam[k, j] (f_k - offset_k)``."""

    lam: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.lam)):
            raise EstimatorError("non-finite LSE matrix")


def lse_fit(training: CoefficientTrajectory, record: MeasurementRecord, offset=None) -> LseModel:
    """Solve ``<alpha_j f_k> = sum_m lam[m, j] <f_m f_k>`` with trapezoidal time integrals."""
    _paired(training, record)
    off = _offset(record, offset)
    f = record.values - off
    w = trapezoid_weights(record.times)
    g = (f * w[:, None]).T @ f
    p = (f * w[:, None]).T @ training.values
    labels = [f"sensor {k + 1}" for k in range(f.shape[1])]
    return LseModel(_solve_spd(g, p, labels), off)


def lse_estimate(model: LseModel, record: MeasurementRecord) -> CoefficientTrajectory:
    return CoefficientTrajectory(record.times, (record.values - model.offset) @ model.lam)


# --- QSE -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QseModel:
    """``alpha_j = lam[k, j] f_k + omega[k, m, j] f_k f_m`` (offset-corrected f)."""

    lam: np.ndarray
    omega: np.ndarray
    offset: np.ndarray


def _quadratic_pairs(n_s: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n_s)


def qse_regressors(f: np.ndarray) -> np.ndarray:
    """``[f_k ; f_k f_m (k <= m)]`` per row; the regressor count grows as N_s^2."""
    i, j = _quadratic_pairs(f.shape[1])
    return np.hstack([f, f[:, i] * f[:, j]])


def qse_fit(training: CoefficientTrajectory, record: MeasurementRecord, offset=None) -> QseModel:
    _paired(training, record)
    off = _offset(record, offset)
    f = record.values - off
    n_s = f.shape[1]
    x = qse_regressors(f)
    w = trapezoid_weights(record.times)
    g = (x * w[:, None]).T @ x
    p = (x * w[:, None]).T @ training.values
    i, j = _quadratic_pairs(n_s)
    labels = [f"f{k + 1}" for k in range(n_s)] + [f"f{a + 1}*f{b + 1}" for a, b in zip(i, j)]
    theta = _solve_spd(g, p, labels)
    lam = theta[:n_s]
    omega = np.zeros((n_s, n_s, theta.shape[1]))
    for row, (a, b) in enumerate(zip(i, j)):
        c = theta[n_s + row]
        if a == b:
            omega[a, a] = c
        else:
            omega[a, b] = omega[b, a] = 0.5 * c
    return QseModel(lam, omega, off)


def qse_estimate(model: QseModel, record: MeasurementRecord) -> CoefficientTrajectory:
    f = record.values - model.offset
    return CoefficientTrajectory(record.times,
                                 f @ model.lam + np.einsum("tk,tm,kmj->tj", f, f, model.omega))


# --- SLSE ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SlseModel:
    """Per-bin transfer matrices ``gamma_hat[bin, k, j]`` on a DFT of ``training_length`` samples.

    Bins follow :func:`numpy.fft.fftfreq` order; ``gamma_hat[-nu]`` is the
    conjugate of ``gamma_hat[nu]``.
    """

    gamma_hat: np.ndarray
    frequencies: np.ndarray
    training_length: int
    dt: float
    offset: np.ndarray
    excluded_bins: tuple[int, ...] = field(default=())

    def kernel(self) -> np.ndarray:
        """Time-domain (circular) convolution kernel ``gamma[n, k, j]``."""
        return np.fft.ifft(self.gamma_hat, axis=0).real


def default_segment_length(n_samples: int, n_sensors: int = 1) -> int:
    """Longest segment giving at least ``max(4, 2 N_s)`` half-overlapping segments.

    Each segment adds one rank to the per-bin N_s x N_s cross-spectral
    matrix, so fewer segments than sensors leave every bin singular.
    """
    return max(2, int(min(0.4 * n_samples, 2 * n_samples / (2 * n_sensors + 1))))


def _segments(n: int, length: int) -> list[int]:
    hop = max(1, length // 2)
    return list(range(0, n - length + 1, hop))


def slse_fit(training: CoefficientTrajectory, record: MeasurementRecord, offset=None,
             segment_length: int | None = None) -> SlseModel:
    """Cross-spectral fit averaged over half-overlapping rectangular segments.

    Bins whose measurement cross-spectral matrix is numerically singular get
    a zero transfer matrix and are reported in ``excluded_bins``.
    """
    _paired(training, record)
    if not record.is_uniform():
        raise EstimatorError("SLSE needs uniformly sampled records")
    off = _offset(record, offset)
    f = record.values - off
    a = training.values
    n = len(record)
    length = segment_length or default_segment_length(n, f.shape[1])
    if length > n:
        raise EstimatorError(f"segment length {length} exceeds record length {n}")
    starts = _segments(n, length)
    n_s, n_r = f.shape[1], a.shape[1]
    nb = length // 2 + 1
    sff = np.zeros((nb, n_s, n_s), dtype=complex)
    sfa = np.zeros((nb, n_s, n_r), dtype=complex)
    for s in starts:
        fh = np.fft.rfft(f[s:s + length], axis=0)
        ah = np.fft.rfft(a[s:s + length], axis=0)
        sff += np.einsum("bk,bm->bkm", fh.conj(), fh)
        sfa += np.einsum("bk,bj->bkj", fh.conj(), ah)
    eig_max = np.array([np.linalg.eigvalsh(m)[-1] for m in sff])
    scale = eig_max.max() if eig_max.size else 0.0
    half = np.zeros((nb, n_s, n_r), dtype=complex)
    excluded = []
    for b in range(nb):
        ev = np.linalg.eigvalsh(sff[b])
        if scale <= 0 or ev[0] <= 1e-12 * scale:
            excluded.append(b)
            continue
        half[b] = linalg.solve(sff[b], sfa[b], assume_a="her")
    # real signals: DC and Nyquist transfers are real
    half[0] = half[0].real
    if length % 2 == 0:
        half[-1] = half[-1].real
    full = np.zeros((length, n_s, n_r), dtype=complex)
    full[:nb] = half
    tail = length - nb
    if tail > 0:
        full[nb:] = np.conj(half[1:1 + tail][::-1])
    if excluded:
        warnings.warn(f"SLSE: {len(excluded)} of {nb} frequency bins have a singular "
                      f"cross-spectral matrix and were excluded", RuntimeWarning, stacklevel=2)
    dt = float(np.mean(np.diff(record.times)))
    freqs = np.fft.fftfreq(length, d=dt)
    return SlseModel(full, freqs, length, dt, off, tuple(excluded))


def _blocks(n: int, length: int) -> list[int]:
    starts = list(range(0, n - length + 1, length))
    if starts[-1] + length < n:
        starts.append(n - length)
    return starts


def slse_estimate(model: SlseModel, record: MeasurementRecord) -> CoefficientTrajectory:
    """Apply the transfer matrices block by block (blocks of ``training_length`` samples)."""
    length = model.training_length
    n = len(record)
    if n < length:
        raise EstimatorError(f"record has {n} samples, SLSE needs at least {length}")
    if n > 1:
        dt = np.diff(record.times)
        if not record.is_uniform() or abs(dt.mean() - model.dt) > 1e-6 * model.dt:
            raise EstimatorError(f"record sampling must be uniform with dt = {model.dt}")
    f = record.values - model.offset
    half = model.gamma_hat[:length // 2 + 1]
    out = np.empty((n, model.gamma_hat.shape[2]))
    filled = np.zeros(n, dtype=bool)
    for s in _blocks(n, length):
        fh = np.fft.rfft(f[s:s + length], axis=0)
        est = np.fft.irfft(np.einsum("bkj,bk->bj", half, fh), n=length, axis=0)
        new = ~filled[s:s + length]
        out[s:s + length][new] = est[new]
        filled[s:s + length] = True
    return CoefficientTrajectory(record.times, out)
