"""OTFS modem: delay-Doppler <-> time-frequency <-> time-domain transforms.

Conventions used throughout the package:

* Delay-Doppler (DD) grids are (N, M) complex arrays; row index k is the
  Doppler bin, column index l is the delay bin.
* Time-frequency (TF) grids are (N, M) complex arrays; row index n is the
  OTFS symbol, column index m is the subcarrier.
* The ISFFT is unitary:  X[n,m] = (1/sqrt(NM)) sum_{k,l} x[k,l]
  exp(j2pi(nk/N - ml/M)).  sfft() is its exact inverse.
* The time frame carries one frame-level cyclic prefix: N_cp samples copied
  from the tail of the N*M-sample frame body.  Body sample i corresponds to
  time t = i*T_s; the prefix occupies t in [-N_cp*T_s, 0).
* heisenberg() synthesizes each symbol as the 1/M-scaled inverse DFT of its
  TF row (rectangular transmit pulse); wigner() is the matched plain-sum DFT,
  so wigner(heisenberg(X)) == X exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .errors import DimMismatch, LengthError

# =========================================================================
# Grid and signal containers
# =========================================================================


def _as_2d_complex(data, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.complex128)
    if arr.ndim != 2:
        raise DimMismatch(f"{what} must be a 2-D array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DDGrid:
    """Delay-Doppler grid: rows are Doppler bins k, columns are delay bins l."""

    data: np.ndarray  # (N, M) complex

    def __post_init__(self):
        object.__setattr__(self, "data", _as_2d_complex(self.data, "DDGrid"))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class TFGrid:
    """Time-frequency grid: rows are OTFS symbols n, columns are subcarriers m."""

    data: np.ndarray  # (N, M) complex

    def __post_init__(self):
        object.__setattr__(self, "data", _as_2d_complex(self.data, "TFGrid"))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class TimeSignal:
    """Sampled baseband signal, one row per stream.

    ``samples`` is (L,) for a single stream or (S, L) for S parallel streams
    (RF chains or antennas).  ``n_cp`` marks how many head samples are a
    cyclic prefix; body sample i sits at time t = i*T_s.  ``start_offset``
    records where the body's first sample sits on an absolute sample axis
    (pilot slot bookkeeping); the transforms here do not consume it.
    """

    samples: np.ndarray
    n_cp: int = 0
    start_offset: int = 0

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.complex128)
        if arr.ndim not in (1, 2):
            raise DimMismatch(f"TimeSignal must be 1-D or 2-D, got shape {arr.shape}")
        if self.n_cp < 0 or self.n_cp > arr.shape[-1]:
            raise LengthError(f"n_cp={self.n_cp} invalid for length {arr.shape[-1]}")
        object.__setattr__(self, "samples", arr)

    @property
    def body(self) -> np.ndarray:
        """Samples with the prefix stripped."""
        return self.samples[..., self.n_cp:]

    @property
    def n_streams(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[0]


# =========================================================================
# Array-level transforms (used internally by the heavier modules)
# =========================================================================


def isfft_array(dd: np.ndarray) -> np.ndarray:
    """Unitary inverse symplectic FFT on a bare (N, M) array."""
    dd = np.asarray(dd, dtype=np.complex128)
    n_rows, n_cols = dd.shape
    # sum_k x e^{+j2pi nk/N} == N * ifft over rows; sum_l x e^{-j2pi ml/M} == fft
    # over columns; total scale (1/sqrt(NM)) * N == sqrt(N/M).
    return np.sqrt(n_rows / n_cols) * np.fft.ifft(np.fft.fft(dd, axis=1), axis=0)


def sfft_array(tf: np.ndarray) -> np.ndarray:
    """Unitary symplectic FFT on a bare (N, M) array; exact inverse of isfft_array."""
    tf = np.asarray(tf, dtype=np.complex128)
    n_rows, n_cols = tf.shape
    return np.sqrt(n_cols / n_rows) * np.fft.fft(np.fft.ifft(tf, axis=1), axis=0)


# =========================================================================
# Public modem operations
# =========================================================================


def isfft(dd: DDGrid) -> TFGrid:
    """Map a DD grid to the TF grid with the unitary inverse symplectic FFT.

    Parameters
    ----------
    dd : DDGrid
        (N, M) delay-Doppler symbols.

    Returns
    -------
    TFGrid
        X[n,m] = (1/sqrt(NM)) sum_{k,l} x[k,l] exp(j2pi(nk/N - ml/M)).
    """
    return TFGrid(isfft_array(dd.data))


def sfft(tf: TFGrid) -> DDGrid:
    """Exact inverse of :func:`isfft`."""
    return DDGrid(sfft_array(tf.data))


def heisenberg(tf: TFGrid, cfg: SystemConfig) -> TimeSignal:
    """Synthesize the time frame from a TF grid (rectangular pulse).

    Each symbol n occupies M samples: s[n*M + q] = (1/M) sum_m X[n,m]
    exp(j2pi m q / M).  A single frame-level cyclic prefix of N_cp samples
    (a copy of the frame tail) is prepended, so consecutive symbols run
    back to back inside the frame.

    Parameters
    ----------
    tf : TFGrid
        (N, M) time-frequency symbols.
    cfg : SystemConfig
        Supplies N, M and N_cp.

    Returns
    -------
    TimeSignal
        Length N_cp + N*M, n_cp = cfg.N_cp.
    """
    if tf.shape != (cfg.N, cfg.M):
        raise DimMismatch(f"TF grid is {tf.shape}, config expects {(cfg.N, cfg.M)}")
    body = np.fft.ifft(tf.data, axis=1).reshape(-1)
    if cfg.N_cp:
        samples = np.concatenate([body[-cfg.N_cp:], body])
    else:
        samples = body
    return TimeSignal(samples, n_cp=cfg.N_cp)


def wigner(rx: TimeSignal, cfg: SystemConfig) -> TFGrid:
    """Matched-filter the received frame back to a TF grid.

    Strips the frame prefix, splits the body into N symbols of M samples and
    takes the plain-sum M-point DFT of each:  Y[n,m] = sum_q y[n*M+q]
    exp(-j2pi m q / M).  Combined with :func:`heisenberg` this is an exact
    identity on the TF grid.

    Parameters
    ----------
    rx : TimeSignal
        Single stream of at least n_cp + N*M samples.
    cfg : SystemConfig
        Supplies N, M.

    Returns
    -------
    TFGrid
    """
    if rx.samples.ndim != 1:
        raise DimMismatch("wigner expects a single-stream TimeSignal")
    body = rx.body
    if body.shape[-1] < cfg.N * cfg.M:
        raise LengthError(
            f"need {cfg.N * cfg.M} body samples, got {body.shape[-1]}"
        )
    frame = body[: cfg.N * cfg.M].reshape(cfg.N, cfg.M)
    return TFGrid(np.fft.fft(frame, axis=1))
