"""True-time-delay plus phase-shifter analog network.

Each RF chain feeds all N_A antennas through N_T delay lines (one per group
of N_P adjacent antennas) and one phase shifter per antenna.  Antenna
``a = d*N_P + s`` (0-based group d, in-group position s) carries

    s_a(t) = sum_c s~_c(t - t_{c,d}) * exp(-j*2*pi*f_c*t_{c,d}) * exp(j*2*pi*Psi_{c,d,s}),

i.e. the baseband equivalent of an RF delay line: the waveform shift comes
with the carrier-phase rotation exp(-j*2*pi*f_c*t).  The receive network is
the mirror image (same delays and phases, antennas summed per chain).  Both
directions apply the delay with the channel model's window-exact primitive:
the signal body is treated as consecutive length-M Fourier-series windows
(a frame's symbols, or a single pilot slot), which is exact as long as the
prefix repeats the body tail.

Delays generated here are in seconds; phase shifts are stored in cycles
modulo 1.  Every generated delay includes the fixed positivity offset
t~ = (N_T-1)*N_P/(2*f_c), the largest advance any setting below could
request over the angle range [-1/2, 1/2); being common to all lines it only
delays the aggregate signal by a known constant that receivers compensate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SystemConfig
from .errors import DimMismatch
from .modem import TimeSignal

__all__ = [
    "AnalogConfig",
    "positivity_offset",
    "apply_tx",
    "apply_rx",
    "sweep_config_up",
    "sweep_config_down",
    "precode_config",
]


# =========================================================================
# Configuration
# =========================================================================


@dataclass(frozen=True)
class AnalogConfig:
    """Settings of the TTD/PS network.

    ``ttd_delays``: (N_R, N_T) seconds, delay of group d's line from chain c.
    ``ps_phases``: (N_R, N_T, N_P) cycles, shifter of antenna (d, s) from
    chain c, stored modulo 1.
    """

    ttd_delays: np.ndarray
    ps_phases: np.ndarray

    def __post_init__(self) -> None:
        ttd = np.asarray(self.ttd_delays, dtype=float)
        ps = np.mod(np.asarray(self.ps_phases, dtype=float), 1.0)
        if ttd.ndim != 2:
            raise DimMismatch(f"ttd_delays must be (N_R, N_T), got shape {ttd.shape}")
        if ps.ndim != 3 or ps.shape[:2] != ttd.shape:
            raise DimMismatch(
                f"ps_phases must be (N_R, N_T, N_P) matching ttd {ttd.shape}, got {ps.shape}"
            )
        object.__setattr__(self, "ttd_delays", ttd)
        object.__setattr__(self, "ps_phases", ps)

    @property
    def n_chains(self) -> int:
        return self.ttd_delays.shape[0]

    @property
    def n_groups(self) -> int:
        return self.ttd_delays.shape[1]

    @property
    def n_per_group(self) -> int:
        return self.ps_phases.shape[2]

    @property
    def n_antennas(self) -> int:
        return self.n_groups * self.n_per_group

    @classmethod
    def zero(cls, cfg: SystemConfig, n_chains: int | None = None) -> "AnalogConfig":
        """All-zero network: every antenna repeats every chain unchanged."""
        n_chains = cfg.N_R if n_chains is None else n_chains
        return cls(
            ttd_delays=np.zeros((n_chains, cfg.N_T)),
            ps_phases=np.zeros((n_chains, cfg.N_T, cfg.N_P)),
        )

    def quantized(self, step_s: float) -> "AnalogConfig":
        """Delays rounded to multiples of ``step_s`` (robustness studies only)."""
        return AnalogConfig(
            ttd_delays=np.round(self.ttd_delays / step_s) * step_s,
            ps_phases=self.ps_phases,
        )


def positivity_offset(cfg: SystemConfig) -> float:
    """Common delay offset t~ = (N_T-1)*N_P/(2*f_c) keeping every line causal."""
    return (cfg.N_T - 1) * cfg.N_P / (2.0 * cfg.f_c)


# =========================================================================
# Config generators
# =========================================================================


def _per_chain(angle: float | np.ndarray, n_chains: int) -> np.ndarray:
    out = np.broadcast_to(np.asarray(angle, dtype=float), (n_chains,)).copy()
    return out


def sweep_config_up(
    angle: float | np.ndarray, cfg: SystemConfig, n_chains: int | None = None
) -> AnalogConfig:
    """Receive-sweep settings for the up-chirp pilot slot.

    ``angle`` is the sweep direction psi-bar of each chain (scalar broadcasts
    to all chains).  Group d is delayed by (d-1) in-group spans so the whole
    array despins a plane wave from -angle across the band, and the in-group
    shifters carry a slightly widened slope, (1 + kappa*(M-1)/(T_s*f_c)),
    which aligns the residual angle-dependent phase of the de-chirped peak
    bin so all shifters add coherently there.
    """
    n_chains = cfg.N_R if n_chains is None else n_chains
    psi = _per_chain(angle, n_chains)
    tilt = 1.0 + cfg.kappa * (cfg.M - 1) / (cfg.T_s * cfg.f_c)
    return _steering_config(psi, tilt, cfg)


def sweep_config_down(
    angle: float | np.ndarray, cfg: SystemConfig, n_chains: int | None = None
) -> AnalogConfig:
    """Receive-sweep settings for the down-chirp pilot slot.

    Mirror of `sweep_config_up` with the peak-alignment ramp sign flipped,
    (1 - kappa*(M-1)/(T_s*f_c)), because de-chirping against a down chirp
    mirrors the peak's residual phase slope.
    """
    n_chains = cfg.N_R if n_chains is None else n_chains
    psi = _per_chain(angle, n_chains)
    tilt = 1.0 - cfg.kappa * (cfg.M - 1) / (cfg.T_s * cfg.f_c)
    return _steering_config(psi, tilt, cfg)


def _steering_config(psi: np.ndarray, tilt: float, cfg: SystemConfig) -> AnalogConfig:
    d_idx = np.arange(cfg.N_T)
    s_idx = np.arange(cfg.N_P)
    ttd = positivity_offset(cfg) + d_idx[None, :] * cfg.N_P * psi[:, None] / cfg.f_c
    ps = -s_idx[None, None, :] * tilt * psi[:, None, None] * np.ones((1, cfg.N_T, 1))
    return AnalogConfig(ttd_delays=ttd, ps_phases=ps)


def precode_config(
    angle: float | np.ndarray, cfg: SystemConfig, n_chains: int | None = None
) -> AnalogConfig:
    """Transmit settings steering chain c onto its path's direction ``angle[c]``.

    The group delay -(d-1)*N_P*angle/f_c (plus the common positivity offset)
    cancels the antenna-by-antenna arrival-delay ramp across groups, so the
    beam points at the same direction on every subcarrier; the shifters
    (s-1)*angle handle the residual in-group steering.
    """
    n_chains = cfg.N_R if n_chains is None else n_chains
    psi = _per_chain(angle, n_chains)
    d_idx = np.arange(cfg.N_T)
    s_idx = np.arange(cfg.N_P)
    ttd = positivity_offset(cfg) - d_idx[None, :] * cfg.N_P * psi[:, None] / cfg.f_c
    ps = s_idx[None, None, :] * psi[:, None, None] * np.ones((1, cfg.N_T, 1))
    return AnalogConfig(ttd_delays=ttd, ps_phases=ps)


# =========================================================================
# Network application
# =========================================================================


def _static_delay(
    samples: np.ndarray, n_cp: int, window: int, t_samples: float, carrier_cycles: float
) -> np.ndarray:
    """Delay (..., L) streams by ``t_samples`` with the window-exact primitive.

    The body is consecutive length-``window`` Fourier-series windows; sample
    values move to the delayed source position with each window wrapping into
    its neighbour, and the prefix refills from the matching window edge.
    The carrier rotation exp(-j*2*pi*carrier_cycles) multiplies everything.
    """
    body = samples[..., n_cp:]
    n_win = body.shape[-1] // window
    rows = body.reshape(*body.shape[:-1], n_win, window)
    m_idx = np.arange(window)
    spec = np.fft.fft(rows, axis=-1) * np.exp(-2j * np.pi * m_idx * t_samples / window)
    here = np.fft.ifft(spec, axis=-1)  # window's own series at q - t
    prev = np.roll(here, 1, axis=-2)
    nxt = np.roll(here, -1, axis=-2)
    q0 = math.ceil(t_samples)
    q1 = math.ceil(window + t_samples)
    out_body = np.where(m_idx < q0, prev, np.where(m_idx >= q1, nxt, here))
    out_body = out_body.reshape(*body.shape[:-1], n_win * window)
    if n_cp:
        tail = np.arange(window - n_cp, window)
        src_sign = (tail - window) - t_samples  # source time of each prefix sample
        out_pre = np.where(src_sign < 0, here[..., -1, tail], here[..., 0, tail])
        out = np.concatenate([out_pre, out_body], axis=-1)
    else:
        out = out_body
    return np.exp(-2j * np.pi * carrier_cycles) * out


def _check_streams(sig: TimeSignal, expect: int, what: str, cfg: SystemConfig) -> np.ndarray:
    samples = np.atleast_2d(sig.samples)
    if samples.shape[0] != expect:
        raise DimMismatch(f"{what} expects {expect} streams, got {samples.shape[0]}")
    if (samples.shape[1] - sig.n_cp) % cfg.M != 0:
        raise DimMismatch(
            f"body length {samples.shape[1] - sig.n_cp} is not a multiple of M={cfg.M}"
        )
    return samples


def apply_tx(rf: TimeSignal, analog: AnalogConfig, cfg: SystemConfig) -> TimeSignal:
    """Fan N_R chain signals out to N_A antenna streams through the network.

    Antenna a = d*N_P + s carries sum_c of chain c delayed by t_{c,d} (with
    its carrier rotation) and rotated by shifter Psi_{c,d,s}.

    Raises DimMismatch if the stream count differs from the config's chain
    count or the body is not whole windows.
    """
    samples = _check_streams(rf, analog.n_chains, "apply_tx", cfg)
    delayed = np.empty(
        (analog.n_chains, analog.n_groups, samples.shape[1]), dtype=complex
    )
    for c in range(analog.n_chains):
        for d in range(analog.n_groups):
            t = analog.ttd_delays[c, d]
            delayed[c, d] = _static_delay(
                samples[c], rf.n_cp, cfg.M, t / cfg.T_s, cfg.f_c * t
            )
    phases = np.exp(2j * np.pi * analog.ps_phases)  # (N_R, N_T, N_P)
    out = np.einsum("cdl,cds->dsl", delayed, phases)
    out = out.reshape(analog.n_antennas, samples.shape[1])
    return TimeSignal(out, n_cp=rf.n_cp, start_offset=rf.start_offset)


def apply_rx(antennas: TimeSignal, analog: AnalogConfig, cfg: SystemConfig) -> TimeSignal:
    """Combine N_A antenna streams down to N_R chain signals (mirror network).

    Chain c collects every antenna (d, s) rotated by Psi_{c,d,s}, delayed by
    t_{c,d} with its carrier rotation, and summed.
    """
    samples = _check_streams(antennas, analog.n_antennas, "apply_rx", cfg)
    groups = samples.reshape(analog.n_groups, analog.n_per_group, samples.shape[1])
    phases = np.exp(2j * np.pi * analog.ps_phases)
    mixed = np.einsum("dsl,cds->cdl", groups, phases)
    out = np.zeros((analog.n_chains, samples.shape[1]), dtype=complex)
    for c in range(analog.n_chains):
        for d in range(analog.n_groups):
            t = analog.ttd_delays[c, d]
            out[c] += _static_delay(
                mixed[c, d], antennas.n_cp, cfg.M, t / cfg.T_s, cfg.f_c * t
            )
    return TimeSignal(out, n_cp=antennas.n_cp, start_offset=antennas.start_offset)
