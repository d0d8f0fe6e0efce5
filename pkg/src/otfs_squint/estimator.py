"""Chirp-pilot estimation of path direction, delay, Doppler, and gain.

The uplink sounding protocol spends ``G = ceil(N_A / N_R)`` slots on an
up-chirp pilot while the receive array sweeps all ``N_S = G * N_R`` grid
directions (``N_R`` per slot, one per RF chain), then one final slot on a
down-chirp pilot with each chain steered back at a refined direction.
De-chirping a chain output and taking a length-M DFT collapses every
propagation path into a Dirichlet ridge whose peak index is a signed
linear combination of delay, Doppler, and direction:

    up slot g:     m = M*nu*T_s - (ell_g + t~/T_s + mean antenna delay)
    down slot G+1: m = M*nu*T_s + (ell_G1 + t~/T_s + mean antenna delay)

The delay enters the two laws with opposite signs while Doppler keeps its
sign, so the sum of the two measured peaks isolates Doppler and their
difference isolates delay; the slot gap between detection and the down
pilot adds a known delay drift that the closed forms undo.  Peaks are
refined to fractional bins by the three-point interpolator and then
polished to the exact magnitude maximum.  Directions are refined by
fitting measured magnitude patches across neighbouring sweep directions
against the synthesiser's own response to a unit probe path, since the
sweep network's per-direction delay-line settings rule out complex
interpolation there.  Both measured peaks are then calibrated against
the model probe at the fitted direction, which cancels every
direction-dependent term of the peak laws (the causality offset t~, the
delay-line fan, the in-group squint) before the closed-form inversion.

Received pilot slots are synthesised in closed form from the continuous
time model: because the chirp's prefix continues the quadratic phase law
to negative time, a delayed chirp is again an exact chirp expression for
every body sample, and each (path, chain, group) contributes a separable
product of a per-sample vector, a per-shifter vector, and a shared
rank-one coupling between the two.  No approximation is made beyond
sampling itself, so the synthesiser doubles as the reference physics for
the estimator tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .channel import ChannelRealization, PathParams
from .config import SystemConfig
from .errors import (
    DegenerateDenominator,
    DimMismatch,
    LengthError,
    NoPathDetected,
    ParseError,
    RangeError,
    ZeroGainError,
)
from .frontend import positivity_offset, sweep_config_down, sweep_config_up
from .modem import TimeSignal

__all__ = [
    "ChirpPilot",
    "DftAngleSequence",
    "PathEstimate",
    "gen_pilot",
    "dechirp_dft",
    "simulate_pilot_slot",
    "sweep_angles",
    "slot_and_chain",
    "detection_threshold",
    "detect_paths",
    "dirichlet_offset",
    "jacobsen",
    "peak_and_jacobsen",
    "polish_peak",
    "estimate_params",
    "estimate_gain",
    "run_estimation",
    "pilot_cost",
]

Direction = Literal["up", "down"]

# Jacobsen corrections are clamped just inside half a bin; past that the
# integer argmax itself would have landed on the neighbouring bin.
_JACOBSEN_CLAMP = float(np.nextafter(0.5, 0.0))


def _chirp_sign(direction: str) -> float:
    """+1 for the up chirp, -1 for the down chirp; rejects anything else."""
    if direction == "up":
        return 1.0
    if direction == "down":
        return -1.0
    raise ParseError(f"direction must be 'up' or 'down', got {direction!r}")


# =========================================================================
# Domain types
# =========================================================================


@dataclass(frozen=True)
class ChirpPilot:
    """One pilot slot's worth of unit-modulus chirp samples.

    ``samples`` holds the prefix followed by the M-sample body; the body
    obeys C[i] = exp(+-j*2*pi*kappa*i^2) and the prefix continues the same
    quadratic law to negative i, which is what makes a delayed chirp look
    like a (circularly) shifted chirp to the de-chirp stage.
    """

    samples: np.ndarray  # (N_cpp + M,) complex, |samples[i]| = 1
    direction: str  # "up" or "down"
    kappa: float  # chirp rate, 1/(2M)

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.complex128)
        if arr.ndim != 1:
            raise DimMismatch(f"pilot samples must be 1-D, got shape {arr.shape}")
        _chirp_sign(self.direction)
        body_len = round(1.0 / (2.0 * self.kappa))
        if arr.size < body_len:
            raise LengthError(
                f"pilot holds {arr.size} samples, shorter than its body length {body_len}"
            )
        if not np.allclose(np.abs(arr), 1.0, atol=1e-12):
            raise RangeError("pilot samples must be unit modulus")
        object.__setattr__(self, "samples", arr)

    @property
    def body_len(self) -> int:
        """Body length M, recovered from the chirp rate."""
        return round(1.0 / (2.0 * self.kappa))

    @property
    def n_cpp(self) -> int:
        """Prefix length in samples."""
        return self.samples.size - self.body_len

    @property
    def body(self) -> np.ndarray:
        """The M-sample chirp body, prefix stripped."""
        return self.samples[self.n_cpp :]

    def as_signal(self) -> TimeSignal:
        """The pilot as a single-stream `TimeSignal` with the prefix marked."""
        return TimeSignal(self.samples, n_cp=self.n_cpp)


@dataclass(frozen=True)
class DftAngleSequence:
    """De-chirped, DFT'd output of one RF chain at one sweep direction.

    ``values[j]`` is the bin at centred index m = j - M//2, normalised so a
    clean self-match gives |value| = 1 per receive antenna.
    """

    values: np.ndarray  # (M,) complex, index j <-> m = j - M//2
    sweep_angle: float  # steering direction psi-bar of the producing chain
    slot: int  # 1-based pilot slot index
    chain: int  # 0-based RF-chain index

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.complex128)
        if arr.ndim != 1:
            raise DimMismatch(f"sequence values must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise RangeError("sequence values must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def m_axis(self) -> np.ndarray:
        """Centred bin indices m = -M/2 .. M/2-1."""
        m_len = self.values.size
        return np.arange(m_len) - m_len // 2

    def value_at(self, m: int) -> complex:
        """Bin value at centred index ``m`` (cyclic, like the DFT itself)."""
        m_len = self.values.size
        return complex(self.values[(int(m) + m_len // 2) % m_len])


@dataclass(frozen=True)
class PathEstimate:
    """Closed-form parameter recovery for one detected path.

    ``m_up`` and ``m_down`` are the refined peaks exactly as measured
    (common TTD offset still folded in); ``nu_hat``/``ell_hat``/``alpha_hat``
    are referenced to the down-chirp slot (G+1, plus any extra slot gap),
    the most recent observation.
    """

    psi_hat: float  # spatial direction, in [-1/2, 1/2)
    m_up: float  # refined up-chirp peak, fractional bins
    m_down: float  # refined down-chirp peak, fractional bins
    nu_hat: float  # Doppler, Hz
    ell_hat: float  # delay at slot G+1, samples
    alpha_hat: complex  # equivalent gain at slot G+1
    detect_slot: int  # 1-based up-chirp slot of the detection
    detect_chain: int  # 0-based RF chain of the detection
    clamped: bool = False  # True when nu/ell hit their physical range
    fit_misfit: float = 0.0  # direction-fit residual (shape-only, 0 = exact)

    def __post_init__(self) -> None:
        if not -0.5 <= self.psi_hat < 0.5:
            raise RangeError(f"estimated direction must lie in [-1/2, 1/2), got {self.psi_hat}")


# =========================================================================
# Pilot generation and de-chirping
# =========================================================================


def gen_pilot(direction: str, cfg: SystemConfig) -> ChirpPilot:
    """Build the unit-modulus chirp pilot for one slot.

    Parameters
    ----------
    direction : {"up", "down"}
        Sign of the quadratic phase: up is exp(+j*2*pi*kappa*i^2), down its
        conjugate.
    cfg : SystemConfig
        Supplies the body length M, prefix length N_cpp, and chirp rate.

    Returns
    -------
    ChirpPilot
        N_cpp prefix samples followed by the M-sample body; the prefix is
        the body's own quadratic law continued to negative sample index.
    """
    sign = _chirp_sign(direction)
    idx = np.arange(-cfg.N_cpp, cfg.M, dtype=float)
    samples = np.exp(sign * 2j * np.pi * cfg.kappa * idx**2)
    return ChirpPilot(samples=samples, direction=direction, kappa=cfg.kappa)


def dechirp_dft(
    rx_chain: TimeSignal,
    direction: str,
    *,
    sweep_angle: float = 0.0,
    slot: int = 1,
    chain: int = 0,
) -> DftAngleSequence:
    """De-chirp one chain's slot body and DFT it over time.

    Multiplies the prefix-stripped body by the conjugate reference chirp,
    then evaluates R'[m] = (1/M) * sum_i rbar[i] * exp(-j*2*pi*m*i/M) on
    the centred bin axis m = -M/2 .. M/2-1.  A single path becomes a
    Dirichlet ridge of per-bin magnitude up to 1 per antenna summed into
    the chain.

    Parameters
    ----------
    rx_chain : TimeSignal
        Single-stream received slot; its ``body`` (prefix stripped) must
        have even length M.
    direction : {"up", "down"}
        Which pilot the slot carried, i.e. which reference to conjugate.
    sweep_angle, slot, chain
        Metadata copied onto the result for bookkeeping.

    Returns
    -------
    DftAngleSequence

    Raises
    ------
    DimMismatch
        If the signal holds more than one stream.
    LengthError
        If the body is empty or of odd length (the centred axis needs an
        even M).
    """
    if rx_chain.n_streams != 1:
        raise DimMismatch(f"de-chirp expects one stream, got {rx_chain.n_streams}")
    body = np.asarray(rx_chain.body, dtype=np.complex128)
    m_len = body.size
    if m_len == 0 or m_len % 2 != 0:
        raise LengthError(f"slot body must have even positive length, got {m_len}")
    sign = _chirp_sign(direction)
    kappa = 1.0 / (2.0 * m_len)
    idx = np.arange(m_len, dtype=float)
    dechirped = body * np.exp(-sign * 2j * np.pi * kappa * idx**2)
    values = np.fft.fftshift(np.fft.fft(dechirped)) / m_len
    return DftAngleSequence(values=values, sweep_angle=sweep_angle, slot=slot, chain=chain)


# =========================================================================
# Sweep bookkeeping
# =========================================================================


def sweep_angles(cfg: SystemConfig) -> np.ndarray:
    """The N_S grid directions psi-bar = -1/2 + phi/N_S, phi = 0..N_S-1."""
    return -0.5 + np.arange(cfg.N_S, dtype=float) / cfg.N_S


def slot_and_chain(phi: int, cfg: SystemConfig) -> tuple[int, int]:
    """Map grid index phi to its (1-based slot, 0-based chain) assignment."""
    return phi // cfg.N_R + 1, phi % cfg.N_R


def pilot_cost(cfg: SystemConfig) -> int:
    """Total pilot samples of one estimation round: (G+1) slots of M+N_cpp."""
    return (cfg.G + 1) * (cfg.M + cfg.N_cpp)


# =========================================================================
# Received-slot synthesis
# =========================================================================


def simulate_pilot_slot(
    paths: Sequence[PathParams],
    cfg: SystemConfig,
    slot: int,
    angles: np.ndarray | float,
    direction: str,
    *,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Post-combining body samples of one pilot slot, one row per RF chain.

    Evaluates the exact continuous-time model.  Path p reaches antenna
    a = d*N_P + s with delay tau_p(t) + a*psi_p/f_c where the bulk delay
    shrinks at rate nu_p/f_c; the chain's group-d delay line shifts the
    dilated waveform by a further t_cd.  For a chirp body the argument of
    the waveform stays a quadratic in the sample index even inside the
    prefix region (analytic continuation), so each (path, chain, group)
    reduces to

        prefactor * (shifter_vector @ coupling_matrix) * sample_vector

    with the rank-one coupling exp(-sign*4j*pi*kappa*r*beta*s*i) shared by
    all chains and groups of one path.

    Parameters
    ----------
    paths : sequence of PathParams
        The propagation paths (delays referenced to the slot-1 body start).
    cfg : SystemConfig
    slot : int
        1-based slot index; per-slot gain rotation and delay drift are
        applied internally.
    angles : float or (n_chains,) array
        Steering direction psi-bar of each chain this slot.
    direction : {"up", "down"}
        Which chirp the user transmits (selects the receive network's
        peak-alignment ramp sign and the quadratic phase sign).
    rng : numpy Generator, optional
        When given and ``cfg.noise_var`` > 0, adds per-antenna circular
        Gaussian noise of variance noise_var, combined through the same
        network phases as the signal (a pure delay leaves white noise
        white, so the delay lines act on noise as phase only).

    Returns
    -------
    (n_chains, M) complex ndarray
        Body samples after the analog combining network of each chain.
    """
    sign = _chirp_sign(direction)
    angle_arr = np.atleast_1d(np.asarray(angles, dtype=float))
    n_chains = angle_arr.size
    maker = sweep_config_up if direction == "up" else sweep_config_down
    net = maker(angle_arr, cfg, n_chains=n_chains)

    kappa = cfg.kappa
    i_idx = np.arange(cfg.M, dtype=float)
    s_idx = np.arange(cfg.N_P, dtype=float)
    out = np.zeros((n_chains, cfg.M), dtype=np.complex128)

    for path in paths:
        dil = path.dilation(cfg)  # r = 1 + nu/f_c
        beta = path.angle / (cfg.f_c * cfg.T_s)  # delay squint, samples/antenna
        ell_g = path.delay_samples_at_slot(cfg, slot)  # bulk delay at slot start
        alpha_g = path.gain_at_slot(cfg, slot)  # carrier-rotated gain at slot start
        nu_ts = path.doppler_hz * cfg.T_s  # Doppler, cycles/sample
        # Rank-one coupling between shifter index and sample index, from the
        # -2*r*i*(s*beta) cross term of the squared chirp argument.
        coupling = np.exp(sign * 2j * np.pi * kappa * (-2.0 * dil * beta) * np.outer(s_idx, i_idx))
        steer_s = np.exp(-2j * np.pi * s_idx * path.angle)
        for c in range(n_chains):
            for d in range(cfg.N_T):
                t_cd = net.ttd_delays[c, d]
                ell_t = t_cd / cfg.T_s  # delay-line shift, samples
                x_pd = ell_g + dil * ell_t + d * cfg.N_P * beta  # total shift of the chirp
                vec_i = np.exp(
                    2j * np.pi * nu_ts * i_idx
                    + sign * 2j * np.pi * kappa * (dil**2 * i_idx**2 - 2.0 * dil * x_pd * i_idx)
                )
                vec_s = (
                    steer_s
                    * np.exp(2j * np.pi * net.ps_phases[c, d])
                    * np.exp(
                        sign * 2j * np.pi * kappa * (2.0 * x_pd * s_idx * beta + (s_idx * beta) ** 2)
                    )
                )
                prefactor = (
                    alpha_g
                    * np.exp(-2j * np.pi * d * cfg.N_P * path.angle)
                    * np.exp(-2j * np.pi * cfg.f_c * t_cd)
                    * np.exp(-2j * np.pi * nu_ts * ell_t)
                    * np.exp(sign * 2j * np.pi * kappa * x_pd**2)
                )
                out[c] += prefactor * (vec_s @ coupling) * vec_i

    if rng is not None and cfg.noise_var > 0.0:
        scale = math.sqrt(cfg.noise_var / 2.0)
        noise = scale * (
            rng.standard_normal((cfg.N_A, cfg.M)) + 1j * rng.standard_normal((cfg.N_A, cfg.M))
        )
        # Combine antenna noise through the network's unit-modulus weights.
        weights = (
            np.exp(2j * np.pi * net.ps_phases)
            * np.exp(-2j * np.pi * cfg.f_c * net.ttd_delays)[:, :, None]
        ).reshape(n_chains, cfg.N_A)
        out += weights @ noise
    return out


# =========================================================================
# Detection
# =========================================================================


def _peak_fraction(values: np.ndarray) -> float:
    """Fraction of the sequence's total power held by its strongest bin."""
    power = np.abs(values) ** 2
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    return float(power.max() / total)


def detection_threshold(m_len: int, fa_rate: float = 1e-3) -> float:
    """Peak-power-fraction threshold for a target per-direction false alarm.

    Under noise alone the de-chirped DFT bins are i.i.d. complex Gaussian,
    and the probability that the strongest of M bins exceeds a fraction
    eta of the total power is M*(1-eta)^(M-1) to first order (higher terms
    are negligible for eta well above 1/M).  Inverting at ``fa_rate``:

        eta = 1 - (fa_rate / M)^(1/(M-1))
    """
    if not 0.0 < fa_rate < 1.0:
        raise RangeError(f"false-alarm rate must lie in (0, 1), got {fa_rate}")
    if m_len < 2:
        raise LengthError(f"need at least 2 bins, got {m_len}")
    return 1.0 - (fa_rate / m_len) ** (1.0 / (m_len - 1))


def detect_paths(sequences: Sequence[DftAngleSequence], eta: float) -> list[int]:
    """Indices of sweep directions whose peak-power fraction exceeds ``eta``.

    The statistic per direction is max_m |R'[m]|^2 / sum_m |R'[m]|^2: the
    ratio of the strongest bin's power to the sequence energy.  A path
    steers most of the energy into one Dirichlet ridge bin, while noise
    spreads it evenly, so the fraction separates the two without knowing
    the absolute noise level.  An empty result is valid (no direction
    fired).
    """
    return [i for i, seq in enumerate(sequences) if _peak_fraction(seq.values) > eta]


# =========================================================================
# Peak refinement
# =========================================================================


def dirichlet_offset(
    r_minus: complex, r_zero: complex, r_plus: complex, n_grid: int | None = None
) -> float:
    """Fractional offset of a Dirichlet-kernel peak from three magnitudes.

    For an N-element uniform array swept over an N-point direction grid,
    the response to a source offset by delta grid cells from beam k is
    |sin(pi*delta)| / (N*|sin(pi*(delta-k)/N)|): the numerator is shared by
    every beam, so the magnitude ratio q = |R_side| / |R_0| of the stronger
    neighbour depends on delta alone,

        q = sin(pi*delta/N) / sin(pi*(1-delta)/N)
        delta = (N/pi) * atan(q*sin(pi/N) / (1 + q*cos(pi/N)))

    which reduces to delta = q/(1+q) in the large-N limit (``n_grid`` None).
    Using magnitudes only makes the interpolator immune to the per-chain
    carrier phases of the delay lines, which scramble the phase
    relationship between neighbouring sweep directions; the ratio form is
    exact when the sweep grid has one direction per antenna.

    Returns the signed offset in grid cells, clamped to half a cell.
    """
    a_minus, a_zero, a_plus = abs(r_minus), abs(r_zero), abs(r_plus)
    side, a_side = (1.0, a_plus) if a_plus >= a_minus else (-1.0, a_minus)
    if a_zero == 0.0:
        return 0.0 if a_side == 0.0 else float(side * _JACOBSEN_CLAMP)
    q = a_side / a_zero
    if n_grid is None:
        delta = q / (1.0 + q)
    else:
        step = math.pi / n_grid
        delta = (1.0 / step) * math.atan2(q * math.sin(step), 1.0 + q * math.cos(step))
    return float(side * min(delta, _JACOBSEN_CLAMP))


def jacobsen(r_minus: complex, r_zero: complex, r_plus: complex) -> float:
    """Three-point fractional-bin correction, delta = -Re((R+ - R-)/(2R0 - R+ - R-)).

    Exact for a pure tone under the rectangular-window DFT up to the
    kernel's sidelobe interaction; the result is clamped to half a bin on
    either side because a larger true offset would have moved the integer
    argmax itself.

    Raises
    ------
    DegenerateDenominator
        When |2R0 - R+ - R-| < 1e-12 (flat triplet), so callers can fall
        back to the integer peak.
    """
    denom = 2.0 * r_zero - r_plus - r_minus
    if abs(denom) < 1e-12:
        raise DegenerateDenominator(f"flat peak triplet, |denominator| = {abs(denom):.3e}")
    delta = -((r_plus - r_minus) / denom).real
    return float(np.clip(delta, -_JACOBSEN_CLAMP, _JACOBSEN_CLAMP))


def peak_and_jacobsen(stack: np.ndarray, phi_idx: int) -> tuple[float, float]:
    """Refined (m_hat, psi_hat) from the sequence stack around one anchor.

    ``stack[phi, j]`` holds the DFT-angle sequences of all N_S sweep
    directions in grid order, centred bins j <-> m = j - M//2.  The integer
    argmax along row ``phi_idx`` (ties -> lowest index) is refined with its
    cyclic bin neighbours by the three-point interpolator; the direction
    is refined from the same bin of the two neighbouring sweep directions
    with the magnitude-ratio rule of `dirichlet_offset`, because those
    directions sample the array's Dirichlet beam pattern at 1/N_S spacing
    but with delay-line carrier phases that rule out complex
    interpolation.  A flat triplet falls back to the unrefined value.

    Returns
    -------
    (m_hat, psi_hat)
        Fractional peak bin as measured, and the path direction estimate
        psi_hat = -(psi_bar + delta/N_S) wrapped to [-1/2, 1/2); the sign
        flip is because a chain steered at psi-bar matches a path at
        -psi-bar.
    """
    stack = np.asarray(stack)
    if stack.ndim != 2:
        raise DimMismatch(f"sequence stack must be 2-D, got shape {stack.shape}")
    n_s, m_len = stack.shape
    row = stack[phi_idx]
    j_int = int(np.argmax(np.abs(row)))
    try:
        delta_m = jacobsen(row[(j_int - 1) % m_len], row[j_int], row[(j_int + 1) % m_len])
    except DegenerateDenominator:
        delta_m = 0.0
    m_hat = float(j_int - m_len // 2) + delta_m

    col = stack[:, j_int]
    delta_a = dirichlet_offset(
        col[(phi_idx - 1) % n_s], col[phi_idx], col[(phi_idx + 1) % n_s], n_s
    )
    psi_bar = -0.5 + phi_idx / n_s
    psi_hat = -(psi_bar + delta_a / n_s)
    psi_hat = (psi_hat + 0.5) % 1.0 - 0.5
    return m_hat, psi_hat


def polish_peak(values: np.ndarray, m_init: float) -> float:
    """Maximum-magnitude fractional peak of a DFT sequence near ``m_init``.

    The length-M DFT fixes the underlying sequence exactly, so its
    discrete-time Fourier transform can be evaluated at any fractional bin
    and maximised directly; this removes the residual bias of the
    three-point interpolator (sidelobe interaction of order 1/M), which a
    carrier-phase-accurate gain estimate cannot afford.  The search is a
    bounded scalar maximisation within half a bin of the initial guess,
    where the ridge magnitude is unimodal.

    Parameters
    ----------
    values : (M,) complex ndarray
        Centred-bin DFT values, index j <-> m = j - M//2.
    m_init : float
        Starting fractional bin (typically the Jacobsen-refined peak).

    Returns
    -------
    float
        The fractional bin that maximises the interpolated magnitude.
    """
    values = np.asarray(values, dtype=np.complex128)
    m_len = values.size
    body = m_len * np.fft.ifft(np.fft.ifftshift(values))
    i_idx = np.arange(m_len)

    def neg_power(m: float) -> float:
        tone = np.exp(-2j * np.pi * m * i_idx / m_len)
        return -abs(body @ tone) ** 2

    res = minimize_scalar(
        neg_power,
        bounds=(m_init - 0.5, m_init + 0.5),
        method="bounded",
        options={"xatol": 1e-9},
    )
    return float(res.x)


# =========================================================================
# Closed-form parameter recovery
# =========================================================================


def estimate_params(
    m_up: float,
    m_down: float,
    psi_hat: float,
    psi_bar: float,
    g: int,
    cfg: SystemConfig,
) -> tuple[float, float, bool]:
    """Invert the up/down peak laws into (Doppler, delay-at-slot-G+1).

    Both peaks must already have the common TTD offset removed (the caller
    adds t~/T_s to the up peak and subtracts it from the down peak).  With
    2*M*kappa = 1 the two laws read

        m_up   = M*nu*T_s - ell_g  - (N_P-1)*psi/(2 f_c T_s) - X
        m_down = M*nu*T_s + ell_G1 + (N_P-1)*psi/(2 f_c T_s)
        ell_G1 = ell_g - (nu/f_c)*(M+N_cpp)*N_g,   N_g = G - g + 1

    where X = (N_T-1)*(psi_bar+psi)*N_P/(2 f_c T_s) is the residual of
    sweeping on a grid (psi_bar is the detected grid direction, so
    psi_bar + psi is the off-grid remainder); the down slot steers at the
    refined direction, killing its X term.  Solving,

        nu  = (m_down + m_up + X) / (2*M*T_s - (M+N_cpp)*N_g/f_c)
        ell = (m_down - m_up)/2 - (N_P-1)*psi/(2 f_c T_s) - X/2
              - (M+N_cpp)*N_g*nu/(2 f_c)

    Parameters
    ----------
    m_up, m_down : float
        Refined peak bins, TTD offset removed.
    psi_hat : float
        Refined direction estimate.
    psi_bar : float
        Grid direction of the detecting chain.
    g : int
        1-based detection slot; ``g = G + 1`` gives a zero slot gap.
    cfg : SystemConfig

    Returns
    -------
    (nu_hat, ell_hat, clamped)
        Doppler in Hz, delay in samples at slot G+1, and whether either
        value had to be clamped to its physical range (delay to
        [0, N_cpp), Doppler to half a subcarrier spacing, the largest the
        Doppler grid represents without aliasing).
    """
    fc_ts = cfg.f_c * cfg.T_s
    n_g = cfg.G - g + 1
    # The remainder is a true-time quantity (it shifts delay lines, not
    # just carrier phases), so it must NOT be wrapped: a path anchored on
    # the circularly adjacent grid direction across the endfire seam
    # really does see a near-full-cycle delay fan.
    remainder = psi_bar + psi_hat
    cross = (cfg.N_T - 1) * remainder * cfg.N_P / (2.0 * fc_ts)
    denom = 2.0 * cfg.M * cfg.T_s - (cfg.M + cfg.N_cpp) * n_g / cfg.f_c
    nu_hat = (m_down + m_up + cross) / denom
    ell_hat = (
        0.5 * (m_down - m_up)
        - psi_hat * (cfg.N_P - 1) / (2.0 * fc_ts)
        - 0.5 * cross
        - (cfg.M + cfg.N_cpp) * n_g * nu_hat / (2.0 * cfg.f_c)
    )

    clamped = False
    nu_max = cfg.delta_f / 2.0
    if abs(nu_hat) > nu_max:
        nu_hat = math.copysign(nu_max, nu_hat)
        clamped = True
    if ell_hat < 0.0:
        ell_hat = 0.0
        clamped = True
    elif ell_hat >= cfg.N_cpp:
        ell_hat = float(np.nextafter(float(cfg.N_cpp), 0.0))
        clamped = True
    return float(nu_hat), float(ell_hat), clamped


def estimate_gain(
    down_sequence: DftAngleSequence,
    m_down: float,
    nu_hat: float,
    ell_hat: float,
    psi_hat: float,
    cfg: SystemConfig,
    *,
    down_slot: int | None = None,
    steer_dir: float | None = None,
) -> complex:
    """Recover the slot-G+1 equivalent gain from the down-chirp peak bin.

    The peak bin of an aligned chain equals the path gain times a known
    kernel: N_A antennas' worth of Dirichlet magnitude, the quadratic
    phase of the total shift (delay plus the common TTD offset), the
    half-window phase ramp of an off-bin peak, and the residual squint of
    the shifters.  Rather than multiplying printed correction factors,
    the kernel is evaluated exactly by synthesising the same down-chirp
    slot for a unit-gain probe path at the estimated (psi, nu, ell) and
    reading off the same bin, so

        alpha_hat = R_meas[m] / R_probe[m] * alpha_probe(G+1)

    which inverts every modelled factor at once and reduces to the
    closed-form division in the on-grid limit.

    Parameters
    ----------
    down_sequence : DftAngleSequence
        Measured down-chirp sequence of the chain steered at -psi_hat.
    m_down : float
        Refined down-chirp peak as measured; the bin read is its nearest
        integer.
    nu_hat, ell_hat, psi_hat : float
        Closed-form estimates; ell_hat is the slot-G+1 delay in samples.
    cfg : SystemConfig

    Raises
    ------
    ZeroGainError
        When the probe kernel at the peak bin is numerically zero, which
        signals inconsistent estimates rather than a weak path.
    """
    m_len = down_sequence.values.size
    j_int = (int(round(m_down)) + m_len // 2) % m_len
    r_meas = complex(down_sequence.values[j_int])

    # Probe path whose slot-G+1 delay equals ell_hat: undo the drift the
    # synthesiser will re-apply over the G slots before the down slot.
    drift_back = (nu_hat / cfg.f_c) * cfg.slot_len * cfg.G
    delay_ref = max((ell_hat + drift_back) * cfg.T_s, 0.0)
    probe = PathParams(gain=1.0, delay_s=delay_ref, doppler_hz=nu_hat, angle=psi_hat)
    body = simulate_pilot_slot([probe], cfg, cfg.G + 1, np.array([-psi_hat]), "down")
    ref_seq = dechirp_dft(TimeSignal(body[0]), "down")
    r_probe = complex(ref_seq.values[j_int])
    if abs(r_probe) < 1e-9 * cfg.N_A:
        raise ZeroGainError(
            f"probe kernel vanished at bin {j_int - m_len // 2} "
            f"(|R_probe| = {abs(r_probe):.3e}); estimates are inconsistent"
        )
    return complex(r_meas / r_probe * probe.gain_at_slot(cfg, cfg.G + 1))


# =========================================================================
# Full pipeline
# =========================================================================


def _direction_peak_shift(psi_path: float, psi_bar: float, cfg: SystemConfig) -> float:
    """Direction-dependent ridge shift of the de-chirped peak, in samples.

    Two contributions.  A chain steered at ``psi_bar`` receiving a path
    from ``psi_path`` leaves group d's ridge shifted by
    d*N_P*(psi_bar + psi_path)/(f_c*T_s) samples, so the aggregate peak
    sits near the fan's mean, the offset of group (N_T-1)/2; the fan is
    zero for a matched beam, but near the endfire seam a path can anchor
    on the circularly adjacent grid direction, where the physical sum
    approaches a full cycle and the fan spans samples.  Within a group
    the path's own squint shifts antenna s's ridge by s*psi/(f_c*T_s)
    samples, adding the in-group mean (N_P-1)/2 of that slope.
    """
    fan = 0.5 * (cfg.N_T - 1) * cfg.N_P * (psi_bar + psi_path)
    in_group = 0.5 * (cfg.N_P - 1) * psi_path
    return (fan + in_group) / (cfg.f_c * cfg.T_s)


def _beam_patch_model(
    psi_path: float,
    sweep_dirs: np.ndarray,
    ell0_samples: float,
    m_bins: np.ndarray,
    cfg: SystemConfig,
) -> np.ndarray:
    """|response| at centred bins ``m_bins`` of chains steered at
    ``sweep_dirs`` to a unit static path at direction ``psi_path``.

    Evaluates the same synthesiser that produces the measurements, so the
    across-direction magnitude profile is modelled exactly, including the
    per-direction delay-line settings and the residual squint that fills
    the array pattern's nulls.  Only a few DFT bins are needed, so the
    de-chirp and DFT collapse to one dot product per chain and bin;
    returns shape (n_dirs, n_bins).
    """
    angle = ((psi_path + 0.5) % 1.0) - 0.5
    probe = PathParams(gain=1.0, delay_s=ell0_samples * cfg.T_s, doppler_hz=0.0, angle=angle)
    bodies = simulate_pilot_slot([probe], cfg, 1, sweep_dirs, "up")
    i_idx = np.arange(cfg.M, dtype=float)
    tones = np.exp(
        -2j * np.pi * cfg.kappa * i_idx[:, None] ** 2
        - 2j * np.pi * np.asarray(m_bins)[None, :] * i_idx[:, None] / cfg.M
    )
    return np.abs(bodies @ tones) / cfg.M


def _model_peak(
    psi_hat: float, ell_ref: float, steer: float, direction: str, cfg: SystemConfig
) -> float:
    """Polished peak bin of a unit static probe at the fitted direction.

    Synthesises the same slot the measurement came from, but with a
    Doppler-free unit path at (``psi_hat``, ``ell_ref``), and polishes its
    de-chirped peak.  Subtracting this from the measured peak cancels
    every direction-dependent term of the peak law (common TTD offset,
    delay-line fan, in-group squint, and their curvature) exactly, leaving
    only the bulk-delay difference and the Doppler shift for the
    closed-form inversion.
    """
    probe = PathParams(gain=1.0, delay_s=ell_ref * cfg.T_s, doppler_hz=0.0, angle=psi_hat)
    body = simulate_pilot_slot([probe], cfg, 1, np.array([steer]), direction)[0]
    vals = dechirp_dft(TimeSignal(body), direction).values
    j_int = int(np.argmax(np.abs(vals)))
    try:
        delta = jacobsen(vals[(j_int - 1) % cfg.M], vals[j_int], vals[(j_int + 1) % cfg.M])
    except DegenerateDenominator:
        delta = 0.0
    return polish_peak(vals, float(j_int - cfg.M // 2) + delta)


def _refine_anchor(
    stack: np.ndarray, phi: int, t_tilde_samples: float, cfg: SystemConfig
) -> tuple[float, float, float, float]:
    """Refined (m_up, psi_hat, ell_ref, misfit) for one anchor direction.

    The peak bin is initialised by the three-point interpolator and then
    polished to the exact magnitude maximum (`polish_peak`).  The
    direction is recovered by fitting the measured magnitudes of the
    anchor and its four neighbouring sweep directions, read on a small
    patch of bins around the peak, against the synthesiser's own
    prediction for a unit path as a function of direction (shape-only, so
    the unknown gain drops out).  A three-point interpolator is hopeless
    here: near an on-grid direction the neighbours sit at pattern nulls
    that residual squint fills at the percent level, which the model fit
    captures exactly.  The patch (rather than a single bin per direction)
    matters near the endfire seam, where mismatched delay-line fans smear
    the neighbours' ridges over several bins and the smear shape itself
    is what separates a direction from its alias across +-1/2.  Each
    candidate direction carries its own coarse probe delay, the peak law
    inverted at the candidate with the Doppler term dropped, so the
    probe's ridge lands on the measured bins even though the delay fan
    moves the peak by whole samples across the seam.

    ``ell_ref`` is the fitted direction's probe delay, returned so the
    caller can calibrate the measured peaks against the same probe; the
    fit's residual misfit is returned so the caller can rank anchors that
    refined to the same direction.
    """
    row = stack[phi]
    m_len = row.size
    j_int = int(np.argmax(np.abs(row)))
    try:
        delta_m = jacobsen(row[(j_int - 1) % m_len], row[j_int], row[(j_int + 1) % m_len])
    except DegenerateDenominator:
        delta_m = 0.0
    m_up_meas = polish_peak(row, float(j_int - m_len // 2) + delta_m)

    ell_base = -(m_up_meas + t_tilde_samples)
    n_s = stack.shape[0]
    neighbours = [(phi + off) % n_s for off in (-2, -1, 0, 1, 2)]
    sweep_dirs = np.array([-0.5 + kk / n_s for kk in neighbours])
    bin_offsets = np.arange(-2, 3)
    m_bins = (j_int - m_len // 2) + bin_offsets
    cols = (j_int + bin_offsets) % m_len
    meas = np.abs(stack[np.ix_(neighbours, cols)])
    meas = meas / np.linalg.norm(meas)

    psi_bar_phi = -0.5 + phi / n_s
    psi_center = -psi_bar_phi
    half_span = 1.25 / n_s

    def probe_delay(angle: float) -> float:
        return max(ell_base - _direction_peak_shift(angle, psi_bar_phi, cfg), 0.0)

    def misfit(psi_cand: float) -> float:
        angle = ((psi_cand + 0.5) % 1.0) - 0.5
        model = _beam_patch_model(angle, sweep_dirs, probe_delay(angle), m_bins, cfg)
        norm = np.linalg.norm(model)
        if norm == 0.0:
            return float(np.sum(meas**2))
        return float(np.sum((meas - model / norm) ** 2))

    # Near the endfire seam the interval holds two wells: psi and its alias
    # across +-1/2, which steer identically at the carrier and differ only
    # through their delay fans; there the anchor itself can also land one
    # beam off, and the true well narrows to ~1e-4 with a shallower
    # magnitude-only twin beside it.  Zooming through successively finer
    # grids (span shrinks 6x per stage) keeps the search global at every
    # scale the landscape has, before the local solve finishes it off.
    center = psi_center
    half = half_span
    for _ in range(3):
        pts = np.linspace(center - half, center + half, 13)
        center = float(pts[int(np.argmin([misfit(x) for x in pts]))])
        half = float(pts[1] - pts[0])
    res = minimize_scalar(
        misfit,
        bounds=(center - half, center + half),
        method="bounded",
        options={"xatol": 1e-9},
    )
    psi_hat = (float(res.x) + 0.5) % 1.0 - 0.5
    return m_up_meas, psi_hat, probe_delay(psi_hat), float(res.fun)


def _non_max_suppress(metrics: np.ndarray, fired: list[int], n_keep: int) -> list[int]:
    """Keep fired directions that are cyclic local maxima, capped at n_keep.

    An off-grid path lights up to two adjacent directions; keeping only
    local maxima (ties break toward the lower index) merges them into one
    anchor.  If suppression empties a non-empty set (flat plateau), the
    single strongest direction is kept.
    """
    n_s = metrics.size
    anchors = [
        phi
        for phi in fired
        if metrics[phi] > metrics[(phi - 1) % n_s] and metrics[phi] >= metrics[(phi + 1) % n_s]
    ]
    if not anchors:
        anchors = [max(fired, key=lambda phi: (metrics[phi], -phi))]
    if len(anchors) > n_keep:
        anchors = sorted(sorted(anchors, key=lambda phi: -metrics[phi])[:n_keep])
    return anchors


def run_estimation(
    realization: ChannelRealization,
    cfg: SystemConfig,
    *,
    eta: float | None = None,
    fa_rate: float = 1e-3,
    seed: int | None = None,
    user: int = 0,
    extra_gap: int = 0,
) -> list[PathEstimate]:
    """Run the full two-phase estimation protocol for one user.

    Sweeps all N_S grid directions over G up-chirp slots, detects
    directions whose peak-power fraction clears the threshold, merges
    adjacent detections into at most N_R path anchors, refines each
    anchor's peak to the exact magnitude maximum and its direction by the
    array-model fit, merges anchors that refined to the same direction,
    then spends one down-chirp slot with each chain steered at a refined
    direction, calibrates both peaks against the array model, and inverts
    the calibrated pair into (nu, ell, alpha) per path.

    Parameters
    ----------
    realization : ChannelRealization
    cfg : SystemConfig
        ``noise_var`` sets the per-antenna measurement noise power.
    eta : float, optional
        Detection threshold; default is `detection_threshold`(M, fa_rate).
    fa_rate : float
        Per-direction false-alarm target used when ``eta`` is None.
    seed : int, optional
        Seed for the measurement-noise generator.
    user : int
        Which user's paths to estimate.
    extra_gap : int
        Extra idle slots between the up sweep and the down slot.  The
        channel keeps evolving through the idle slots, so this widens every
        path's up/down slot gap by the same amount (the gap otherwise
        depends only on which sweep slot detected the path).

    Returns
    -------
    list of PathEstimate
        One entry per anchor, ordered by grid direction.

    Raises
    ------
    NoPathDetected
        When no sweep direction clears the threshold.
    """
    if extra_gap < 0:
        raise RangeError(f"extra_gap must be non-negative, got {extra_gap}")
    paths = realization.paths(user)
    rng = np.random.default_rng(seed)
    grid = sweep_angles(cfg)
    if eta is None:
        eta = detection_threshold(cfg.M, fa_rate)

    sequences: list[DftAngleSequence] = []
    for g in range(1, cfg.G + 1):
        slot_dirs = grid[(g - 1) * cfg.N_R : g * cfg.N_R]
        bodies = simulate_pilot_slot(paths, cfg, g, slot_dirs, "up", rng=rng)
        for c in range(cfg.N_R):
            sequences.append(
                dechirp_dft(
                    TimeSignal(bodies[c]),
                    "up",
                    sweep_angle=float(slot_dirs[c]),
                    slot=g,
                    chain=c,
                )
            )

    fired = detect_paths(sequences, eta)
    if not fired:
        raise NoPathDetected(f"no sweep direction cleared eta = {eta:.4f}")
    # Rank by peak amplitude, not peak fraction: the fraction is the right
    # scale-free detection statistic, but it saturates near 1 for any
    # direction dominated by a single ridge, so beam sidelobes would tie
    # with true mainlobes.  Amplitude ranks mainlobes first.
    metrics = np.array([float(np.max(np.abs(seq.values))) for seq in sequences])
    anchors = _non_max_suppress(metrics, fired, cfg.N_R)

    stack = np.stack([seq.values for seq in sequences])
    t_tilde_samples = positivity_offset(cfg) / cfg.T_s
    candidates = []  # (phi, m_up, psi_hat, ell_ref, fit_misfit)
    for phi in anchors:
        m_up_meas, psi_hat, ell_ref, fit_misfit = _refine_anchor(
            stack, phi, t_tilde_samples, cfg
        )
        candidates.append((phi, m_up_meas, psi_hat, ell_ref, fit_misfit))

    # A path halfway between two grid directions can fire both as separate
    # local maxima; the weaker anchor then refines toward the same
    # direction but pinned at its search span's edge.  Merge refined
    # directions closer than half a sweep cell, keeping the better fit.
    refined: list[tuple[int, float, float, float]] = []  # (phi, m_up, psi_hat, ell_ref)
    for phi, m_up_meas, psi_hat, ell_ref, _ in sorted(candidates, key=lambda t: t[4]):
        near = any(
            abs(((psi_hat - kept + 0.5) % 1.0) - 0.5) < 0.5 / cfg.N_S
            for (_, _, kept, _) in refined
        )
        if not near:
            refined.append((phi, m_up_meas, psi_hat, ell_ref))
    refined.sort(key=lambda t: t[0])

    # One down-chirp slot; chain k steers at minus the k-th refined direction.
    down_slot = cfg.G + 1 + extra_gap
    down_dirs = np.array([-psi for (_, _, psi, _) in refined])
    down_bodies = simulate_pilot_slot(paths, cfg, down_slot, down_dirs, "down", rng=rng)

    estimates: list[PathEstimate] = []
    for k, (phi, m_up_meas, psi_hat, ell_ref) in enumerate(refined):
        down_seq = dechirp_dft(
            TimeSignal(down_bodies[k]),
            "down",
            sweep_angle=float(down_dirs[k]),
            slot=down_slot,
            chain=k,
        )
        vals = down_seq.values
        j_int = int(np.argmax(np.abs(vals)))
        try:
            delta = jacobsen(
                vals[(j_int - 1) % cfg.M], vals[j_int], vals[(j_int + 1) % cfg.M]
            )
        except DegenerateDenominator:
            delta = 0.0
        m_down_meas = polish_peak(vals, float(j_int - cfg.M // 2) + delta)

        g, c = slot_and_chain(phi, cfg)
        # Calibrate both peaks against the exact array model at the fitted
        # direction (`_model_peak`): the residuals carry only the bulk
        # delay and the Doppler shift, so the closed-form inversion runs
        # with no direction terms left.
        m_up_cal = (
            m_up_meas - _model_peak(psi_hat, ell_ref, float(grid[phi]), "up", cfg) - ell_ref
        )
        m_down_cal = (
            m_down_meas - _model_peak(psi_hat, ell_ref, -psi_hat, "down", cfg) + ell_ref
        )
        nu_hat, ell_hat, clamped = estimate_params(
            m_up_cal, m_down_cal, 0.0, 0.0, g - extra_gap, cfg
        )
        alpha_hat = estimate_gain(down_seq, m_down_meas, nu_hat, ell_hat, psi_hat, cfg)
        estimates.append(
            PathEstimate(
                psi_hat=psi_hat,
                m_up=m_up_meas,
                m_down=m_down_meas,
                nu_hat=nu_hat,
                ell_hat=ell_hat,
                alpha_hat=alpha_hat,
                detect_slot=g,
                detect_chain=c,
                clamped=clamped,
            )
        )
    return estimates
