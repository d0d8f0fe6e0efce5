"""Wideband time-varying multipath channel with beam squint and Doppler squint.

Physical model
--------------
Each path p has gain ``a_p`` (alpha-tilde), delay ``tau_p``, Doppler ``nu_p``
and spatial direction ``psi_p = sin(theta_p)/2`` for a half-wavelength ULA.
Antenna ``a`` (0-based here) sees the extra travel time ``a*psi_p/f_c``
(beam squint), and motion turns the delay into a time-varying one,

    tau_{p,a}(t) = tau_{p,a} - (nu_p/f_c) * t        (Doppler squint),

so the baseband response to a tone at offset f is

    H_a(t, f) = sum_p a_p * exp(-j*2*pi*(f_c + f) * (tau_{p,a} - (nu_p/f_c)*t)).

Equivalently, in the time domain a path maps the transmit waveform s(t) to

    a_p * exp(-j*2*pi*f_c*tau_{p,a}) * exp(j*2*pi*nu_p*t) * s(t*r_p - tau_{p,a})

with time-dilation factor ``r_p = 1 + nu_p/f_c``.  `apply_channel` evaluates
this exactly for frame-structured input: each transmit window is a finite
Fourier series (see `otfs_squint.modem`), so the dilated source time lands in
some window and the series is evaluated there in closed form, via one chirp
z-transform per window row (the per-sample source-time drift is the CZT's
fractional frequency spacing).  No interpolation filter is involved.

Boundary caveat: output samples whose dilated source time precedes the frame
prefix are synthesized from the cyclic extension of the last window, which is
what the prefix itself repeats; for path delays within the prefix budget this
affects no body sample, only the first few prefix samples of the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import czt

from .config import SPEED_OF_LIGHT, SystemConfig
from .errors import LengthError, RangeError
from .modem import TimeSignal

__all__ = [
    "PathParams",
    "ChannelRealization",
    "sample_channel",
    "per_antenna_delay",
    "tf_response",
    "apply_channel",
    "dd_response",
    "dda_transform",
]


# =========================================================================
# Domain types
# =========================================================================


@dataclass(frozen=True)
class PathParams:
    """One propagation path of the multipath channel."""

    gain: complex  # linear amplitude before carrier rotation
    delay_s: float  # propagation delay of the reference antenna, seconds
    doppler_hz: float  # Doppler shift nu = v * f_c / v_l
    angle: float  # spatial direction psi = sin(theta)/2, in [-1/2, 1/2)
    velocity_mps: float = 0.0  # radial velocity, consistent with doppler_hz

    def __post_init__(self) -> None:
        if not -0.5 <= self.angle < 0.5:
            raise RangeError(f"spatial direction must lie in [-1/2, 1/2), got {self.angle}")
        if self.delay_s < 0.0:
            raise RangeError(f"path delay must be non-negative, got {self.delay_s}")

    def delay_samples(self, cfg: SystemConfig) -> float:
        """Delay of the reference antenna in samples (fractional)."""
        return self.delay_s / cfg.T_s

    def equivalent_gain(self, cfg: SystemConfig) -> complex:
        """Gain after carrier rotation, alpha = a * exp(-j*2*pi*f_c*tau)."""
        return self.gain * np.exp(-2j * np.pi * cfg.f_c * self.delay_s)

    def dilation(self, cfg: SystemConfig) -> float:
        """Source-time dilation factor r = 1 + nu/f_c."""
        return 1.0 + self.doppler_hz / cfg.f_c

    def gain_at_slot(self, cfg: SystemConfig, slot: int) -> complex:
        """Equivalent gain seen in pilot slot ``slot`` (1-based).

        Motion shrinks the delay slot by slot, so the carrier rotation
        advances by exp(j*2*pi*nu*(slot-1)*slot_len*T_s).
        """
        tau_g = self.delay_s - (self.doppler_hz / cfg.f_c) * (slot - 1) * cfg.slot_len * cfg.T_s
        return self.gain * np.exp(-2j * np.pi * cfg.f_c * tau_g)

    def delay_samples_at_slot(self, cfg: SystemConfig, slot: int) -> float:
        """Reference-antenna delay in samples as seen in pilot slot ``slot`` (1-based)."""
        return self.delay_samples(cfg) - (self.doppler_hz / cfg.f_c) * cfg.slot_len * (slot - 1)

    def to_mapping(self) -> dict:
        return {
            "gain": [float(np.real(self.gain)), float(np.imag(self.gain))],
            "delay_s": self.delay_s,
            "doppler_hz": self.doppler_hz,
            "angle": self.angle,
            "velocity_mps": self.velocity_mps,
        }

    @classmethod
    def from_mapping(cls, data: dict) -> "PathParams":
        re, im = data["gain"]
        return cls(
            gain=complex(re, im),
            delay_s=float(data["delay_s"]),
            doppler_hz=float(data["doppler_hz"]),
            angle=float(data["angle"]),
            velocity_mps=float(data.get("velocity_mps", 0.0)),
        )


@dataclass(frozen=True)
class ChannelRealization:
    """Sampled multipath channels for one or more users.

    ``users[u]`` is the path tuple of user u.  Gains are normalized per user
    so that sum_p |gain_p|^2 = 1.  Immutable, safe to share across threads.
    """

    users: tuple[tuple[PathParams, ...], ...]
    rng_seed: int | None = None

    def paths(self, user: int = 0) -> tuple[PathParams, ...]:
        return self.users[user]

    @property
    def n_users(self) -> int:
        return len(self.users)

    def to_mapping(self) -> dict:
        return {
            "rng_seed": self.rng_seed,
            "users": [[p.to_mapping() for p in paths] for paths in self.users],
        }

    @classmethod
    def from_mapping(cls, data: dict) -> "ChannelRealization":
        users = tuple(
            tuple(PathParams.from_mapping(p) for p in paths) for paths in data["users"]
        )
        return cls(users=users, rng_seed=data.get("rng_seed"))


# =========================================================================
# Channel sampling
# =========================================================================


def sample_channel(
    cfg: SystemConfig,
    n_paths: int,
    speed_mps: float,
    delay_range_samples: float,
    seed: int | None = None,
    n_users: int = 1,
    min_angle_sep: float | None = None,
    angle_range: float | None = None,
) -> ChannelRealization:
    """Draw a random multipath realization.

    Parameters
    ----------
    cfg : SystemConfig
    n_paths : int
        Paths per user, at least 1.
    speed_mps : float
        Radial speed magnitude; each path gets a uniform random sign.
    delay_range_samples : float
        Delays are uniform in [0, delay_range_samples] * T_s.  Must not
        exceed the frame prefix length so the prefix absorbs the spread.
    seed : int | None
        Seed for `numpy.random.default_rng`; fixed seed gives an identical
        realization.
    n_users : int
        Number of independent users to draw.
    min_angle_sep : float | None
        Minimum pairwise circular separation of the spatial directions.
        Defaults to two angle-DFT bins, 2/N_S, so that no two paths alias
        into the same sweep bin.  This is a simulation constraint that keeps
        paths resolvable, not a claim about physical channels.
    angle_range : float | None
        When given, spatial directions are confined to |psi| <= angle_range
        (sector-limited scattering); None draws over the full half-space.

    Returns
    -------
    ChannelRealization
    """
    if n_paths < 1:
        raise RangeError(f"need at least one path, got {n_paths}")
    if delay_range_samples > cfg.N_cp:
        raise RangeError(
            f"delay range {delay_range_samples} samples exceeds the prefix budget N_cp={cfg.N_cp}"
        )
    if min_angle_sep is None:
        min_angle_sep = 2.0 / cfg.N_S
    if (n_paths - 1) * min_angle_sep >= 1.0:
        raise RangeError(
            f"cannot place {n_paths} directions with circular separation {min_angle_sep}"
        )

    if angle_range is not None and not 0.0 < angle_range <= 0.5:
        raise RangeError(f"angle_range must lie in (0, 1/2], got {angle_range}")
    rng = np.random.default_rng(seed)
    users = []
    for _ in range(n_users):
        angles = _draw_separated_angles(rng, n_paths, min_angle_sep, angle_range=angle_range)
        delays = rng.uniform(0.0, delay_range_samples, size=n_paths) * cfg.T_s
        signs = np.where(rng.random(n_paths) < 0.5, -1.0, 1.0)
        gains = rng.normal(size=n_paths) + 1j * rng.normal(size=n_paths)
        gains = gains / np.linalg.norm(gains)  # sum_p |gain|^2 = 1 exactly
        paths = tuple(
            PathParams(
                gain=complex(gains[p]),
                delay_s=float(delays[p]),
                doppler_hz=float(signs[p] * speed_mps * cfg.f_c / cfg.v_l),
                angle=float(angles[p]),
                velocity_mps=float(signs[p] * speed_mps),
            )
            for p in range(n_paths)
        )
        users.append(paths)
    return ChannelRealization(users=tuple(users), rng_seed=seed)


def _draw_separated_angles(
    rng: np.random.Generator,
    n_paths: int,
    min_sep: float,
    max_tries: int = 1000,
    angle_range: float | None = None,
) -> np.ndarray:
    """Directions psi = sin(theta)/2 with theta uniform in [-90, 90) degrees
    (clipped to |psi| <= angle_range when given), redrawn until pairwise
    circular separation (period 1) is at least min_sep."""
    theta_max = np.pi / 2 if angle_range is None else np.arcsin(2.0 * angle_range)
    for _ in range(max_tries):
        theta = rng.uniform(-theta_max, theta_max, size=n_paths)
        psi = np.sin(theta) / 2.0
        if n_paths == 1:
            return psi
        diff = np.abs(psi[:, None] - psi[None, :])
        circ = np.minimum(diff, 1.0 - diff)
        if np.min(circ[np.triu_indices(n_paths, k=1)]) >= min_sep:
            return psi
    raise RangeError(
        f"failed to draw {n_paths} directions with separation {min_sep} in {max_tries} tries"
    )


# =========================================================================
# Analytic responses (test oracles)
# =========================================================================


def per_antenna_delay(path: PathParams, antenna: int, cfg: SystemConfig) -> float:
    """Delay seen by ``antenna`` (0-based): tau + antenna * psi / f_c."""
    return path.delay_s + antenna * path.angle / cfg.f_c


def tf_response(
    cfg: SystemConfig,
    paths: tuple[PathParams, ...],
    t: np.ndarray | float,
    f: np.ndarray | float,
    antenna: int = 0,
) -> np.ndarray:
    """Time-frequency response sum_p a_p exp(-j*2*pi*(f_c+f)*(tau_{p,a} - (nu_p/f_c) t)).

    ``t`` and ``f`` broadcast against each other.  Analytic oracle; the
    sampled chain is checked against it, not built from it.
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    out = np.zeros(np.broadcast(t, f).shape, dtype=complex)
    for p in paths:
        tau_a = per_antenna_delay(p, antenna, cfg)
        out = out + p.gain * np.exp(
            -2j * np.pi * (cfg.f_c + f) * (tau_a - (p.doppler_hz / cfg.f_c) * t)
        )
    return out


def dd_response(
    cfg: SystemConfig,
    paths: tuple[PathParams, ...],
    tau_grid: np.ndarray,
    nu_grid: np.ndarray,
    antenna: int = 0,
) -> np.ndarray:
    """Delay-Doppler response surface on (tau_grid, nu_grid), shape (n_tau, n_nu).

    A moving path contributes a unimodular-phase sheet of constant magnitude
    |f_c/nu_p| (its energy is smeared along a delay-Doppler line); a static
    path contributes an impulse, realized here as an indicator on the grid
    cell nearest to (tau_{p,a}, 0).
    """
    tau_grid = np.asarray(tau_grid, dtype=float)
    nu_grid = np.asarray(nu_grid, dtype=float)
    surface = np.zeros((tau_grid.size, nu_grid.size), dtype=complex)
    for p in paths:
        tau_a = per_antenna_delay(p, antenna, cfg)
        steer = p.equivalent_gain(cfg) * np.exp(-2j * np.pi * antenna * p.angle)
        if p.doppler_hz == 0.0:
            i_tau = int(np.argmin(np.abs(tau_grid - tau_a)))
            i_nu = int(np.argmin(np.abs(nu_grid)))
            surface[i_tau, i_nu] += steer
        else:
            ratio = cfg.f_c / p.doppler_hz
            phase = (tau_grid[:, None] - tau_a) * (nu_grid[None, :] - p.doppler_hz)
            surface += steer * abs(ratio) * np.exp(2j * np.pi * ratio * phase)
    return surface


def dda_transform(per_antenna: np.ndarray) -> np.ndarray:
    """Delay-Doppler-angle cube: normalized DFT across the antenna axis (axis 0).

    out[b, ...] = (1/sqrt(N_A)) * sum_a in[a, ...] * exp(j*2*pi*a*b/N_A).
    A path steered at psi concentrates near angle bin b = N_A*psi (mod N_A).
    """
    per_antenna = np.asarray(per_antenna)
    n_ant = per_antenna.shape[0]
    return np.sqrt(n_ant) * np.fft.ifft(per_antenna, axis=0)


# =========================================================================
# Exact frame-level channel application
# =========================================================================


def _window_boundaries(
    delay_samples: np.ndarray, dilation: float, cfg: SystemConfig
) -> np.ndarray:
    """First body-sample index of each window sourced from the window itself.

    Output sample q of window n sources dilated time i' = (n*M+q)*r - D.
    It reads its own window when i' >= n*M, i.e. q >= (D - n*M*(r-1))/r;
    earlier samples read the previous window (the prefix for n = 0).
    Returns an integer array of shape (len(delay_samples), N).
    """
    n_idx = np.arange(cfg.N, dtype=float)
    bound = (delay_samples[:, None] - n_idx[None, :] * cfg.M * (dilation - 1.0)) / dilation
    return np.ceil(bound).astype(np.int64)


def apply_channel(
    tx: TimeSignal,
    realization: ChannelRealization,
    cfg: SystemConfig,
    user: int = 0,
    *,
    noise: bool = False,
    seed: int | None = None,
    method: str = "czt",
) -> TimeSignal:
    """Propagate a per-antenna frame through the channel of one user.

    Parameters
    ----------
    tx : TimeSignal
        Frame-structured transmit signal; stream s feeds antenna s.  The
        body must hold N*M samples and the prefix must repeat the body tail
        (which `heisenberg` guarantees).
    realization : ChannelRealization
    cfg : SystemConfig
    user : int
        Which user's path set to apply.
    noise : bool
        Add complex white Gaussian noise of variance ``cfg.noise_var`` per
        output sample when True.
    seed : int | None
        Noise seed; fixed (input, realization, seed) gives a bit-identical
        output, so trials can run in parallel.
    method : str
        "czt" for the closed-form evaluator (default), "direct" for the slow
        per-window reference evaluation used to cross-check it.

    Returns
    -------
    TimeSignal
        Single received stream on the same sample grid as the input
        (prefix included).

    Raises
    ------
    LengthError
        If the body holds fewer than N*M samples.
    """
    samples = np.atleast_2d(tx.samples)
    n_ant = samples.shape[0]
    body = samples[:, tx.n_cp :]
    if body.shape[1] < cfg.N * cfg.M:
        raise LengthError(
            f"frame body holds {body.shape[1]} samples, need N*M = {cfg.N * cfg.M}"
        )
    body = body[:, : cfg.N * cfg.M]
    paths = realization.paths(user)
    n_cp = tx.n_cp

    if method == "czt":
        out = _apply_czt(body, paths, n_ant, n_cp, cfg)
    elif method == "direct":
        out = _apply_direct(body, paths, n_ant, n_cp, cfg)
    else:
        raise ValueError(f"unknown method {method!r}")

    if noise and cfg.noise_var > 0.0:
        rng = np.random.default_rng(seed)
        scale = math.sqrt(cfg.noise_var / 2.0)
        out = out + scale * (
            rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape)
        )
    return TimeSignal(samples=out, n_cp=n_cp)


def _apply_czt(
    body: np.ndarray,
    paths: tuple[PathParams, ...],
    n_ant: int,
    n_cp: int,
    cfg: SystemConfig,
) -> np.ndarray:
    """Closed-form evaluation: per path, combine antennas in the subcarrier
    domain, then one CZT per window branch with fractional spacing r."""
    N, M = cfg.N, cfg.M
    m_idx = np.arange(M)
    n_idx = np.arange(N)
    i_body = np.arange(N * M).reshape(N, M)
    # Window-wise finite Fourier coefficients of each antenna stream.
    X = np.fft.fft(body.reshape(n_ant, N, M), axis=2)

    y_body = np.zeros((N, M), dtype=complex)
    y_pre = np.zeros(n_cp, dtype=complex)
    for p in paths:
        r = p.dilation(cfg)
        ell = p.delay_samples(cfg)
        beta = p.angle / (cfg.f_c * cfg.T_s)  # beam-squint delay step, samples/antenna
        ants = np.arange(n_ant)
        d_ant = ell + ants * beta
        bounds = _window_boundaries(d_ant, r, cfg)  # (n_ant, N)
        nu_cps = p.doppler_hz * cfg.T_s  # Doppler in cycles/sample
        outer = p.equivalent_gain(cfg) * np.exp(2j * np.pi * nu_cps * i_body)
        w_czt = np.exp(2j * np.pi * r / M)

        # Row phase shared by every antenna: window drift n*M*(r-1) minus the
        # reference delay; the per-antenna part lives in the combining weights.
        row_phase = np.exp(
            2j * np.pi * m_idx[None, :] * (n_idx[:, None] * M * (r - 1.0) - ell) / M
        )

        # Antennas whose source time crosses the window boundary at the same
        # sample share one branch mask, so group them and combine per class.
        classes, inverse = np.unique(bounds, axis=0, return_inverse=True)
        for k in range(classes.shape[0]):
            sel = ants[inverse == k]
            weights = np.exp(-2j * np.pi * sel[:, None] * (p.angle + m_idx[None, :] * beta / M))
            mixed = np.einsum("am,anm->nm", weights, X[sel])
            # The row phase carries the receiving window's drift, so the
            # source rows are rolled before it is applied.
            v_ici = czt(mixed * row_phase, M, w=w_czt, a=1.0, axis=1)
            v_isi = czt(np.roll(mixed, 1, axis=0) * row_phase, M, w=w_czt, a=1.0, axis=1)
            q0 = np.clip(classes[k], 0, M)[:, None]  # (N, 1)
            val = np.where(m_idx[None, :] >= q0, v_ici, v_isi) / M
            y_body += outer * val

            if n_cp > 0:
                # Prefix region: dilated source time is always negative there,
                # so every sample reads the cyclic extension of the last window.
                pre_rows = mixed[N - 1, :] * np.exp(-2j * np.pi * m_idx * (ell + n_cp * r) / M)
                v_pre = czt(pre_rows, n_cp, w=w_czt, a=1.0)
                i_pre = np.arange(-n_cp, 0)
                y_pre += p.equivalent_gain(cfg) * np.exp(2j * np.pi * nu_cps * i_pre) * v_pre / M
    return np.concatenate([y_pre, y_body.reshape(-1)])


def _apply_direct(
    body: np.ndarray,
    paths: tuple[PathParams, ...],
    n_ant: int,
    n_cp: int,
    cfg: SystemConfig,
) -> np.ndarray:
    """Reference evaluation: per output sample, locate the dilated source time's
    window by floor division and evaluate that window's Fourier series.

    Independent of the CZT path (no branch masks, no row phases); used by
    tests to cross-check `_apply_czt` at small dimensions.
    """
    N, M = cfg.N, cfg.M
    m_idx = np.arange(M)
    X = np.fft.fft(body.reshape(n_ant, N, M), axis=2)
    i_out = np.arange(-n_cp, N * M, dtype=float)
    out = np.zeros(i_out.size, dtype=complex)
    for p in paths:
        r = p.dilation(cfg)
        beta = p.angle / (cfg.f_c * cfg.T_s)
        nu_cps = p.doppler_hz * cfg.T_s
        carrier = p.equivalent_gain(cfg) * np.exp(2j * np.pi * nu_cps * i_out)
        for a in range(n_ant):
            d_a = p.delay_samples(cfg) + a * beta
            src = i_out * r - d_a
            win = np.floor_divide(np.floor(src).astype(np.int64), M) % N
            tones = np.exp(2j * np.pi * np.outer(src, m_idx) / M)
            vals = np.einsum("lm,lm->l", X[a][win], tones) / M
            out += carrier * np.exp(-2j * np.pi * a * p.angle) * vals
    return out
