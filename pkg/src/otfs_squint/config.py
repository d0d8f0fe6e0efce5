"""System configuration for the wideband massive MIMO-OTFS link simulator.

A single frozen dataclass carries every dimensioning parameter. Derived
quantities (sample period, chirp rate, sweep-grid size, ...) are exposed as
properties so they can never drift out of sync with the primary fields.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

from .errors import DivisibilityError, ParseError, RangeError

# Propagation speed of the carrier medium [m/s].
SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class SystemConfig:
    """Static link parameters.

    Defaults are the desk-scale setup used by the experiment harness: they
    keep the full wideband geometry (1.024 GHz of bandwidth across a 64
    element array) while shrinking the frame so a Monte Carlo trial runs in
    milliseconds. ``full_scale()`` restores the large frame.
    """

    f_c: float = 30e9        # carrier frequency [Hz]
    delta_f: float = 4e6     # subcarrier spacing [Hz]
    M: int = 256             # subcarriers per symbol == delay bins per frame
    N: int = 16              # symbols per frame == Doppler bins per frame
    N_A: int = 64            # BS antennas, half-wavelength uniform linear array
    N_R: int = 4             # RF chains
    N_T: int = 8             # true-time-delay lines per RF chain
    N_cp: int = 16           # frame-level cyclic prefix [samples]
    N_cpp: int = 16          # chirp-periodic prefix per pilot slot [samples]
    noise_var: float = 0.0   # per-antenna complex noise variance [linear]
    v_l: float = SPEED_OF_LIGHT  # propagation speed [m/s]

    def __post_init__(self) -> None:
        for name in ("f_c", "delta_f", "v_l"):
            if not getattr(self, name) > 0.0:
                raise RangeError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("M", "N", "N_A", "N_R", "N_T"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise RangeError(f"{name} must be a positive integer, got {value!r}")
        for name in ("N_cp", "N_cpp"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise RangeError(f"{name} must be a non-negative integer, got {value!r}")
        if self.noise_var < 0.0:
            raise RangeError(f"noise_var must be non-negative, got {self.noise_var!r}")
        if self.M % 2 != 0:
            raise RangeError(f"M must be even so the DFT bin grid is symmetric, got {self.M}")
        if self.N_A % self.N_T != 0:
            raise DivisibilityError(
                f"N_T={self.N_T} must divide N_A={self.N_A} "
                f"(each TTD line feeds N_A/N_T phase shifters)"
            )
        if self.N_R > self.N_A:
            raise RangeError(f"N_R={self.N_R} cannot exceed N_A={self.N_A}")

    # --- derived dimensions ---------------------------------------------

    @property
    def N_P(self) -> int:
        """Phase shifters per TTD line."""
        return self.N_A // self.N_T

    @property
    def bandwidth(self) -> float:
        """Occupied bandwidth M * delta_f [Hz]."""
        return self.M * self.delta_f

    @property
    def T_s(self) -> float:
        """Sample period 1 / bandwidth [s]."""
        return 1.0 / self.bandwidth

    @property
    def T(self) -> float:
        """Symbol duration 1 / delta_f == M * T_s [s]."""
        return 1.0 / self.delta_f

    @property
    def kappa(self) -> float:
        """Chirp rate in cycles per sample squared; 2 * M * kappa == 1 exactly."""
        return 1.0 / (2 * self.M)

    @property
    def G(self) -> int:
        """Number of up-chirp sweep slots, ceil(N_A / N_R)."""
        return -(-self.N_A // self.N_R)

    @property
    def N_S(self) -> int:
        """Sweep grid size G * N_R (>= N_A)."""
        return self.G * self.N_R

    @property
    def frame_len(self) -> int:
        """Samples per transmitted frame including the frame-level CP."""
        return self.N_cp + self.N * self.M

    @property
    def slot_len(self) -> int:
        """Samples per pilot slot including the chirp-periodic prefix."""
        return self.M + self.N_cpp

    # --- physics helpers --------------------------------------------------

    def doppler_hz(self, speed_mps: float) -> float:
        """Maximum Doppler shift for a terminal moving at ``speed_mps``."""
        return self.f_c * speed_mps / self.v_l

    # --- construction -----------------------------------------------------

    @classmethod
    def full_scale(cls, **overrides) -> "SystemConfig":
        """Large-frame configuration (2048 x 128 grid, 500 kHz spacing)."""
        params = dict(f_c=30e9, delta_f=500e3, M=2048, N=128,
                      N_A=64, N_R=4, N_T=8, N_cp=16, N_cpp=16)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SystemConfig":
        """Build a config from a JSON-compatible key/value mapping.

        Unknown keys and values of the wrong type raise ParseError; range
        violations surface as RangeError / DivisibilityError from validation.
        """
        if not isinstance(mapping, dict):
            raise ParseError(f"config must be a mapping, got {type(mapping).__name__}")
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                raise ParseError(f"unknown config key {key!r}")
            if known[key].type == "int":
                # JSON has no integer/float distinction that survives every
                # writer, so accept exact-integer floats.
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ParseError(f"config key {key!r} must be a number, got {value!r}")
                if isinstance(value, float):
                    if not value.is_integer():
                        raise ParseError(f"config key {key!r} must be an integer, got {value!r}")
                    value = int(value)
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ParseError(f"config key {key!r} must be a number, got {value!r}")
                value = float(value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "SystemConfig":
        """Load a config from a JSON file of field-name/value pairs."""
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read config file {path}: {exc}") from exc
        return cls.from_mapping(data)

    def to_mapping(self) -> dict:
        """Field-name/value mapping, JSON compatible."""
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "SystemConfig":
        """Copy with the given fields replaced (re-validates)."""
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Short stable hash of the full parameter set."""
        blob = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
