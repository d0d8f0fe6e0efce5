"""Link-level simulator for wideband massive MIMO-OTFS under beam squint
and Doppler squint: exact channel application, chirp-pilot path estimation,
and hybrid delay-phase precoding, with a deterministic Monte Carlo harness.
"""

from __future__ import annotations

from .channel import (
    ChannelRealization,
    PathParams,
    apply_channel,
    dd_response,
    dda_transform,
    per_antenna_delay,
    sample_channel,
    tf_response,
)
from .config import SPEED_OF_LIGHT, SystemConfig
from .errors import (
    DegenerateDenominator,
    DimMismatch,
    DivisibilityError,
    InfeasibleError,
    LengthError,
    MappingError,
    NoPathDetected,
    ParseError,
    RangeError,
    ScaleError,
    SquintError,
    UnknownAxis,
    UnknownExperiment,
    ZeroGainError,
    ZeroNormError,
)
from .modem import (
    DDGrid,
    TFGrid,
    TimeSignal,
    heisenberg,
    isfft,
    isfft_array,
    sfft,
    sfft_array,
    wigner,
)

__version__ = "0.1.0"

__all__ = [
    "SPEED_OF_LIGHT",
    "SystemConfig",
    "DDGrid",
    "TFGrid",
    "TimeSignal",
    "isfft",
    "isfft_array",
    "sfft",
    "sfft_array",
    "heisenberg",
    "wigner",
    "PathParams",
    "ChannelRealization",
    "sample_channel",
    "per_antenna_delay",
    "tf_response",
    "apply_channel",
    "dd_response",
    "dda_transform",
    "SquintError",
    "DivisibilityError",
    "RangeError",
    "ParseError",
    "DimMismatch",
    "LengthError",
    "ScaleError",
    "NoPathDetected",
    "DegenerateDenominator",
    "ZeroGainError",
    "MappingError",
    "InfeasibleError",
    "ZeroNormError",
    "UnknownExperiment",
    "UnknownAxis",
    "__version__",
]
