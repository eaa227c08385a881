"""Open set recognition toolkit: background-mix training and score analysis.

The package studies how background cues leak into open set recognition.
Synthetic foreground/background datasets with a controllable correlation knob
(`synthdata`) feed a small convolutional classifier whose penultimate layer
keeps a spatial map (`model`).  Activation-map banks (`cambank`) steer a
background-swap augmentation (`mixer`, `training`); trained models are scored
(`scoring`) and compared (`metrics`, `experiments`).  `theory` carries exact
finite-alphabet checks of the pooled-feature information decomposition the
augmentation relies on.
"""

from .errors import (
    CapabilityError,
    ConfigError,
    DataError,
    GeometryError,
    NumericalError,
    OsrkitError,
    PairingError,
    ParameterError,
    PartitionError,
    ShapeError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigError",
    "DataError",
    "GeometryError",
    "NumericalError",
    "OsrkitError",
    "PairingError",
    "ParameterError",
    "PartitionError",
    "ShapeError",
    "ValidationError",
    "__version__",
]
