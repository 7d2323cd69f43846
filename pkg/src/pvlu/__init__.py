"""pvlu: a small CNN engine built around the PVLU activation.

PVLU(x) = ReLU(x) + alpha*sin(beta*x) with channel-wise trainable alpha and
beta.  The package bundles the tensor/autodiff core, the activation family,
model construction with ReLU->PVLU surgery, dataset tooling, and a seeded
experiment harness with a CLI front end.
"""

from .backend import BACKEND
from .errors import (
    BuildError,
    ConfigError,
    ContractError,
    FormatError,
    NumericError,
    PvluError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"
