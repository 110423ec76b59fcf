"""Adaptive input normalization for time-series classifiers, on a small numpy autodiff core."""

from .normalization import Dain, DainMode, DainParams, dain_forward, make_normalizer
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = [
    "Dain",
    "DainMode",
    "DainParams",
    "Parameter",
    "Tensor",
    "backward",
    "dain_forward",
    "make_normalizer",
    "no_grad",
]
__version__ = "0.1.0"
