"""Attention UNet with repeated ASPP and its baselines on a numpy autodiff core."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward  # noqa: E402,F401
from .kernels import BACKEND  # noqa: E402,F401
