"""Region-channel calibrated encoder-decoder segmentation on a numpy autograd core."""

from recalnet.tensor import ConfigError, Tensor, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigError", "Tensor", "UsageError", "__version__"]
