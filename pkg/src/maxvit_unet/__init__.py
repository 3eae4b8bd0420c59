"""MaxViT-UNet: hybrid CNN-Transformer segmentation on a small numpy autograd engine."""

from .errors import ConfigError, GradCheckError, NumericError, ShapeError
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GradCheckError",
    "NumericError",
    "ShapeError",
    "Tensor",
    "backward",
    "no_grad",
    "__version__",
]
