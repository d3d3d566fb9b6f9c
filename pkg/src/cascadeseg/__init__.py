"""Two-stage cascaded 3D brain-tumor segmentation on a minimal autodiff engine."""

from ._kernels import BACKEND
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["BACKEND", "Tensor", "no_grad", "__version__"]
