"""Auto-weighted deep supervision for segmentation, with a numpy autodiff core."""

from .kernels import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
