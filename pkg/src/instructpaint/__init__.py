"""Multi-turn instruction-conditioned image editing GAN, self-contained on numpy."""

from .autodiff import Tensor, no_grad
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["Tensor", "no_grad", "KERNEL_BACKEND", "__version__"]
