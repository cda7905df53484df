"""Black-box adversarial attack driven by a fixed bank of rotated F-transform edge kernels."""

from .ftkernels import KernelBank, Kernel2D, build_bank, ft0_kernel, ft1_kernel, rotate_kernel
from .losses import LossBreakdown, LossWeights, compound_loss
from .simnet import SimNet, simulate

__version__ = "0.1.0"

__all__ = [
    "Kernel2D", "KernelBank", "LossBreakdown", "LossWeights", "SimNet",
    "build_bank", "compound_loss", "ft0_kernel", "ft1_kernel", "rotate_kernel", "simulate",
]
