"""Fixed feature extractor built from an FT1 kernel bank.

Every kernel is applied to every input channel independently (depthwise) and
the maps are concatenated kernel-major: channel ``k * C + c`` holds kernel
``k`` applied to input channel ``c``.  No bias, no activation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .ftkernels import KernelBank, build_bank
from .tensor import ConvSpec, ShapeError, conv2d_forward, conv2d_input_grad

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SimNet:
    bank: KernelBank = field(default_factory=build_bank)
    padding: str = "valid"
    grayscale: bool = False

    def __post_init__(self):
        if self.padding not in ("valid", "same_zero"):
            raise ValueError(f"padding must be 'valid' or 'same_zero', got {self.padding!r}")

    @property
    def n_kernels(self) -> int:
        return len(self.bank)

    @property
    def in_channels(self) -> int:
        return 1 if self.grayscale else 3

    @property
    def out_channels(self) -> int:
        return self.n_kernels * self.in_channels

    def conv_spec(self) -> ConvSpec:
        c = self.in_channels
        return ConvSpec(c, c * self.n_kernels, self.bank.size, self.padding, depthwise=True)

    def weights(self, dtype=np.float32) -> np.ndarray:
        """Depthwise weights ``(C * n, 1, d, d)`` in channel-major (conv) order."""
        stack = self.bank.stack().astype(dtype)
        w = np.tile(stack[None], (self.in_channels, 1, 1, 1)).reshape(-1, 1, *stack.shape[1:])
        w.setflags(write=False)
        return w

    def digest(self) -> str:
        h = hashlib.sha256(self.bank.stack().tobytes())
        h.update(f"{self.padding}/{self.grayscale}".encode())
        return h.hexdigest()


def _to_kernel_major(y, c, n):
    # conv output channel c * n + k  ->  k * c_total + c
    b, _, h, w = y.shape
    return y.reshape(b, c, n, h, w).transpose(0, 2, 1, 3, 4).reshape(b, n * c, h, w)


def _from_kernel_major(g, c, n):
    b, _, h, w = g.shape
    return g.reshape(b, n, c, h, w).transpose(0, 2, 1, 3, 4).reshape(b, c * n, h, w)


def simulate(net: SimNet, image: np.ndarray) -> np.ndarray:
    """Feature stack of ``image`` (N, 3, H, W) -> (N, 3n, H', W')."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) image, got {image.shape}")
    d = net.bank.size
    if net.padding == "valid" and (image.shape[2] < d or image.shape[3] < d):
        raise ShapeError(f"image {image.shape[2]}x{image.shape[3]} smaller than kernel {d}")
    x = image
    if net.grayscale:
        x = np.tensordot(GRAY_WEIGHTS.astype(image.dtype), image, axes=([0], [1]))[:, None]
    y = conv2d_forward(x, net.weights(x.dtype), None, net.conv_spec())
    return _to_kernel_major(y, net.in_channels, net.n_kernels)


def simulate_backward(net: SimNet, grad_features: np.ndarray, image_shape) -> np.ndarray:
    """Input gradient of :func:`simulate`; the kernels receive no gradient."""
    n, _, h, w = image_shape
    spec = net.conv_spec()
    ho, wo = spec.output_hw(h, w)
    expected = (n, net.out_channels, ho, wo)
    if grad_features.shape != expected:
        raise ShapeError(f"grad shape {grad_features.shape}, expected {expected}")
    g = _from_kernel_major(grad_features, net.in_channels, net.n_kernels)
    gx = conv2d_input_grad(g, (n, net.in_channels, h, w), net.weights(g.dtype), spec)
    if net.grayscale:
        gx = GRAY_WEIGHTS.astype(gx.dtype)[None, :, None, None] * gx
    return gx
