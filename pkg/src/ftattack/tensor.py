"""Layer primitives with explicit forward and backward passes.

Tensors are plain ``numpy`` arrays in ``(N, C, H, W)`` layout.  Every function
keeps the dtype of its inputs: float32 is the working precision, float64 is
used for gradient verification.  Forward functions that need saved state
return ``(out, cache)`` and the matching backward takes that cache.

Convolutions are cross-correlations (no kernel flip).  The heavy lifting is
delegated to ``torch``'s CPU convolution kernels when available; the backward
formulas are still wired by hand here (input gradient via the transposed
convolution, weight gradient via correlation with the output gradient).  A
pure numpy im2col path computes the same maps and serves as a reference.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

try:
    import torch
    import torch.nn.functional as F
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None

PADDINGS = ("valid", "same_zero")
_BACKEND = "torch" if torch is not None else "numpy"


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what}: {bad} non-finite values")
    return x


def set_backend(name: str) -> None:
    """Select the convolution backend: ``"torch"`` or ``"numpy"``."""
    global _BACKEND
    if name not in ("torch", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "torch" and torch is None:
        raise RuntimeError("torch backend requested but torch is not installed")
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


def configure_threads(n: int | None = None) -> int:
    """Cap compute threads; defaults to ``$FTATTACK_THREADS`` or all cores."""
    if n is None:
        env = os.environ.get("FTATTACK_THREADS")
        n = int(env) if env else os.cpu_count() or 1
    n = max(1, int(n))
    if torch is not None:
        torch.set_num_threads(n)
    return n


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    padding: str = "valid"
    depthwise: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        if self.depthwise and self.out_channels % self.in_channels:
            raise ShapeError(
                "depthwise convolution needs out_channels = in_channels * multiplier"
            )

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) // 2 if self.padding == "same_zero" else 0

    @property
    def groups(self) -> int:
        return self.in_channels if self.depthwise else 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        cin = 1 if self.depthwise else self.in_channels
        return (self.out_channels, cin, self.kernel_size, self.kernel_size)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, p = self.kernel_size, self.pad
        return h + 2 * p - k + 1, w + 2 * p - k + 1


def _check_conv(x, w, spec: ConvSpec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"input shape {x.shape} incompatible with {spec}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {w.shape}, expected {spec.weight_shape}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"input {x.shape[2]}x{x.shape[3]} smaller than kernel {spec.kernel_size}"
        )
    return ho, wo


def _t(a: np.ndarray):
    if not (a.flags.c_contiguous or _is_channels_last(a)):
        a = np.ascontiguousarray(a)
    if not a.flags.writeable:  # torch refuses read-only buffers
        a = a.copy()
    return torch.from_numpy(a)


def _np(t) -> np.ndarray:
    return t.contiguous().numpy()


def _is_channels_last(a: np.ndarray) -> bool:
    return a.ndim == 4 and a.transpose(0, 2, 3, 1).flags.c_contiguous


def _t4(a: np.ndarray):
    """4-D tensor in channels-last memory order, which oneDNN convolves fastest.

    Results are copied back to row-major NCHW before leaving this module.
    """
    return _t(a).contiguous(memory_format=torch.channels_last)


def _im2col(x, k, pad):
    # (N, C, H, W) -> (N, C, Ho, Wo, k, k) view
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))


def _grouped(a, groups):
    # (N, C, ...) -> (N, G, C/G, ...)
    return a.reshape(a.shape[0], groups, a.shape[1] // groups, *a.shape[2:])


def conv2d_reference(x, w, bias, spec: ConvSpec) -> np.ndarray:
    """Direct numpy evaluation of the convolution, independent of torch."""
    _check_conv(x, w, spec)
    g = spec.groups
    cols = _grouped(_im2col(x, spec.kernel_size, spec.pad), g)
    wg = w.reshape(g, w.shape[0] // g, *w.shape[1:])
    y = np.einsum("ngchwij,gocij->ngohw", cols, wg, optimize=True)
    y = y.reshape(x.shape[0], spec.out_channels, *y.shape[3:]).astype(x.dtype, copy=False)
    if bias is not None:
        y = y + bias.reshape(1, -1, 1, 1)
    return y


def _conv2d_backward_numpy(grad_out, x, w, spec: ConvSpec):
    g, k, p = spec.groups, spec.kernel_size, spec.pad
    cols = _grouped(_im2col(x, k, p), g)
    go = _grouped(grad_out, g)
    grad_w = np.einsum("ngohw,ngchwij->gocij", go, cols, optimize=True)
    grad_w = grad_w.reshape(w.shape).astype(w.dtype, copy=False)
    # input gradient: full correlation of grad_out with the flipped kernels
    wf = w.reshape(g, w.shape[0] // g, *w.shape[1:])[..., ::-1, ::-1]
    gcols = _grouped(_im2col(grad_out, k, k - 1 - p), g)
    grad_x = np.einsum("ngohwij,gocij->ngchw", gcols, wf, optimize=True)
    grad_x = grad_x.reshape(x.shape).astype(x.dtype, copy=False)
    return grad_x, grad_w


def conv2d_forward(x, w, bias, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate ``x`` (N, Cin, H, W) with ``w``; adds ``bias`` if given."""
    _check_conv(x, w, spec)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape}, expected ({spec.out_channels},)")
    w = w.astype(x.dtype, copy=False)
    if _BACKEND == "numpy":
        b = None if bias is None else bias.astype(x.dtype, copy=False)
        y = conv2d_reference(x, w, b, spec)
    else:
        tb = None if bias is None else _t(bias.astype(x.dtype, copy=False))
        y = _np(F.conv2d(_t4(x), _t4(w), tb, padding=spec.pad, groups=spec.groups))
    return check_finite(y, "conv2d output")


def conv2d_backward(grad_out, saved_input, w, spec: ConvSpec):
    """Return ``(grad_input, grad_weights, grad_bias)`` of :func:`conv2d_forward`."""
    ho, wo = _check_conv(saved_input, w, spec)
    expected = (saved_input.shape[0], spec.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {expected}")
    dtype = saved_input.dtype
    w = w.astype(dtype, copy=False)
    grad_out = grad_out.astype(dtype, copy=False)
    if _BACKEND == "numpy":
        grad_x, grad_w = _conv2d_backward_numpy(grad_out, saved_input, w, spec)
    else:
        gx, gw, _ = _conv_backward(_t4(grad_out), _t4(saved_input), _t4(w), spec, (True, True))
        grad_x, grad_w = _np(gx), _np(gw)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def conv2d_input_grad(grad_out, input_shape, w, spec: ConvSpec) -> np.ndarray:
    """Input gradient only, for fixed-weight layers."""
    dtype = grad_out.dtype
    w = w.astype(dtype, copy=False)
    if _BACKEND == "numpy":
        dummy = np.zeros(input_shape, dtype=dtype)
        return _conv2d_backward_numpy(grad_out, dummy, w, spec)[0]
    x_meta = torch.empty(tuple(input_shape), dtype=_TORCH_DTYPES[np.dtype(dtype)]).contiguous(
        memory_format=torch.channels_last)
    return _np(_conv_backward(_t4(grad_out), x_meta, _t4(w), spec, (True, False))[0])


_TORCH_DTYPES = {np.dtype(np.float32): torch.float32, np.dtype(np.float64): torch.float64} \
    if torch is not None else {}


def _conv_backward(tg, tx, tw, spec: ConvSpec, mask):
    return torch.ops.aten.convolution_backward(
        tg, tx, tw, None, [1, 1], [spec.pad, spec.pad], [1, 1], False, [0, 0],
        spec.groups, [mask[0], mask[1], False])


# --------------------------------------------------------- batch normalization


@dataclass
class BatchNormState:
    """Running statistics; ``momentum`` is the weight kept on the old value."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> BatchNormState:
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batchnorm_forward(x, gamma, beta, state: BatchNormState, mode: str = "train",
                      update_state: bool = True):
    """Per-channel normalization of ``(N, C, H, W)`` or ``(N, C)`` input.

    Train mode uses the batch mean and population variance and, unless
    ``update_state`` is false, folds them into the running statistics.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},) for input {x.shape}")
    if state.running_mean.shape != (c,):
        raise ShapeError(f"running stats have {state.running_mean.shape[0]} channels, input {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_state:
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1 - m) * mean
            state.running_var[...] = m * state.running_var + (1 - m) * var
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gamma.astype(x.dtype).reshape(bshape) + beta.astype(x.dtype).reshape(bshape)
    return y, (xhat, inv_std, gamma.astype(x.dtype), mode)


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_input, grad_gamma, grad_beta)``.

    In train mode the gradient includes the dependence of the batch mean and
    variance on every input element.
    """
    xhat, inv_std, gamma, mode = cache
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != saved {xhat.shape}")
    c = xhat.shape[1]
    axes = (0,) + tuple(range(2, xhat.ndim))
    bshape = (1, c) + (1,) * (xhat.ndim - 2)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    scale = (gamma * inv_std).reshape(bshape)
    if mode == "eval":
        return grad_out * scale, grad_gamma, grad_beta
    m = xhat.size // c
    grad_x = (grad_out - (grad_beta / m).reshape(bshape)
              - xhat * (grad_gamma / m).reshape(bshape)) * scale
    return grad_x, grad_gamma, grad_beta


def bias_grad_into_bn(grad_bias, bn_cache):
    """Gradient of a conv bias that feeds batch norm.

    Train-mode normalization subtracts the batch mean, which cancels any
    per-channel bias, so the exact gradient is zero; returning it exactly
    avoids reporting floating-point residue as a gradient.
    """
    if bn_cache[3] == "train":
        return np.zeros_like(grad_bias)
    return grad_bias


# ----------------------------------------------------------------- activations


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return expit(x)


def activation_forward(x, kind: str):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out, out, kind: str):
    """Gradient w.r.t. the activation input, given the forward *output*."""
    if grad_out.shape != out.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != output {out.shape}")
    if kind == "relu":
        return grad_out * (out > 0)
    if kind == "sigmoid":
        return grad_out * out * (1 - out)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------- pooling, dense, softmax


def _quadrants(x):
    return x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; ties go to the first element in row order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {h}x{w}")
    q = _quadrants(x)
    y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.full(y.shape, 3, dtype=np.uint8)
    for k in (2, 1, 0):
        idx[q[k] == y] = k
    return y, (idx, x.shape)


def maxpool2_backward(grad_out, cache):
    idx, shape = cache
    g = np.zeros(shape, dtype=grad_out.dtype)
    for k, view in enumerate(_quadrants(g)):
        view[...] = grad_out * (idx == k)
    return g


def global_avgpool_forward(x):
    return x.mean(axis=(2, 3))


def global_avgpool_backward(grad_out, input_shape):
    n, c, h, w = input_shape
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], input_shape).copy()


def linear_forward(x, w, b):
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear input {x.shape} vs weight {w.shape}")
    return x @ w.T.astype(x.dtype, copy=False) + b.astype(x.dtype, copy=False)


def linear_backward(grad_out, x, w):
    return grad_out @ w.astype(grad_out.dtype, copy=False), grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n
