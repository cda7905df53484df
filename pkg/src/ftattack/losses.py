"""Similarity terms, the feature-distance term and the compound training loss.

Each term ``f(a, b)`` has a companion ``f_grad(a, b)`` returning the gradient
with respect to ``a``.  The trainer calls them with ``a`` = generator output
and ``b`` = original image.  Arithmetic is carried out in float64 and gradients
are returned in the dtype of ``a``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from scipy.ndimage import correlate1d

from .tensor import ShapeError

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DYNAMIC_RANGE = 1.0
C1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
C2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _f64(*arrays):
    return tuple(np.asarray(x, dtype=np.float64) for x in arrays)


def _dtype_of(a):
    dt = np.asarray(a).dtype
    return dt if dt.kind == "f" else np.dtype(np.float64)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # MAE
    beta: float = 1.0  # structural dissimilarity
    gamma: float = 1.0  # channel variability
    delta: float = 0.575  # feature distance; near 0.6 the perturbation runs away

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def scaled(self, c: float) -> LossWeights:
        return LossWeights(self.alpha * c, self.beta * c, self.gamma * c, self.delta * c)


@dataclass(frozen=True)
class LossBreakdown:
    mae: float
    dssim: float
    varc: float
    feat_dist: float
    total: float

    def as_row(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------------ MAE


def mae(a, b) -> float:
    _same_shape(a, b)
    a, b = _f64(a, b)
    return float(np.abs(a - b).mean())


def mae_grad(a, b):
    _same_shape(a, b)
    return (np.sign(np.subtract(a, b, dtype=np.float64)) / a.size).astype(_dtype_of(a))


# ----------------------------------------------------------------------- SSIM


@lru_cache(maxsize=8)
def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian; the 2-D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    g.setflags(write=False)
    return g


@lru_cache(maxsize=8)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    g = gaussian_taps(size, sigma)
    win = np.outer(g, g)
    win.setflags(write=False)
    return win


def _window_filter(x):
    """Valid Gaussian filtering of every channel: (N, C, H, W) -> (N, C, H', W').

    Done as two 1-D passes, which the separable window allows.
    """
    h, w = x.shape[-2:]
    k = SSIM_WINDOW
    if h < k or w < k:
        raise ShapeError(f"image {h}x{w} is smaller than the {k}x{k} SSIM window")
    r = k // 2
    taps = gaussian_taps()
    y = correlate1d(x, taps, axis=-2, mode="constant")[..., r:h - r, :]
    return correlate1d(y, taps, axis=-1, mode="constant")[..., r:w - r]


def _window_filter_T(g, shape):
    # adjoint of the valid filter: re-centre g in a zero frame, then filter in
    # "same" mode (the window is symmetric, so no flip is needed)
    r = SSIM_WINDOW // 2
    frame = np.zeros(shape, dtype=g.dtype)
    frame[..., r:shape[-2] - r, r:shape[-1] - r] = g
    taps = gaussian_taps()
    y = correlate1d(frame, taps, axis=-2, mode="constant")
    return correlate1d(y, taps, axis=-1, mode="constant")


def _ssim_parts(a, b):
    _same_shape(a, b)
    a, b = _f64(a, b)
    if a.ndim != 4:
        raise ShapeError(f"ssim expects (N, C, H, W) input, got {a.shape}")
    n, c = a.shape[:2]
    stacked = np.concatenate([a, b, a * a, b * b, a * b], axis=1)
    f = _window_filter(stacked)
    mu_a, mu_b, e_aa, e_bb, e_ab = (f[:, i * c:(i + 1) * c] for i in range(5))
    s_aa = e_aa - mu_a * mu_a
    s_bb = e_bb - mu_b * mu_b
    s_ab = e_ab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + C1
    a2 = 2 * s_ab + C2
    b1 = mu_a * mu_a + mu_b * mu_b + C1
    b2 = s_aa + s_bb + C2
    smap = (a1 * a2) / (b1 * b2)
    return smap, (mu_a, mu_b, a1, a2, b1, b2)


def ssim_map(a, b):
    """Local SSIM values over all valid 7x7 window placements and channels."""
    return _ssim_parts(a, b)[0]


def ssim(a, b) -> float:
    """Mean SSIM (Gaussian 7x7 window, sigma 1.5, dynamic range 1)."""
    return float(ssim_map(a, b).mean())


def ssim_per_image(a, b) -> np.ndarray:
    return ssim_map(a, b).mean(axis=(1, 2, 3))


def ssim_value_and_grad(a, b):
    """Mean SSIM and its gradient with respect to ``a`` from one filtering pass."""
    dt = _dtype_of(a)
    a, b = _f64(a, b)
    smap, (mu_a, mu_b, a1, a2, b1, b2) = _ssim_parts(a, b)
    scale = 1.0 / smap.size
    denom = b1 * b2
    d_mu_a = (2 * mu_b * (a2 - a1) / denom + 2 * mu_a * smap * (1 / b2 - 1 / b1)) * scale
    d_e_aa = -smap / b2 * scale
    d_e_ab = 2 * a1 / denom * scale
    g = np.concatenate([d_mu_a, d_e_aa, d_e_ab], axis=1)
    c = a.shape[1]
    gt = _window_filter_T(g, (a.shape[0], 3 * c) + a.shape[2:])
    grad = gt[:, :c] + 2 * a * gt[:, c:2 * c] + b * gt[:, 2 * c:]
    return float(smap.mean()), grad.astype(dt)


def ssim_grad(a, b):
    return ssim_value_and_grad(a, b)[1]


def dssim(a, b) -> float:
    """Structural dissimilarity ``(1 - ssim) / 2`` in ``[0, 1]``."""
    return (1.0 - ssim(a, b)) / 2.0


def dssim_grad(a, b):
    return -0.5 * ssim_grad(a, b)


# ------------------------------------------------------- channel variability


def varc(a, b) -> float:
    """Mean over pixels of the across-channel population variance of ``a - b``."""
    _same_shape(a, b)
    if a.ndim != 4 or a.shape[1] < 2:
        raise ShapeError(f"varc expects (N, C>=2, H, W), got {a.shape}")
    return float(np.subtract(a, b, dtype=np.float64).var(axis=1).mean())


def varc_grad(a, b):
    _same_shape(a, b)
    d = np.subtract(a, b, dtype=np.float64)
    c = a.shape[1]
    npix = a.size // c
    return ((2.0 / c) * (d - d.mean(axis=1, keepdims=True)) / npix).astype(_dtype_of(a))


# ------------------------------------------------------------ feature distance


def feature_distance(fa, fb) -> float:
    """Mean absolute difference of two feature stacks."""
    _same_shape(fa, fb)
    return float(np.abs(np.subtract(fa, fb, dtype=np.float64)).mean())


def feature_distance_grad(fa, fb):
    _same_shape(fa, fb)
    return (np.sign(np.subtract(fa, fb, dtype=np.float64)) / fa.size).astype(_dtype_of(fa))


# --------------------------------------------------------------- compound loss


def compound_loss(original, adversarial, feat_o, feat_a, w: LossWeights,
                  ssim_term: str = "dssim", feature_sign: float = -1.0,
                  need_grad: bool = True):
    """Similarity terms plus ``feature_sign * delta * feature_distance``.

    The default ``feature_sign=-1`` rewards dissimilar simulated features;
    ``+1`` gives the literal sum form.  ``ssim_term="raw"`` adds ``beta * ssim``
    instead of ``beta * dssim``.  Returns ``(breakdown, grad_adversarial,
    grad_feat_a)``; the gradients are ``None`` when ``need_grad`` is false.
    """
    if ssim_term not in ("dssim", "raw"):
        raise ValueError(f"ssim_term must be 'dssim' or 'raw', got {ssim_term!r}")
    _same_shape(original, adversarial)
    _same_shape(feat_o, feat_a)
    dt_a, dt_f = _dtype_of(adversarial), _dtype_of(feat_a)
    a, b = _f64(adversarial, original)
    feat_a, feat_o = _f64(feat_a, feat_o)
    m = mae(a, b)
    if need_grad and w.beta:
        s, sg = ssim_value_and_grad(a, b)
    else:
        s, sg = ssim(a, b), None
    d = (1.0 - s) / 2.0
    v = varc(a, b)
    fd = feature_distance(feat_a, feat_o)
    ssim_value = d if ssim_term == "dssim" else s
    total = w.alpha * m + w.beta * ssim_value + w.gamma * v + feature_sign * w.delta * fd
    breakdown = LossBreakdown(m, d, v, fd, float(total))
    if not need_grad:
        return breakdown, None, None
    grad = np.zeros_like(a)
    if w.alpha:
        grad += w.alpha * mae_grad(a, b)
    if w.beta:
        grad += (-0.5 * w.beta) * sg if ssim_term == "dssim" else w.beta * sg
    if w.gamma:
        grad += w.gamma * varc_grad(a, b)
    grad_feat = (feature_sign * w.delta) * feature_distance_grad(feat_a, feat_o)
    return breakdown, grad.astype(dt_a), grad_feat.astype(dt_f)
