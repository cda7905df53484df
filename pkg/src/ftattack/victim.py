"""Small CNN cat/dog classifier standing in for the attacked black box.

Architecture: ``len(widths)`` blocks of conv3x3 -> batch norm -> ReLU ->
2x2 max-pool, then global average pooling and a linear layer to 2 logits.
Training follows a staged-learning-rate Adadelta recipe with geometric
augmentation (``base``) optionally extended by colour jitter (``enriched``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import DatasetSplit, iterate_batches
from .optim import make_optimizer, stage_boundaries, staged_lr

log = logging.getLogger(__name__)

N_CLASSES = 2
PAPER_SCHEDULE = ((0.6, 1.0), (0.25, 0.5), (0.15, 0.1))


# ----------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    hflip_p: float = 0.0
    vflip_p: float = 0.0
    perspective_p: float = 0.0
    perspective_scale: float = 0.1  # max corner shift, fraction of the side
    resize_p: float = 0.0
    resize_area: tuple[float, float] = (0.75, 1.0)  # crop area, rescaled to full size
    rotate_p: float = 0.0
    rotate_deg: float = 15.0
    blur_p: float = 0.0
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    contrast_p: float = 0.0
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation_p: float = 0.0
    saturation: tuple[float, float] = (0.6, 1.4)
    hue_p: float = 0.0
    hue: float = 0.05  # max rotation, fraction of a full turn
    intensity_p: float = 0.0
    intensity: tuple[float, float] = (0.7, 1.3)

    @classmethod
    def none(cls) -> AugmentationConfig:
        return cls()

    @classmethod
    def base(cls) -> AugmentationConfig:
        """Flips, perspective distortion, resize, rotation and blur."""
        return cls(hflip_p=0.5, perspective_p=0.5, resize_p=0.5, rotate_p=0.5, blur_p=0.2)

    @classmethod
    def enriched(cls) -> AugmentationConfig:
        """``base`` plus contrast, saturation, hue and intensity jitter."""
        return replace(cls.base(), contrast_p=0.5, saturation_p=0.5, hue_p=0.5,
                       intensity_p=0.5)

    @classmethod
    def preset(cls, name: str) -> AugmentationConfig:
        presets = {"none": cls.none, "base": cls.base, "enriched": cls.enriched}
        if name not in presets:
            raise ValueError(f"unknown augmentation preset {name!r}; use one of {list(presets)}")
        return presets[name]()


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def _homography(src, dst):
    """3x3 matrix mapping the four ``src`` points onto ``dst``."""
    a, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(a, float), np.array(rhs, float))
    return np.append(h, 1.0).reshape(3, 3)


def _geometry(rng, cfg: AugmentationConfig, h: int, w: int):
    """Output-to-source pixel transform (homogeneous, (col, row, 1)), or None."""
    cx, cy = (w - 1) / 2, (h - 1) / 2
    m = np.eye(3)
    used = False
    if rng.random() < cfg.resize_p:
        area = rng.uniform(*cfg.resize_area)
        s = math.sqrt(area)
        ox = rng.uniform(-(1 - s) * cx, (1 - s) * cx)
        oy = rng.uniform(-(1 - s) * cy, (1 - s) * cy)
        m = np.array([[s, 0, cx + ox - s * cx], [0, s, cy + oy - s * cy], [0, 0, 1]]) @ m
        used = True
    if rng.random() < cfg.rotate_p:
        t = math.radians(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
        c, s_ = math.cos(t), math.sin(t)
        shift = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]])
        rot = np.array([[c, -s_, 0], [s_, c, 0], [0, 0, 1]])
        back = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
        m = shift @ rot @ back @ m
        used = True
    if rng.random() < cfg.perspective_p:
        corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)
        jitter = rng.uniform(-1, 1, size=(4, 2)) * cfg.perspective_scale * np.array([w, h])
        m = m @ _homography(corners, corners + jitter)
        used = True
    return m if used else None


def _warp(img, m):
    _, h, w = img.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = m @ np.stack([cols.ravel(), rows.ravel(), np.ones(h * w)])
    src_c = (pts[0] / pts[2]).reshape(h, w)
    src_r = (pts[1] / pts[2]).reshape(h, w)
    return np.stack([
        ndimage.map_coordinates(ch, [src_r, src_c], order=1, mode="reflect")
        for ch in img
    ])


def _gray(img):
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def _augment_one(img, cfg: AugmentationConfig, rng):
    out = img.astype(np.float64)
    if rng.random() < cfg.hflip_p:
        out = out[:, :, ::-1]
    if rng.random() < cfg.vflip_p:
        out = out[:, ::-1, :]
    m = _geometry(rng, cfg, out.shape[1], out.shape[2])
    if m is not None:
        out = _warp(out, m)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = np.stack([ndimage.gaussian_filter(ch, sigma, mode="reflect") for ch in out])
    if rng.random() < cfg.intensity_p:
        out = out * rng.uniform(*cfg.intensity)
    if rng.random() < cfg.contrast_p:
        mean = _gray(out).mean()
        out = (out - mean) * rng.uniform(*cfg.contrast) + mean
    if rng.random() < cfg.saturation_p:
        g = _gray(out)
        out = g + (out - g) * rng.uniform(*cfg.saturation)
    if rng.random() < cfg.hue_p:
        t = 2 * math.pi * rng.uniform(-cfg.hue, cfg.hue)
        c, s = math.cos(t), math.sin(t)
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        out = np.tensordot(_YIQ2RGB @ rot @ _RGB2YIQ, out, axes=([1], [0]))
    return np.clip(out, 0.0, 1.0)


def augment(images: np.ndarray, cfg: AugmentationConfig, seed) -> np.ndarray:
    """Randomly augment a (N, 3, H, W) or (3, H, W) batch; deterministic per seed.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
    single = images.ndim == 3
    batch = images[None] if single else images
    out = np.stack([_augment_one(img, cfg, rng) for img in batch]).astype(images.dtype)
    return out[0] if single else out


# ------------------------------------------------------------------------ model


@dataclass
class VictimParams:
    widths: tuple[int, ...]
    tensors: dict[str, np.ndarray] = field(repr=False)

    def specs(self) -> list[T.ConvSpec]:
        chans = (3,) + tuple(self.widths)
        return [T.ConvSpec(chans[i], chans[i + 1], 3, "same_zero") for i in range(len(self.widths))]

    def trainable_names(self) -> list[str]:
        names = []
        for i in range(1, len(self.widths) + 1):
            names += [f"conv{i}.weight", f"conv{i}.bias", f"bn{i}.gamma", f"bn{i}.beta"]
        return names + ["fc.weight", "fc.bias"]

    def bn_state(self, i: int) -> T.BatchNormState:
        return T.BatchNormState(self.tensors[f"bn{i}.running_mean"],
                                self.tensors[f"bn{i}.running_var"])

    def copy(self) -> VictimParams:
        return VictimParams(self.widths, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> VictimParams:
        return VictimParams(self.widths, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.tensors)
        out["meta.widths"] = np.asarray(self.widths, dtype=np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors) -> VictimParams:
        if "meta.widths" not in tensors:
            raise ValueError("not a victim checkpoint (missing meta.widths)")
        widths = tuple(int(w) for w in tensors["meta.widths"])
        return cls(widths, {k: np.array(v, np.float32) for k, v in tensors.items()
                            if not k.startswith("meta.")})


def init_victim(widths=(32, 64, 128), seed: int = 0) -> VictimParams:
    rng = np.random.Generator(np.random.Philox(seed))
    tensors: dict[str, np.ndarray] = {}
    chans = (3,) + tuple(widths)
    for i in range(1, len(widths) + 1):
        fan_in = chans[i - 1] * 9
        lim = math.sqrt(6.0 / fan_in)
        tensors[f"conv{i}.weight"] = rng.uniform(-lim, lim, (chans[i], chans[i - 1], 3, 3)).astype(np.float32)
        tensors[f"conv{i}.bias"] = np.zeros(chans[i], np.float32)
        tensors[f"bn{i}.gamma"] = np.ones(chans[i], np.float32)
        tensors[f"bn{i}.beta"] = np.zeros(chans[i], np.float32)
        tensors[f"bn{i}.running_mean"] = np.zeros(chans[i], np.float32)
        tensors[f"bn{i}.running_var"] = np.ones(chans[i], np.float32)
    # a small head keeps the untrained classifier near chance; ReLU features
    # are all positive, so a wide init would tilt every logit the same way
    tensors["fc.weight"] = (0.01 * rng.standard_normal((N_CLASSES, chans[-1]))).astype(np.float32)
    tensors["fc.bias"] = np.zeros(N_CLASSES, np.float32)
    return VictimParams(tuple(int(w) for w in widths), tensors)


def victim_forward(params: VictimParams, x: np.ndarray, mode: str = "train",
                   update_stats: bool = True):
    """Logits ``(N, 2)`` and the cache for :func:`victim_backward`."""
    p = params.tensors
    dtype = x.dtype
    caches = []
    for i, spec in enumerate(params.specs(), start=1):
        z = T.conv2d_forward(x, p[f"conv{i}.weight"].astype(dtype, copy=False),
                             p[f"conv{i}.bias"].astype(dtype, copy=False), spec)
        zn, bn_cache = T.batchnorm_forward(z, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                           params.bn_state(i), mode, update_state=update_stats)
        a = T.relu(zn)
        pooled, pool_cache = T.maxpool2_forward(a)
        caches.append((x, bn_cache, a, pool_cache))
        x = pooled
    feat = T.global_avgpool_forward(x)
    logits = T.linear_forward(feat, p["fc.weight"], p["fc.bias"])
    T.check_finite(logits, "victim logits")
    return logits, (caches, x.shape, feat)


def victim_backward(params: VictimParams, cache, grad_logits):
    """Parameter gradients and the input gradient of :func:`victim_forward`."""
    p = params.tensors
    caches, pooled_shape, feat = cache
    grads: dict[str, np.ndarray] = {}
    g_feat, grads["fc.weight"], grads["fc.bias"] = T.linear_backward(grad_logits, feat, p["fc.weight"])
    g = T.global_avgpool_backward(g_feat, pooled_shape)
    specs = params.specs()
    for i in range(len(specs), 0, -1):
        x_in, bn_cache, a, pool_cache = caches[i - 1]
        g = T.maxpool2_backward(g, pool_cache)
        g = T.activation_backward(g, a, "relu")
        g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = T.batchnorm_backward(g, bn_cache)
        g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = T.conv2d_backward(
            g, x_in, p[f"conv{i}.weight"], specs[i - 1])
        grads[f"conv{i}.bias"] = T.bias_grad_into_bn(grads[f"conv{i}.bias"], bn_cache)
    return grads, g


def classify(params: VictimParams, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode class probabilities, shape (N, 2)."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise T.ShapeError(f"expected (N, 3, H, W) images, got {images.shape}")
    out = [T.softmax(victim_forward(params, images[i:i + batch_size], "eval")[0])
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES), images.dtype)


def predict(params: VictimParams, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    return classify(params, images, batch_size).argmax(axis=1)


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class VictimConfig:
    iterations: int = 4000
    batch_size: int = 64
    seed: int = 0
    widths: tuple[int, ...] = (32, 64, 128)
    augment: str = "base"
    lr_schedule: tuple[tuple[float, float], ...] = PAPER_SCHEDULE
    rho: float = 0.95
    eps: float = 1e-6
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        AugmentationConfig.preset(self.augment)

    def as_dict(self) -> dict:
        return asdict(self)


class DivergenceError(FloatingPointError):
    """Training loss became NaN or infinite."""


def train_victim(split: DatasetSplit, cfg: VictimConfig = VictimConfig(), progress=None):
    """Train on ``split.target_train``; returns ``(params, log_rows)``.

    Log rows hold ``iter, lr, loss, batch_acc``.
    """
    part = split.target_train
    labels = split.binary_labels(part.labels)
    aug = AugmentationConfig.preset(cfg.augment)
    params = init_victim(cfg.widths, cfg.seed)
    opt = make_optimizer("adadelta", cfg.rho, cfg.eps)
    trainable = params.trainable_names()
    batches = iterate_batches(len(part), cfg.batch_size, cfg.seed)
    log.info("victim: %d iterations, lr stage boundaries %s", cfg.iterations,
             stage_boundaries(cfg.iterations, cfg.lr_schedule))
    rows = []
    for it in range(cfg.iterations):
        idx = next(batches)
        x, _ = part.batch(idx)
        rng = np.random.Generator(np.random.Philox(key=cfg.seed, counter=[0, 0, 1, it]))
        x = augment(x, aug, rng)
        y = labels[idx]
        logits, cache = victim_forward(params, x, "train")
        loss, g = T.cross_entropy(logits, y)
        if not math.isfinite(loss):
            raise DivergenceError(f"victim loss became {loss} at iteration {it}")
        grads, _ = victim_backward(params, cache, g)
        lr = staged_lr(it, cfg.iterations, cfg.lr_schedule)
        opt.step(params.tensors, {k: grads[k] for k in trainable}, lr)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            acc = float((logits.argmax(axis=1) == y).mean())
            rows.append({"iter": it, "lr": lr, "loss": loss, "batch_acc": acc})
        if progress is not None:
            progress(it, loss)
    return params, rows


def accuracy_by_class(params: VictimParams, split: DatasetSplit, images=None) -> dict[str, float]:
    part = split.target_test
    images = part.images if images is None else images
    pred = predict(params, images)
    truth = split.binary_labels(part.labels)
    return {c: 100.0 * float((pred[truth == k] == k).mean())
            for k, c in enumerate(split.target_classes)}
