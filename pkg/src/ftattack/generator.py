"""Five-layer, stride-free convolutional image-to-image generator.

Layers 1-4: conv3x3 (zero "same" padding) -> batch norm -> ReLU.
Layer 5: conv3x3 -> sigmoid, so outputs lie in (0, 1) like the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

N_LAYERS = 5
KERNEL_SIZE = 3


def layer_specs(hidden: int) -> list[T.ConvSpec]:
    widths = [3] + [hidden] * (N_LAYERS - 1) + [3]
    return [
        T.ConvSpec(widths[i], widths[i + 1], KERNEL_SIZE, "same_zero")
        for i in range(N_LAYERS)
    ]


@dataclass
class GeneratorParams:
    hidden_width: int
    tensors: dict[str, np.ndarray] = field(repr=False)

    @property
    def specs(self) -> list[T.ConvSpec]:
        return layer_specs(self.hidden_width)

    def trainable_names(self) -> list[str]:
        names = []
        for i in range(1, N_LAYERS + 1):
            names += [f"conv{i}.weight", f"conv{i}.bias"]
            if i < N_LAYERS:
                names += [f"bn{i}.gamma", f"bn{i}.beta"]
        return names

    def n_trainable(self) -> int:
        return sum(self.tensors[n].size for n in self.trainable_names())

    def bn_state(self, i: int) -> T.BatchNormState:
        # shares memory with self.tensors so running stats update in place
        return T.BatchNormState(self.tensors[f"bn{i}.running_mean"],
                                self.tensors[f"bn{i}.running_var"])

    def copy(self) -> GeneratorParams:
        return GeneratorParams(self.hidden_width, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> GeneratorParams:
        return GeneratorParams(self.hidden_width,
                               {k: v.astype(dtype) for k, v in self.tensors.items()})

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.tensors)
        out["meta.hidden_width"] = np.array([self.hidden_width], dtype=np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors) -> GeneratorParams:
        if "meta.hidden_width" not in tensors:
            raise ValueError("not a generator checkpoint (missing meta.hidden_width)")
        h = int(tensors["meta.hidden_width"][0])
        params = cls(h, {k: np.array(v, dtype=np.float32) for k, v in tensors.items()
                         if not k.startswith("meta.")})
        for name, spec in zip([f"conv{i}.weight" for i in range(1, 6)], params.specs):
            if params.tensors[name].shape != spec.weight_shape:
                raise T.ShapeError(f"{name} has shape {params.tensors[name].shape}, "
                                   f"expected {spec.weight_shape}")
        return params


def init_generator(h: int = 32, seed: int = 0) -> GeneratorParams:
    """He-uniform weights, zero biases, unit gamma, zero beta."""
    if h < 1:
        raise ValueError(f"hidden width must be >= 1, got {h}")
    rng = np.random.Generator(np.random.Philox(seed))
    tensors: dict[str, np.ndarray] = {}
    for i, spec in enumerate(layer_specs(h), start=1):
        fan_in = spec.in_channels * spec.kernel_size**2
        limit = np.sqrt(6.0 / fan_in)
        tensors[f"conv{i}.weight"] = rng.uniform(-limit, limit, spec.weight_shape).astype(np.float32)
        tensors[f"conv{i}.bias"] = np.zeros(spec.out_channels, np.float32)
        if i < N_LAYERS:
            tensors[f"bn{i}.gamma"] = np.ones(h, np.float32)
            tensors[f"bn{i}.beta"] = np.zeros(h, np.float32)
            tensors[f"bn{i}.running_mean"] = np.zeros(h, np.float32)
            tensors[f"bn{i}.running_var"] = np.ones(h, np.float32)
    return GeneratorParams(h, tensors)


def generate_forward(params: GeneratorParams, image: np.ndarray, mode: str = "train",
                     update_stats: bool = True):
    """Run the generator; returns ``(output, cache)`` for :func:`generate_backward`."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise T.ShapeError(f"expected (N, 3, H, W) image, got {image.shape}")
    p = params.tensors
    dtype = image.dtype
    x = image
    caches = []
    for i, spec in enumerate(params.specs, start=1):
        w = p[f"conv{i}.weight"].astype(dtype, copy=False)
        z = T.conv2d_forward(x, w, p[f"conv{i}.bias"].astype(dtype, copy=False), spec)
        if i < N_LAYERS:
            zn, bn_cache = T.batchnorm_forward(
                z, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], params.bn_state(i),
                mode, update_state=update_stats,
            )
            out = T.relu(zn)
            caches.append((x, bn_cache, out))
        else:
            out = T.sigmoid(z)
            caches.append((x, None, out))
        x = out
    T.check_finite(x, "generator output")
    return x, caches


def generate(params: GeneratorParams, image: np.ndarray, mode: str = "eval",
             batch_size: int = 256) -> np.ndarray:
    """Adversarial counterpart of ``image``; eval mode uses running statistics."""
    if mode == "train" or len(image) <= batch_size:
        return generate_forward(params, image, mode)[0]
    return np.concatenate([
        generate_forward(params, image[i:i + batch_size], mode)[0]
        for i in range(0, len(image), batch_size)
    ])


def generate_backward(params: GeneratorParams, cache, grad_out: np.ndarray):
    """Return ``(grads, grad_image)``; ``grads`` maps trainable names to arrays."""
    p = params.tensors
    specs = params.specs
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    if g.shape != cache[-1][2].shape:
        raise T.ShapeError(f"grad_out shape {g.shape}, expected {cache[-1][2].shape}")
    for i in range(N_LAYERS, 0, -1):
        x_in, bn_cache, out = cache[i - 1]
        if i == N_LAYERS:
            g = T.activation_backward(g, out, "sigmoid")
        else:
            g = T.activation_backward(g, out, "relu")
            g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = T.batchnorm_backward(g, bn_cache)
        g, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = T.conv2d_backward(
            g, x_in, p[f"conv{i}.weight"], specs[i - 1]
        )
        if i != N_LAYERS:
            grads[f"conv{i}.bias"] = T.bias_grad_into_bn(grads[f"conv{i}.bias"], bn_cache)
    return grads, g

