"""F-transform convolution kernels and the rotated kernel bank.

Kernels are indexed with ``x`` as the row and ``y`` as the column, both running
over ``1..d`` in the closed-form expressions and mapped to 0-based indices in
the returned arrays.  The unrotated FT1 kernel therefore responds to intensity
changes along the row axis (vertical gradients).
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class KernelSizeError(ValueError):
    """Raised for kernel sizes that are even or smaller than 3."""


class KernelKind(enum.Enum):
    FT1 = "FT1"
    FT0 = "FT0"
    ROTATED = "Rotated"


def _check_size(d: int) -> int:
    if isinstance(d, bool) or int(d) != d:
        raise KernelSizeError(f"kernel size must be an integer, got {d!r}")
    d = int(d)
    if d < 3 or d % 2 == 0:
        raise KernelSizeError(f"kernel size must be odd and >= 3, got {d}")
    return d


def triangle(d: int) -> np.ndarray:
    """Triangular basic function of width ``d`` sampled at ``x = 1..d``."""
    d = _check_size(d)
    x = np.arange(1, d + 1, dtype=np.float64)
    return 1.0 - np.abs(2.0 * x - d - 1.0) / (d + 1.0)


def ft1_profile(d: int) -> np.ndarray:
    """Odd row profile ``(x - (d+1)/2) * triangle(x)`` of the FT1 kernel."""
    d = _check_size(d)
    x = np.arange(1, d + 1, dtype=np.float64)
    return (x - (d + 1.0) / 2.0) * triangle(d)


@dataclass(frozen=True, eq=False)
class Kernel2D:
    size: int
    weights: np.ndarray
    angle_deg: float = 0.0
    kind: KernelKind = KernelKind.FT1

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.shape != (self.size, self.size):
            raise KernelSizeError(
                f"weights shape {w.shape} does not match size {self.size}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)

    def __eq__(self, other):
        if not isinstance(other, Kernel2D):
            return NotImplemented
        return (
            self.size == other.size
            and self.kind == other.kind
            and self.angle_deg == other.angle_deg
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash((self.size, self.kind, self.angle_deg, self.weights.tobytes()))

    @property
    def T(self) -> Kernel2D:
        return Kernel2D(self.size, self.weights.T, self.angle_deg, self.kind)


def ft1_kernel(d: int, normalize: bool = False) -> Kernel2D:
    """First-degree F-transform kernel of size ``d x d``.

    Entry ``(x, y)`` is ``(x - (d+1)/2) * (1 - |2x-d-1|/(d+1)) * (1 - |2y-d-1|/(d+1))``.
    With ``normalize=True`` the kernel is scaled to unit L1 norm.
    """
    d = _check_size(d)
    w = np.outer(ft1_profile(d), triangle(d))
    if normalize:
        w = w / np.abs(w).sum()
    return Kernel2D(d, w, 0.0, KernelKind.FT1)


def ft0_kernel(d: int) -> Kernel2D:
    """Zero-degree (averaging) kernel: tensor product of triangles, summing to 1."""
    d = _check_size(d)
    w = np.outer(triangle(d), triangle(d))
    return Kernel2D(d, w / w.sum(), 0.0, KernelKind.FT0)


def _cos_sin_deg(alpha_deg: float) -> tuple[float, float]:
    # quadrant reduction keeps multiples of 90 exact and K(a+180) == -K(a) bitwise
    a = float(alpha_deg) % 360.0
    quadrant, rest = divmod(a, 90.0)
    r = math.radians(rest)
    c, s = math.cos(r), math.sin(r)
    if rest == 0.0:
        c, s = 1.0, 0.0
    for _ in range(int(quadrant)):
        c, s = -s, c
    return c + 0.0, s + 0.0


def rotate_kernel(kx: Kernel2D, ky: Kernel2D, alpha_deg: float) -> Kernel2D:
    """Steer a kernel pair: ``kx * cos(alpha) + ky * sin(alpha)``."""
    if kx.size != ky.size:
        raise KernelSizeError(f"kernel sizes differ: {kx.size} vs {ky.size}")
    c, s = _cos_sin_deg(alpha_deg)
    w = kx.weights * c + ky.weights * s
    return Kernel2D(kx.size, w, alpha_deg, KernelKind.ROTATED)


@dataclass(frozen=True)
class KernelBank:
    kernels: tuple[Kernel2D, ...]
    angle_step_deg: float
    _stack: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        kernels = tuple(self.kernels)
        if not kernels:
            raise ValueError("kernel bank must contain at least one kernel")
        sizes = {k.size for k in kernels}
        if len(sizes) != 1:
            raise KernelSizeError(f"bank kernels have mixed sizes {sorted(sizes)}")
        stack = np.stack([k.weights for k in kernels])
        stack.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "_stack", stack)

    def __len__(self):
        return len(self.kernels)

    def __iter__(self):
        return iter(self.kernels)

    def __getitem__(self, i):
        return self.kernels[i]

    @property
    def size(self) -> int:
        return self.kernels[0].size

    @property
    def angles(self) -> list[float]:
        return [k.angle_deg for k in self.kernels]

    def stack(self) -> np.ndarray:
        """Read-only ``(n, d, d)`` float64 array of the kernel weights."""
        return self._stack

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {f"kernel_{i:02d}": k.weights.astype(np.float32) for i, k in enumerate(self)}
        out["angles_deg"] = np.asarray(self.angles, dtype=np.float32)
        return out

    @classmethod
    def from_tensors(cls, tensors) -> KernelBank:
        names = sorted(n for n in tensors if n.startswith("kernel_"))
        if not names:
            raise ValueError("no kernel_NN entries found")
        angles = tensors.get("angles_deg")
        if angles is None:
            angles = np.zeros(len(names))
        kernels = tuple(
            Kernel2D(
                int(tensors[n].shape[0]),
                np.asarray(tensors[n], dtype=np.float64),
                float(a),
                KernelKind.ROTATED,
            )
            for n, a in zip(names, angles)
        )
        step = float(angles[1] - angles[0]) if len(angles) > 1 else 360.0
        return cls(kernels, step)

    def digest(self) -> str:
        return hashlib.sha256(self._stack.tobytes()).hexdigest()


def build_bank(d: int = 5, n_angles: int = 12, normalize: bool = False) -> KernelBank:
    """Bank of ``n_angles`` FT1 kernels at angles ``360 * k / n_angles``."""
    d = _check_size(d)
    if int(n_angles) != n_angles or n_angles < 1:
        raise ValueError(f"n_angles must be a positive integer, got {n_angles!r}")
    n_angles = int(n_angles)
    kx = ft1_kernel(d, normalize=normalize)
    ky = kx.T
    step = 360.0 / n_angles
    kernels = tuple(rotate_kernel(kx, ky, step * k) for k in range(n_angles))
    return KernelBank(kernels, step)
