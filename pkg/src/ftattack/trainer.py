"""Adversarial training loop and finite-difference gradient verification.

The generator is trained on non-target images only: each step maps a batch
through the generator, runs both the original and the generated batch through
the fixed simulation network and minimizes the compound loss, whose feature
term pushes the two feature stacks apart.
"""

from __future__ import annotations

import logging
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import generator as G
from . import losses as L
from . import simnet as S
from . import tensor as T
from . import victim as V
from .data import DatasetSplit, iterate_batches
from .optim import AdadeltaState, adadelta_step, make_optimizer  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "mae", "dssim", "varc", "feat_dist", "total")


class TargetLeakError(ValueError):
    """Raised when target-class images reach generator training."""


class DivergenceError(FloatingPointError):
    """Raised when the training loss becomes NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adadelta"
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    momentum: float = 0.9
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    hidden_width: int = 32
    ssim_term: str = "dssim"
    feature_sign: float = -1.0
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def generator_step(params: G.GeneratorParams, simnet: S.SimNet, x: np.ndarray,
                   cfg: TrainConfig, need_grad: bool = True, update_stats: bool = True):
    """Loss breakdown and parameter gradients for one batch (train-mode BN)."""
    adv, cache = G.generate_forward(params, x, "train", update_stats=update_stats)
    feat_o = S.simulate(simnet, x)
    feat_a = S.simulate(simnet, adv)
    breakdown, g_adv, g_feat = L.compound_loss(
        x, adv, feat_o, feat_a, cfg.weights, cfg.ssim_term, cfg.feature_sign, need_grad
    )
    if not need_grad:
        return breakdown, None
    g_adv = g_adv + S.simulate_backward(simnet, g_feat, adv.shape)
    grads, _ = G.generate_backward(params, cache, g_adv)
    return breakdown, grads


def check_no_targets(labels: np.ndarray, target_labels) -> None:
    leaked = np.isin(labels, list(target_labels))
    if leaked.any():
        raise TargetLeakError(
            f"{int(leaked.sum())} target-class images in generator training data"
        )


def fit_generator(images: np.ndarray, simnet: S.SimNet, cfg: TrainConfig,
                  params: G.GeneratorParams | None = None, fixed_batch: bool = False,
                  progress=None):
    """Minimize the compound loss over ``images``; returns ``(params, log_rows)``.

    With ``fixed_batch`` the first ``batch_size`` images are reused every step.
    """
    params = params or G.init_generator(cfg.hidden_width, cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.rho, cfg.eps, cfg.momentum)
    trainable = params.trainable_names()
    if fixed_batch:
        batch = images[:cfg.batch_size]
        batches = itertools.repeat(batch)
    else:
        order = iterate_batches(len(images), cfg.batch_size, cfg.seed)
        batches = (images[idx] for idx in order)
    rows = []
    for it in range(cfg.iterations):
        x = next(batches)
        if x.dtype != np.float32:
            x = x.astype(np.float32) / (255.0 if x.dtype == np.uint8 else 1.0)
        breakdown, grads = generator_step(params, simnet, x, cfg)
        if not math.isfinite(breakdown.total):
            raise DivergenceError(f"generator loss became {breakdown.total} at iteration {it}")
        opt.step(params.tensors, {k: grads[k] for k in trainable}, cfg.lr)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            rows.append({"iter": it, **breakdown.as_row()})
        if progress is not None:
            progress(it, breakdown)
    return params, rows


def train_generator(split: DatasetSplit, simnet: S.SimNet, cfg: TrainConfig = TrainConfig(),
                    progress=None):
    """Train on ``split.adv_train``; target-class images are rejected."""
    part = split.adv_train
    check_no_targets(part.labels, split.target_labels)
    return fit_generator(part.pixels, simnet, cfg, progress=progress)


def smoothed_is_nonincreasing(values, window: int = 200, uplift: float = 0.05) -> bool:
    """Window means never rise more than ``uplift`` (relative) above the running min."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2 * window:
        return True
    means = [v[i:i + window].mean() for i in range(0, len(v) - window + 1, window)]
    best = means[0]
    for m in means[1:]:
        if m > best + uplift * abs(best):
            return False
        best = min(best, m)
    return True


# ------------------------------------------------------------------ gradcheck


def relative_error(ga, gf) -> np.ndarray:
    ga, gf = np.asarray(ga, np.float64), np.asarray(gf, np.float64)
    return np.abs(ga - gf) / (np.abs(ga) + np.abs(gf) + 1e-8)


@dataclass(frozen=True)
class GroupResult:
    scope: str
    group: str
    max_rel_error: float
    n_coords: int
    tol: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.n_coords > 0 and self.max_rel_error < self.tol


@dataclass
class GradcheckReport:
    results: list[GroupResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[GroupResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'} {r.scope:<9} {r.group:<22} "
            f"max_rel_err={r.max_rel_error:.3e} coords={r.n_coords} kink_skips={r.skipped}"
            for r in self.results
        ]


def _split(result):
    return result if isinstance(result, tuple) else (result, None)


def _central(f64, flat, c, h):
    """Richardson-extrapolated central difference at step ``h``, plus probe signatures."""
    orig = flat[c]
    vals, sigs = [], []
    for step in (h, -h, h / 2, -h / 2):
        flat[c] = orig + step
        v, sg = _split(f64())
        vals.append(v)
        sigs.append(sg)
    flat[c] = orig
    d1 = (vals[0] - vals[1]) / (2 * h)
    d2 = (vals[2] - vals[3]) / h
    return (4 * d2 - d1) / 3, sigs


def _check_group(scope, group, analytic, f64, target64, rng, n_coords, eps, tol,
                 max_shrink: int = 3):
    """Compare ``analytic`` with finite differences of ``f64`` w.r.t. ``target64``.

    ``f64`` may return ``(value, signature)``, where the signature encodes every
    kink of the function (ReLU masks, pooling argmaxes, signs under ``|.|``).  If
    a probe changes the signature the difference straddles a kink, so the step
    is shrunk tenfold (up to ``max_shrink`` times) before the coordinate is
    given up and replaced by another draw.
    """
    flat = target64.reshape(-1)
    base_sig = _split(f64())[1]
    ana = np.asarray(analytic, np.float64).reshape(-1)
    ga, gf, skipped = [], [], 0
    for c in rng.permutation(flat.size):
        if len(ga) == n_coords:
            break
        for k in range(max_shrink + 1):
            d, sigs = _central(f64, flat, c, eps / 10**k)
            if base_sig is None or all(sg == base_sig for sg in sigs):
                ga.append(ana[c])
                gf.append(d)
                break
            skipped += 1
    err = float(relative_error(ga, gf).max()) if ga else float("nan")
    return GroupResult(scope, group, err, len(ga), tol, skipped)


def _r32(a):
    """Round to the nearest float32 so analytic and oracle see the same point."""
    return np.asarray(a, np.float32).astype(np.float64)


class _Rng32:
    """Generator proxy whose draws are exactly representable in float32."""

    def __init__(self, rng):
        self._rng = rng

    def __getattr__(self, name):
        return getattr(self._rng, name)

    def standard_normal(self, *a, **k):
        return _r32(self._rng.standard_normal(*a, **k))

    def uniform(self, *a, **k):
        return _r32(self._rng.uniform(*a, **k))

    def normal(self, *a, **k):
        return _r32(self._rng.normal(*a, **k))


def _random_images(rng, n=1, h=8, w=8):
    return rng.uniform(0.05, 0.95, size=(n, 3, h, w))


def _scope_tensor(rng, dtype, n_coords, eps, tol):
    out = []
    # conv: dense same-padded and depthwise valid, loss = <r, conv(x)>
    for name, spec in (("conv_same", T.ConvSpec(3, 4, 3, "same_zero")),
                       ("conv_depthwise", T.ConvSpec(3, 6, 5, "valid", depthwise=True))):
        x = rng.standard_normal((1, 3, 8, 8))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(spec.out_channels)
        r = rng.standard_normal((1, spec.out_channels, *spec.output_hw(8, 8)))
        gx, gw, gb = T.conv2d_backward(r.astype(dtype), x.astype(dtype), w.astype(dtype), spec)

        def f():
            return float((T.conv2d_forward(x, w, b, spec) * r).sum())

        out += [_check_group("tensor", f"{name}.input", gx, f, x, rng, n_coords, eps, tol),
                _check_group("tensor", f"{name}.weight", gw, f, w, rng, n_coords, eps, tol),
                _check_group("tensor", f"{name}.bias", gb, f, b, rng, n_coords, eps, tol)]
    # batchnorm in train mode, loss = <r, bn(x)>
    x = rng.standard_normal((2, 3, 8, 8)) * 2 + 1
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    r = rng.standard_normal(x.shape)

    def bn(xx, gg, bb):
        return T.batchnorm_forward(xx, gg, bb, T.BatchNormState.fresh(3, xx.dtype), "train",
                                   update_state=False)

    _, cache = bn(x.astype(dtype), gamma.astype(dtype), beta.astype(dtype))
    gx, gg, gb = T.batchnorm_backward(r.astype(dtype), cache)

    def fbn():
        return float((bn(x, gamma, beta)[0] * r).sum())

    out += [_check_group("tensor", "batchnorm.input", gx, fbn, x, rng, n_coords, eps, tol),
            _check_group("tensor", "batchnorm.gamma", gg, fbn, gamma, rng, n_coords, eps, tol),
            _check_group("tensor", "batchnorm.beta", gb, fbn, beta, rng, n_coords, eps, tol)]
    # activations; relu inputs kept away from the kink
    for kind in ("relu", "sigmoid"):
        x = rng.standard_normal((1, 3, 8, 8))
        if kind == "relu":
            x = _r32(np.where(np.abs(x) < 10 * eps, x + 20 * eps, x))
        r = rng.standard_normal(x.shape)
        y = T.activation_forward(x.astype(dtype), kind)
        g = T.activation_backward(r.astype(dtype), y, kind)

        def fa(kind=kind, x=x, r=r):
            return float((T.activation_forward(x, kind) * r).sum())

        out.append(_check_group("tensor", kind, g, fa, x, rng, n_coords, eps, tol))
    return out


def _scope_losses(rng, dtype, n_coords, eps, tol):
    out = []
    b = _random_images(rng)
    a = _r32(np.clip(b + rng.normal(0, 0.1, b.shape), 0.01, 0.99))
    # keep |a - b| clear of the MAE kink at 0
    a = _r32(np.where(np.abs(a - b) < 10 * eps, b + 20 * eps, a))
    terms = (("mae", L.mae, L.mae_grad), ("dssim", L.dssim, L.dssim_grad),
             ("varc", L.varc, L.varc_grad))
    for name, f, g in terms:
        ga = g(a.astype(dtype), b.astype(dtype))
        out.append(_check_group("losses", name, ga, lambda f=f: f(a, b), a, rng, n_coords, eps, tol))
    fb = rng.standard_normal((2, 36, 4, 4))
    fa = fb + rng.standard_normal(fb.shape)
    fa = _r32(np.where(np.abs(fa - fb) < 10 * eps, fb + 20 * eps, fa))
    ga = L.feature_distance_grad(fa.astype(dtype), fb.astype(dtype))
    out.append(_check_group("losses", "feature_distance", ga,
                            lambda: L.feature_distance(fa, fb), fa, rng, n_coords, eps, tol))
    for bits in range(16):
        wts = L.LossWeights(*[float((bits >> i) & 1) for i in range(4)])
        _, g_adv, g_feat = L.compound_loss(b.astype(dtype), a.astype(dtype), fb.astype(dtype),
                                           fa.astype(dtype), wts)
        name = "compound[" + "".join(str((bits >> i) & 1) for i in range(4)) + "]"
        out.append(_check_group("losses", name + ".adv", g_adv,
                                lambda w=wts: L.compound_loss(b, a, fb, fa, w, need_grad=False)[0].total,
                                a, rng, n_coords, eps, tol))
        out.append(_check_group("losses", name + ".feat", g_feat,
                                lambda w=wts: L.compound_loss(b, a, fb, fa, w, need_grad=False)[0].total,
                                fa, rng, n_coords, eps, tol))
    return out


def _scope_generator(rng, dtype, n_coords, eps, tol, hidden=4):
    x = _random_images(rng)
    params64 = G.init_generator(hidden, int(rng.integers(2**31))).astype(np.float64)
    for name in params64.trainable_names():
        if name.endswith((".bias", ".beta")):
            params64.tensors[name][...] = rng.normal(0, 0.1, params64.tensors[name].shape)
    simnet = S.SimNet()
    cfg = TrainConfig(weights=L.LossWeights(1.0, 1.0, 1.0, 1.0), hidden_width=hidden)
    params = params64.astype(dtype)
    _, grads = generator_step(params, simnet, x.astype(dtype), cfg, update_stats=False)
    out = []
    feat_o = S.simulate(simnet, x)

    def f():
        adv, cache = G.generate_forward(params64, x, "train", update_stats=False)
        feat_a = S.simulate(simnet, adv)
        total = L.compound_loss(x, adv, feat_o, feat_a, cfg.weights, need_grad=False)[0].total
        masks = [c[2] > 0 for c in cache[:-1]] + [adv > x, feat_a > feat_o]
        return total, np.packbits(np.concatenate([m.ravel() for m in masks])).tobytes()

    for name in params64.trainable_names():

        out.append(_check_group("generator", name, grads[name], f, params64.tensors[name],
                                rng, n_coords, eps, tol))
    return out


def _scope_victim(rng, dtype, n_coords, eps, tol, widths=(4, 6, 8)):
    x = _random_images(rng, n=4)
    y = np.array([0, 1, 1, 0])
    params64 = V.init_victim(widths, int(rng.integers(2**31))).astype(np.float64)
    for name in params64.trainable_names():
        if name.endswith((".bias", ".beta")):
            params64.tensors[name][...] = rng.normal(0, 0.1, params64.tensors[name].shape)
    params = params64.astype(dtype)
    logits, cache = V.victim_forward(params, x.astype(dtype), "train", update_stats=False)
    _, g = T.cross_entropy(logits, y)
    grads, gx = V.victim_backward(params, cache, g)

    def f():
        logits, (caches, _, _) = V.victim_forward(params64, x, "train", update_stats=False)
        sig = b"".join(np.packbits(a > 0).tobytes() + pc[0].tobytes() for _, _, a, pc in caches)
        return T.cross_entropy(logits, y)[0], sig

    out = [_check_group("victim", name, grads[name], f, params64.tensors[name], rng, n_coords, eps, tol)
           for name in params64.trainable_names()]
    out.append(_check_group("victim", "input", gx, f, x, rng, n_coords, eps, tol))
    return out


SCOPES = {
    "tensor": _scope_tensor,
    "losses": _scope_losses,
    "generator": _scope_generator,
    "victim": _scope_victim,
}


def gradcheck(scope: str = "all", seed: int = 0, dtype=np.float32, n_coords: int = 100,
              eps: float = 1e-3, tol: float = 1e-3) -> GradcheckReport:
    """Analytic gradients (in ``dtype``) against float64 central differences.

    Each parameter group is sampled at up to ``n_coords`` coordinates; a group
    passes when the largest ``|ga - gf| / (|ga| + |gf| + 1e-8)`` is below ``tol``.
    """
    names = list(SCOPES) if scope == "all" else [scope]
    results: list[GroupResult] = []
    for name in names:
        if name not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {name!r}; use one of {['all', *SCOPES]}")
        stream = list(SCOPES).index(name)
        rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 2, stream]))
        results += SCOPES[name](_Rng32(rng), dtype, n_coords, eps, tol)
    return GradcheckReport(results)
