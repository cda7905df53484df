"""Acceptance criteria 1-9.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary.  Criteria 5-9 need the CIFAR-10 binaries (``FTATTACK_CIFAR``).
The expensive end-to-end runs are cached under ``FTATTACK_ACCEPT_CACHE``
(default ``.acceptance_cache`` in the repo), keyed by a hash of the package
source, so editing the code invalidates them.
"""

import contextlib
import hashlib
import itertools
import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

import ftattack
from ftattack import evalharness as E
from ftattack import generator as G
from ftattack import losses as L
from ftattack import pipeline as P
from ftattack import tensor as T
from ftattack import victim as V
from ftattack.data import export_png, load_cifar10, make_split, read_png
from ftattack.ftkernels import ft1_kernel, rotate_kernel
from ftattack.losses import LossWeights
from ftattack.simnet import SimNet
from ftattack.trainer import TrainConfig, fit_generator, gradcheck, smoothed_is_nonincreasing

VERDICTS: dict[int, str] = {}
REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FTATTACK_ACCEPT_CACHE", REPO / ".acceptance_cache"))


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            VERDICTS[n] = f"SKIP {n}. {title}: {exc}"
        else:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            VERDICTS[n] = f"FAIL {n}. {title} ({time.perf_counter() - t0:.1f}s): {msg[:160]}"
        raise
    extra = ("; " + "; ".join(notes)) if notes else ""
    VERDICTS[n] = f"PASS {n}. {title} ({time.perf_counter() - t0:.1f}s){extra}"


def source_key() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(ftattack.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def cached_pipeline(split, tag, victim_cfg=V.VictimConfig(), gen_cfg=TrainConfig()):
    """Run (or reuse) a full pipeline; returns its metrics, timings and report."""
    out = CACHE / f"{source_key()}-{tag}"
    done = out / "metrics.json"
    if not done.is_file():
        if out.exists():
            shutil.rmtree(out)
        res = P.run_pipeline(split, out, victim_cfg, gen_cfg, victim_name=f"small-cnn ({tag})")
        blob = {"metrics": res.metrics(), "timings": res.timings, "config": res.config}
        done.write_text(json.dumps(blob, sort_keys=True))
    blob = json.loads(done.read_text())
    blob["report"] = E.AttackReport.from_dict(blob["metrics"]["report"])
    blob["identity"] = E.AttackReport.from_dict(blob["metrics"]["identity_report"])
    blob["dir"] = out
    return blob


@pytest.fixture(scope="module")
def split(cifar_dir):
    return make_split(load_cifar10(cifar_dir))


# ------------------------------------------------------------------ 1, 2


def test_criterion_1_kernel_exactness():
    with criterion(1, "kernel exactness"):
        t0 = time.perf_counter()
        k3 = [[-0.25, -0.5, -0.25], [0.0, 0.0, 0.0], [0.25, 0.5, 0.25]]
        assert np.abs(ft1_kernel(3).weights - k3).max() <= 1e-12
        row = [-2 / 9, -4 / 9, -2 / 3, -4 / 9, -2 / 9]
        assert np.abs(ft1_kernel(5).weights[0] - row).max() <= 1e-12
        assert time.perf_counter() - t0 < 1.0


def test_criterion_2_kernel_properties():
    with criterion(2, "kernel properties"):
        t0 = time.perf_counter()
        for d in (3, 5, 7, 9):
            kx = ft1_kernel(d)
            x = np.arange(1, d + 1)
            v = 1 - np.abs(2 * x - d - 1) / (d + 1)
            assert np.abs(kx.weights - np.outer((x - (d + 1) / 2) * v, v)).max() < 1e-9
            assert np.abs(kx.weights + kx.weights[::-1]).max() < 1e-9
            assert np.abs(kx.weights - kx.weights[:, ::-1]).max() < 1e-9
            for k in range(12):
                a = rotate_kernel(kx, kx.T, 30.0 * k)
                b = rotate_kernel(kx, kx.T, 30.0 * k + 180.0)
                assert abs(a.weights.sum()) < 1e-9
                assert np.abs(a.weights + b.weights).max() < 1e-9
        assert time.perf_counter() - t0 < 1.0


# --------------------------------------------------------------------- 3


def test_criterion_3_gradient_suite():
    with criterion(3, "gradient suite (float32, tol 1e-3)") as notes:
        t0 = time.perf_counter()
        report = gradcheck("all", seed=0, dtype=np.float32, n_coords=100, tol=1e-3)
        elapsed = time.perf_counter() - t0
        groups = {(r.scope, r.group.split("[")[0].split(".")[0]) for r in report.results}
        for need in [("tensor", "conv_same"), ("tensor", "batchnorm"), ("tensor", "relu"),
                     ("tensor", "sigmoid"), ("losses", "mae"), ("losses", "dssim"),
                     ("losses", "varc"), ("losses", "feature_distance"), ("losses", "compound"),
                     ("generator", "conv1"), ("victim", "fc")]:
            assert need in groups, need
        worst = max(report.results, key=lambda r: r.max_rel_error)
        notes.append(f"{len(report.results)} groups, worst {worst.scope}/{worst.group} "
                     f"{worst.max_rel_error:.2e}")
        assert report.passed, "; ".join(line for line in report.lines() if line.startswith("FAIL"))
        assert elapsed < 120


# --------------------------------------------------------------------- 4


def test_criterion_4_loss_properties():
    with criterion(4, "loss properties"):
        t0 = time.perf_counter()
        r = np.random.default_rng(0)
        for _ in range(20):
            a = r.random((2, 3, 16, 16))
            b = np.clip(a + 0.3 * r.standard_normal(a.shape), 0, 1)
            assert abs(L.ssim(a, a) - 1) < 1e-12
            assert abs(L.ssim(a, b) - L.ssim(b, a)) < 1e-12
            assert 0 <= L.dssim(a, b) <= 1
            gray = a + r.standard_normal((2, 1, 16, 16)) * 0.1
            assert L.varc(gray, a) < 1e-15
            f = r.standard_normal((2, 36, 12, 12))
            bd, _, _ = L.compound_loss(a, a.copy(), f, f.copy(), LossWeights())
            assert abs(bd.total) < 1e-12
        z = np.zeros((1, 3, 8, 8))
        c1 = (0.01) ** 2
        assert abs(L.ssim(z, z + 1) - c1 / (1 + c1)) < 1e-12
        assert time.perf_counter() - t0 < 10


# --------------------------------------------------------------------- 5


def test_criterion_5_data_integrity(cifar_dir, tmp_path):
    with criterion(5, "data integrity"):
        raw = load_cifar10(cifar_dir)
        assert list(np.bincount(raw.train_labels, minlength=10)) == [5000] * 10
        assert list(np.bincount(raw.test_labels, minlength=10)) == [1000] * 10
        s = make_split(raw)
        assert s.counts() == {"target_train": 10000, "target_test": 2000,
                              "adv_train": 40000, "adv_test": 8000}
        imgs = s.target_test.images[:200]
        paths = export_png(imgs, s.target_test.labels[:200], tmp_path)
        back = np.stack([read_png(p) for p in paths])
        assert np.abs(back - imgs).max() <= 1 / 255


# --------------------------------------------------------------------- 6


def test_criterion_6_end_to_end_attack(split):
    with criterion(6, "end-to-end attack") as notes:
        run = cached_pipeline(split, "base-1")
        rep = run["report"]
        drops = {c: rep.drop(c) for c in rep.classes}
        minutes = sum(run["timings"].values()) / 60
        notes.append("orig " + " ".join(f"{c}={rep.original_acc[c]:.1f}" for c in rep.classes)
                     + " adv " + " ".join(f"{c}={rep.adversarial_acc[c]:.1f}" for c in rep.classes)
                     + f" mean_drop={rep.mean_drop:.1f}pp ssim={rep.mean_ssim:.3f}"
                     + f" runtime={minutes:.1f}min")
        total = [row["total"] for row in run["metrics"]["generator_log"]]
        notes.append(f"smoothed loss non-increasing: {smoothed_is_nonincreasing(total)}")
        print(E.render_table([rep]))
        n = len(rep.classes)
        assert sum(rep.original_acc.values()) / n >= 72.0, "victim below 72% original accuracy"
        assert max(drops.values()) >= 10.0, f"largest drop {max(drops.values()):.2f}pp < 10"
        assert rep.mean_drop >= 5.0, f"mean drop {rep.mean_drop:.2f}pp < 5"
        assert rep.mean_ssim >= 0.6, f"mean SSIM {rep.mean_ssim:.3f} < 0.6"
        assert minutes <= 45.0, f"pipeline took {minutes:.1f} min"


# --------------------------------------------------------------------- 7


def test_criterion_7_controls(split):
    with criterion(7, "control experiments") as notes:
        run = cached_pipeline(split, "base-1")
        ident = run["identity"]
        for c in ident.classes:
            assert abs(ident.adversarial_acc[c] - ident.original_acc[c]) < 3.0
        cfg = TrainConfig(iterations=500, weights=LossWeights(delta=0.0), seed=0)
        imgs = split.adv_train.images[:cfg.batch_size]
        params, _ = fit_generator(imgs, SimNet(), cfg, fixed_batch=True)
        err = float(np.abs(G.generate(params, imgs, "train") - imgs).mean())
        notes.append(f"delta=0 fixed-batch MAE after 500 iterations {err:.4f}")
        assert err < 0.05


# --------------------------------------------------------------------- 8


def test_criterion_8_enriched_victim(split):
    with criterion(8, "enriched-augmentation victim") as notes:
        base = cached_pipeline(split, "base-1")
        vdir = CACHE / f"{source_key()}-enriched"
        vpath = vdir / "victim.ftak"
        if not vpath.is_file():
            vdir.mkdir(parents=True, exist_ok=True)
            params, rows = V.train_victim(split, V.VictimConfig(augment="enriched"))
            P.save_params(params, vpath)
            P.write_log(rows, vdir / "victim_log.csv")
        victim = P.load_victim(vpath)
        gen = P.load_generator(base["dir"] / "gen.ftak")
        rep = E.evaluate_attack(victim, gen, split, "small-cnn (enriched)", {"augment": "enriched"})
        E.write_report(rep, vdir / "report")
        table = E.render_table([base["report"], rep])
        (vdir / "table.txt").write_text(table + "\n")
        print(table)
        notes.append("orig " + " ".join(f"{c}={rep.original_acc[c]:.1f}" for c in rep.classes)
                     + " drop " + " ".join(f"{c}={rep.drop(c):.1f}" for c in rep.classes))
        assert (vdir / "report.json").is_file()
        assert sum(rep.original_acc.values()) / len(rep.classes) >= 70.0


# --------------------------------------------------------------------- 9


def test_criterion_9_determinism(split):
    with criterion(9, "bitwise determinism of a repeated pipeline") as notes:
        first = cached_pipeline(split, "base-1")
        second = cached_pipeline(split, "base-2")
        a, b = first["metrics"], second["metrics"]
        for key in a:
            if key in ("report", "identity_report"):
                ra, rb = dict(a[key]), dict(b[key])
                ra.pop("victim_name"), rb.pop("victim_name")
                assert ra == rb, f"{key} differs"
            else:
                assert a[key] == b[key], f"{key} differs"
        n = sum(len(v) for k, v in a.items() if k.endswith("log"))
        notes.append(f"{n} log rows identical")
