"""Attack evaluation: classify target-class test images before and after the generator."""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import generator as G
from . import losses as L
from . import victim as V
from .data import DatasetSplit, diff_images, to_uint8


class ReportMismatchError(ValueError):
    """Raised when checkpoints and data do not fit together."""


@dataclass(frozen=True)
class AttackReport:
    classes: tuple[str, ...]
    counts: dict[str, int]
    original_acc: dict[str, float]  # percent, per true class
    adversarial_acc: dict[str, float]
    original_pred: dict[str, dict[str, int]]  # true class -> predicted class -> count
    adversarial_pred: dict[str, dict[str, int]]
    mean_ssim: float
    mean_mae: float
    victim_name: str = "victim"
    fingerprint: dict = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.original_acc, self.adversarial_acc):
            for c, v in table.items():
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"accuracy for {c} out of range: {v}")

    def drop(self, cls: str) -> float:
        """Accuracy loss in percentage points."""
        return self.original_acc[cls] - self.adversarial_acc[cls]

    @property
    def mean_drop(self) -> float:
        return float(np.mean([self.drop(c) for c in self.classes]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        d = dict(d)
        d["classes"] = tuple(d["classes"])
        return cls(**d)


def _percent(correct: int, total: int) -> float:
    return 100.0 * correct / total if total else 0.0


def _tally(pred, labels, classes):
    acc, dist = {}, {}
    for i, c in enumerate(classes):
        mask = labels == i
        acc[c] = _percent(int((pred[mask] == i).sum()), int(mask.sum()))
        dist[c] = {p: int((pred[mask] == j).sum()) for j, p in enumerate(classes)}
    return acc, dist


def similarity(original: np.ndarray, adversarial: np.ndarray, batch_size: int = 500):
    """Mean per-image SSIM and mean absolute error."""
    ssims, abs_sum = [], 0.0
    for s in range(0, len(original), batch_size):
        a = np.asarray(original[s:s + batch_size], np.float64)
        b = np.asarray(adversarial[s:s + batch_size], np.float64)
        ssims.append(L.ssim_per_image(a, b))
        abs_sum += float(np.abs(a - b).sum())
    n = original.size
    return float(np.concatenate(ssims).mean()), abs_sum / n


def evaluate_attack(victim: V.VictimParams, generator: G.GeneratorParams | None,
                    split: DatasetSplit, victim_name: str = "victim",
                    fingerprint: dict | None = None, adversarial: np.ndarray | None = None
                    ) -> AttackReport:
    """Classify every target test image as-is and after the generator.

    ``generator=None`` is the identity map.  Precomputed ``adversarial`` images
    may be passed instead of a generator.
    """
    part = split.target_test
    if len(part) == 0:
        raise ReportMismatchError("target_test partition is empty")
    n_out = victim.tensors["fc.weight"].shape[0]
    if n_out != len(split.target_classes):
        raise ReportMismatchError(
            f"victim has {n_out} outputs but the split has {len(split.target_classes)} target classes"
        )
    images = part.images
    labels = split.binary_labels(part.labels)
    if adversarial is None:
        adversarial = images if generator is None else G.generate(generator, images)
    if adversarial.shape != images.shape:
        raise ReportMismatchError(f"adversarial shape {adversarial.shape} != {images.shape}")
    classes = split.target_classes
    acc_o, dist_o = _tally(V.predict(victim, images), labels, classes)
    acc_a, dist_a = _tally(V.predict(victim, adversarial), labels, classes)
    ssim_mean, mae_mean = similarity(images, adversarial)
    counts = {c: int((labels == i).sum()) for i, c in enumerate(classes)}
    return AttackReport(classes, counts, acc_o, acc_a, dist_o, dist_a, ssim_mean, mae_mean,
                        victim_name, dict(fingerprint or {}))


# ------------------------------------------------------------------ rendering


def render_table(reports) -> str:
    """Fixed-column table: original vs. adversarial accuracy per class, one row per victim."""
    reports = list(reports)
    classes = reports[0].classes
    name_w = max(12, *(len(r.victim_name) for r in reports))
    cell = 9
    group_w = cell * len(classes)
    lines = [
        "Accuracy on test set [%]",
        f"{'':<{name_w}} | {'original':^{group_w}} | {'adversarial':^{group_w}}",
        f"{'victim':<{name_w}} | " + "".join(f"{c:>{cell}}" for c in classes)
        + " | " + "".join(f"{c:>{cell}}" for c in classes),
        "-" * (name_w + 2 * group_w + 6),
    ]
    for r in reports:
        lines.append(
            f"{r.victim_name:<{name_w}} | "
            + "".join(f"{r.original_acc[c]:>{cell}.2f}" for c in classes) + " | "
            + "".join(f"{r.adversarial_acc[c]:>{cell}.2f}" for c in classes)
        )
    return "\n".join(lines)


def _render_text(r: AttackReport) -> str:
    out = [render_table([r]), ""]
    out.append(f"mean SSIM(original, adversarial): {r.mean_ssim:.4f}")
    out.append(f"mean MAE(original, adversarial):  {r.mean_mae:.4f}")
    out.append("accuracy drop [pp]: " + "  ".join(f"{c}={r.drop(c):.2f}" for c in r.classes)
               + f"  mean={r.mean_drop:.2f}")
    out.append("")
    out.append("predictions (true -> predicted counts)")
    for tag, dist in (("original", r.original_pred), ("adversarial", r.adversarial_pred)):
        for c in r.classes:
            row = "  ".join(f"{p}={dist[c][p]}" for p in r.classes)
            out.append(f"  {tag:<11} {c:<6} n={r.counts[c]:<5} {row}")
    if r.fingerprint:
        out.append("")
        out.append("config " + json.dumps(r.fingerprint, sort_keys=True))
    return "\n".join(out) + "\n"


def _render_csv(r: AttackReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["victim", "class", "n", "original_acc", "adversarial_acc", "drop_pp",
                *[f"adv_pred_{p}" for p in r.classes], "mean_ssim", "mean_mae"])
    for c in r.classes:
        w.writerow([r.victim_name, c, r.counts[c], f"{r.original_acc[c]:.4f}",
                    f"{r.adversarial_acc[c]:.4f}", f"{r.drop(c):.4f}",
                    *[r.adversarial_pred[c][p] for p in r.classes],
                    f"{r.mean_ssim:.6f}", f"{r.mean_mae:.6f}"])
    return buf.getvalue()


def report_render(report: AttackReport, fmt: str = "text") -> str:
    if fmt == "text":
        return _render_text(report)
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _render_csv(report)
    raise ValueError(f"unknown report format {fmt!r}; use text, json or csv")


def write_report(report: AttackReport, prefix) -> list[Path]:
    """Write ``<prefix>.txt``, ``<prefix>.json`` and ``<prefix>.csv``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext, fmt in (("txt", "text"), ("json", "json"), ("csv", "csv")):
        path = prefix.with_name(prefix.name + "." + ext)
        path.write_text(report_render(report, fmt))
        paths.append(path)
    return paths


def read_report(path) -> AttackReport:
    return AttackReport.from_dict(json.loads(Path(path).read_text()))


def triptych(original: np.ndarray, adversarial: np.ndarray, scale: int = 4, gap: int = 2) -> np.ndarray:
    """Side-by-side uint8 HWC strip: original, adversarial, normalized |diff|."""
    panels = [original[None], adversarial[None], diff_images(original[None], adversarial[None])]
    imgs = [np.kron(to_uint8(p)[0].transpose(1, 2, 0), np.ones((scale, scale, 1), np.uint8))
            for p in panels]
    h = imgs[0].shape[0]
    spacer = np.full((h, gap * scale, 3), 255, np.uint8)
    return np.concatenate([imgs[0], spacer, imgs[1], spacer, imgs[2]], axis=1)


def export_triptychs(original, adversarial, labels, out_dir, k: int | None = None,
                     indices=None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = len(original) if k is None else min(k, len(original))
    indices = range(k) if indices is None else indices
    paths = []
    for i, idx in zip(range(k), indices):
        path = out_dir / f"{int(idx):06d}_{labels[i]}_triptych.png"
        Image.fromarray(triptych(original[i], adversarial[i])).save(path)
        paths.append(path)
    return paths
