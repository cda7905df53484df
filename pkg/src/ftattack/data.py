"""CIFAR-10 binary ingestion, target/adversarial partitioning and PNG export."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
           "dog", "frog", "horse", "ship", "truck")
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
RECORD_BYTES = 1 + 3 * 32 * 32
RECORDS_PER_FILE = 10_000
FILE_BYTES = RECORD_BYTES * RECORDS_PER_FILE
PARTITIONS = ("target_train", "target_test", "adv_train", "adv_test")


class DataFormatError(ValueError):
    """Raised for malformed CIFAR-10 batch files or manifests."""


@dataclass(frozen=True)
class RawCifar:
    train_pixels: np.ndarray  # uint8 (50000, 3, 32, 32)
    train_labels: np.ndarray  # uint8 (50000,)
    test_pixels: np.ndarray
    test_labels: np.ndarray
    source: str = ""


def read_batch_file(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != FILE_BYTES:
        raise DataFormatError(
            f"{path}: expected {FILE_BYTES} bytes ({RECORDS_PER_FILE} records of "
            f"{RECORD_BYTES}), found {raw.size}"
        )
    records = raw.reshape(RECORDS_PER_FILE, RECORD_BYTES)
    labels = records[:, 0].copy()
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]} outside [0, 9]")
    pixels = records[:, 1:].reshape(RECORDS_PER_FILE, 3, 32, 32).copy()
    return pixels, labels


def load_cifar10(directory) -> RawCifar:
    """Read the five training batches and the test batch from ``directory``."""
    directory = Path(directory)
    train = [read_batch_file(directory / f) for f in TRAIN_FILES]
    test = [read_batch_file(directory / f) for f in TEST_FILES]
    return RawCifar(
        np.concatenate([p for p, _ in train]), np.concatenate([lb for _, lb in train]),
        np.concatenate([p for p, _ in test]), np.concatenate([lb for _, lb in test]),
        str(directory.resolve()),
    )


def to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Partition:
    pixels: np.ndarray  # uint8 (N, 3, 32, 32)
    labels: np.ndarray  # int64 (N,)
    source: str  # "train" or "test"
    indices: np.ndarray  # positions in the source array

    def __len__(self):
        return len(self.labels)

    @cached_property
    def images(self) -> np.ndarray:
        """Float32 images in [0, 1]."""
        return to_float(self.pixels)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return to_float(self.pixels[idx]), self.labels[idx]


@dataclass(frozen=True)
class DatasetSplit:
    target_train: Partition
    target_test: Partition
    adv_train: Partition
    adv_test: Partition
    target_classes: tuple[str, ...] = ("cat", "dog")
    source: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def target_labels(self) -> tuple[int, ...]:
        return tuple(CLASSES.index(c) for c in self.target_classes)

    def partition(self, name: str) -> Partition:
        if name not in PARTITIONS:
            raise KeyError(f"unknown partition {name!r}")
        return getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {name: len(self.partition(name)) for name in PARTITIONS}

    def binary_labels(self, labels: np.ndarray) -> np.ndarray:
        """Map target-class CIFAR labels to 0..k-1 in ``target_classes`` order."""
        lut = np.full(10, -1, np.int64)
        for i, c in enumerate(self.target_labels):
            lut[c] = i
        out = lut[labels]
        if (out < 0).any():
            raise ValueError("labels outside the target classes")
        return out


def _class_ids(names) -> tuple[int, ...]:
    ids = []
    for n in names:
        if n not in CLASSES:
            raise ValueError(f"unknown class name {n!r}; expected one of {CLASSES}")
        ids.append(CLASSES.index(n))
    return tuple(sorted(set(ids)))


def _part(pixels, labels, mask, source):
    idx = np.flatnonzero(mask)
    return Partition(pixels[idx], labels[idx].astype(np.int64), source, idx)


def make_split(raw: RawCifar, target_classes=("cat", "dog")) -> DatasetSplit:
    """Target classes vs. all remaining classes, on the standard train/test split."""
    target_ids = _class_ids(target_classes)
    if len(target_ids) == len(CLASSES):
        raise ValueError("all classes are targets; the adversarial partitions would be empty")
    ordered = tuple(CLASSES[i] for i in target_ids)
    tr_t = np.isin(raw.train_labels, target_ids)
    te_t = np.isin(raw.test_labels, target_ids)
    return DatasetSplit(
        _part(raw.train_pixels, raw.train_labels, tr_t, "train"),
        _part(raw.test_pixels, raw.test_labels, te_t, "test"),
        _part(raw.train_pixels, raw.train_labels, ~tr_t, "train"),
        _part(raw.test_pixels, raw.test_labels, ~te_t, "test"),
        ordered,
        raw.source,
    )


# ------------------------------------------------------------------- manifest


def write_manifest(split: DatasetSplit, path) -> Path:
    """Line-oriented split manifest: ``<source>:<index> <class> <partition>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# ftattack split manifest v1",
        f"# cifar_dir={split.source}",
        f"# target_classes={','.join(split.target_classes)}",
    ]
    for name in PARTITIONS:
        part = split.partition(name)
        lines += [f"{part.source}:{int(i):05d} {CLASSES[int(lb)]} {name}"
                  for i, lb in zip(part.indices, part.labels)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path, cifar_dir=None) -> DatasetSplit:
    """Rebuild a split from a manifest, reloading pixels from the CIFAR directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"split manifest not found: {path}")
    header: dict[str, str] = {}
    entries: dict[str, list[tuple[str, int, str]]] = {p: [] for p in PARTITIONS}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#"):
            if "=" in line:
                k, v = line[1:].strip().split("=", 1)
                header[k] = v
            continue
        if not line.strip():
            continue
        try:
            ref, cls, part = line.split()
            source, idx = ref.split(":")
            entries[part].append((source, int(idx), cls))
        except (ValueError, KeyError) as exc:
            raise DataFormatError(f"{path}:{lineno}: malformed manifest line {line!r}") from exc
    cifar_dir = cifar_dir or header.get("cifar_dir")
    if not cifar_dir:
        raise DataFormatError(f"{path}: no cifar_dir header and none given")
    raw = load_cifar10(cifar_dir)
    targets = tuple(header.get("target_classes", "cat,dog").split(","))
    parts = {}
    for name, rows in entries.items():
        source = rows[0][0] if rows else ("train" if name.endswith("train") else "test")
        pixels = raw.train_pixels if source == "train" else raw.test_pixels
        labels = raw.train_labels if source == "train" else raw.test_labels
        idx = np.array([r[1] for r in rows], dtype=np.int64)
        got = [CLASSES[int(lb)] for lb in labels[idx]]
        if got != [r[2] for r in rows]:
            raise DataFormatError(f"{path}: manifest classes disagree with {cifar_dir}")
        parts[name] = Partition(pixels[idx], labels[idx].astype(np.int64), source, idx)
    return DatasetSplit(**parts, target_classes=targets, source=str(cifar_dir))


# ---------------------------------------------------------------------- batches


def batch_indices(n: int, batch_size: int, seed: int, epoch: int):
    """Indices of one shuffled epoch, drawn from a counter-based generator."""
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, epoch]))
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def iterate_batches(n: int, batch_size: int, seed: int):
    """Endless stream of full batches; reshuffled every epoch."""
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    epoch = 0
    while True:
        yield from batch_indices(n, batch_size, seed, epoch)
        epoch += 1


# -------------------------------------------------------------------------- PNG


def export_png(images, labels, out_dir, start_index: int = 0, indices=None) -> list[Path]:
    """Write 8-bit RGB PNGs named ``{index:06d}_{class}.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pix = to_uint8(images)
    if indices is None:
        indices = range(start_index, start_index + len(pix))
    paths = []
    for img, lb, idx in zip(pix, labels, indices):
        name = CLASSES[int(lb)] if isinstance(lb, (int, np.integer)) else str(lb)
        path = out_dir / f"{int(idx):06d}_{name}.png"
        Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0)), "RGB").save(path)
        paths.append(path)
    return paths


def diff_images(a, b) -> np.ndarray:
    """``|a - b|`` min-max normalized per image; identical pairs give zeros."""
    d = np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
    lo = d.min(axis=(1, 2, 3), keepdims=True)
    hi = d.max(axis=(1, 2, 3), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (d - lo) / span, 0.0)


def diff_png(a, b, out_dir, labels=None, start_index: int = 0, indices=None) -> list[Path]:
    if labels is None:
        labels = ["diff"] * len(a)
    return export_png(diff_images(a, b), labels, out_dir, start_index, indices)


def read_png(path) -> np.ndarray:
    """Load a PNG written by :func:`export_png` as a (3, H, W) float32 image."""
    arr = np.asarray(Image.open(path).convert("RGB"))
    return to_float(arr.transpose(2, 0, 1))
