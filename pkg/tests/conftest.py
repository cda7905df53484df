import os
from pathlib import Path

import numpy as np
import pytest

CIFAR_DIR = Path(os.environ.get("FTATTACK_CIFAR", "/root/data/cifar-10-batches-bin"))


def cifar_available() -> bool:
    return all((CIFAR_DIR / f).is_file() for f in
               ("data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cifar_dir():
    if not cifar_available():
        pytest.skip(f"CIFAR-10 binaries not found in {CIFAR_DIR} (set FTATTACK_CIFAR)")
    return CIFAR_DIR


@pytest.fixture(scope="session")
def cifar_split(cifar_dir):
    from ftattack.data import load_cifar10, make_split
    return make_split(load_cifar10(cifar_dir))


def synthetic_raw(per_class_train=12, per_class_test=4, seed=0):
    """Tiny CIFAR-shaped dataset; class k images are biased toward brightness k/9."""
    from ftattack.data import RawCifar
    r = np.random.default_rng(seed)

    def make(per):
        labels = np.repeat(np.arange(10, dtype=np.uint8), per)
        r.shuffle(labels)
        base = (labels.astype(float) / 9.0)[:, None, None, None]
        noise = r.random((len(labels), 3, 32, 32))
        pixels = np.clip((0.5 * base + 0.5 * noise) * 255, 0, 255).astype(np.uint8)
        return pixels, labels

    tp, tl = make(per_class_train)
    vp, vl = make(per_class_test)
    return RawCifar(tp, tl, vp, vl, "synthetic")


@pytest.fixture
def tiny_split():
    from ftattack.data import make_split
    return make_split(synthetic_raw())


@pytest.fixture(scope="session")
def synthetic_cifar_dir(tmp_path_factory):
    """Six full-size batch files with random pixels and balanced labels."""
    from ftattack.data import RECORDS_PER_FILE, TEST_FILES, TRAIN_FILES
    out = tmp_path_factory.mktemp("cifar")
    r = np.random.default_rng(99)
    for name in TRAIN_FILES + TEST_FILES:
        labels = np.tile(np.arange(10, dtype=np.uint8), RECORDS_PER_FILE // 10)
        r.shuffle(labels)
        pixels = r.integers(0, 256, (RECORDS_PER_FILE, 3072), dtype=np.uint8)
        (out / name).write_bytes(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from tests.test_acceptance import VERDICTS
    except ImportError:
        return
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
