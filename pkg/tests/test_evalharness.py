import json

import numpy as np
import pytest

from ftattack import evalharness as E
from ftattack import generator as G
from ftattack import victim as V
from ftattack.data import DatasetSplit, Partition

VICTIM = V.init_victim((4, 6, 8), 0)
# true labels: 6 cats (3) and 4 dogs (5)
TRUE = np.array([3, 3, 3, 3, 3, 3, 5, 5, 5, 5])
# stub predictions encoded in pixel (0, 0, 0): 0 -> cat, 1 -> dog
PRED_ORIG = [0, 0, 0, 0, 0, 1, 1, 1, 0, 0]   # cat 5/6, dog 2/4
PRED_ADV = [0, 0, 1, 1, 1, 1, 0, 0, 0, 1]    # cat 2/6, dog 1/4


def encode(pred):
    imgs = np.full((len(pred), 3, 32, 32), 0.25, np.float32)
    imgs[:, 0, 0, 0] = pred
    return imgs


def fixture_split():
    pix = (encode(PRED_ORIG) * 255).round().astype(np.uint8)
    part = Partition(pix, TRUE.copy(), "test", np.arange(10))
    empty = Partition(pix[:0], TRUE[:0], "train", np.arange(0))
    return DatasetSplit(empty, part, empty, empty)


@pytest.fixture
def stub_predict(monkeypatch):
    monkeypatch.setattr(V, "predict", lambda params, imgs: (imgs[:, 0, 0, 0] > 0.5).astype(np.int64))


def test_hand_counted_accuracy(stub_predict):
    r = E.evaluate_attack(VICTIM, None, fixture_split(), "stub", adversarial=encode(PRED_ADV))
    assert r.counts == {"cat": 6, "dog": 4}
    assert r.original_acc == pytest.approx({"cat": 500 / 6, "dog": 50.0})
    assert r.adversarial_acc == pytest.approx({"cat": 200 / 6, "dog": 25.0})
    assert r.original_pred == {"cat": {"cat": 5, "dog": 1}, "dog": {"cat": 2, "dog": 2}}
    assert r.adversarial_pred == {"cat": {"cat": 2, "dog": 4}, "dog": {"cat": 3, "dog": 1}}
    assert r.drop("cat") == pytest.approx(50.0)
    assert r.mean_drop == pytest.approx(37.5)


def test_identity_generator_equal_accuracy(tiny_split):
    r = E.evaluate_attack(VICTIM, None, tiny_split, "id")
    assert r.original_acc == r.adversarial_acc
    assert r.original_pred == r.adversarial_pred
    assert r.mean_ssim == pytest.approx(1.0) and r.mean_mae == 0.0


def test_with_generator(tiny_split):
    gen = G.init_generator(4, 0)
    r = E.evaluate_attack(VICTIM, gen, tiny_split, "g")
    assert set(r.classes) == {"cat", "dog"}
    assert all(0 <= v <= 100 for v in (*r.original_acc.values(), *r.adversarial_acc.values()))
    assert r.mean_mae > 0


def test_mismatches(tiny_split):
    three = V.init_victim((4, 6, 8), 0)
    three.tensors["fc.weight"] = np.zeros((3, 8), np.float32)
    with pytest.raises(E.ReportMismatchError):
        E.evaluate_attack(three, None, tiny_split)
    with pytest.raises(E.ReportMismatchError):
        E.evaluate_attack(VICTIM, None, tiny_split, adversarial=np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(ValueError):
        E.AttackReport(("cat",), {"cat": 1}, {"cat": 101.0}, {"cat": 0.0}, {}, {}, 1.0, 0.0)


def make_report(stub=True):
    return E.AttackReport(("cat", "dog"), {"cat": 6, "dog": 4}, {"cat": 83.33, "dog": 50.0},
                          {"cat": 33.33, "dog": 25.0},
                          {"cat": {"cat": 5, "dog": 1}, "dog": {"cat": 2, "dog": 2}},
                          {"cat": {"cat": 2, "dog": 4}, "dog": {"cat": 3, "dog": 1}},
                          0.8123, 0.0311, "small-cnn", {"seed": 0})


def test_render_deterministic_and_round_trip(tmp_path):
    r = make_report()
    for fmt in ("text", "json", "csv"):
        assert E.report_render(r, fmt) == E.report_render(make_report(), fmt)
    assert E.AttackReport.from_dict(json.loads(E.report_render(r, "json"))) == r
    paths = E.write_report(r, tmp_path / "rep")
    assert [p.suffix for p in paths] == [".txt", ".json", ".csv"]
    assert E.read_report(tmp_path / "rep.json") == r
    with pytest.raises(ValueError):
        E.report_render(r, "xml")


def test_table_has_four_accuracy_cells_per_victim():
    other = E.AttackReport.from_dict({**make_report().to_dict(), "victim_name": "enriched"})
    table = E.render_table([make_report(), other])
    rows = [ln for ln in table.splitlines() if ln.startswith(("small-cnn", "enriched"))]
    assert len(rows) == 2
    for row in rows:
        cells = [c for c in row.replace("|", " ").split()[1:]]
        assert len(cells) == 4 and all(float(c) >= 0 for c in cells)
    assert "83.33" in rows[0] and "33.33" in rows[0]


def test_text_exposes_prediction_counts():
    text = E.report_render(make_report(), "text")
    assert "adversarial cat    n=6     cat=2  dog=4" in text
    assert "mean SSIM" in text and "config " in text


def test_triptych_export(tmp_path, rng):
    a = rng.random((3, 3, 32, 32))
    paths = E.export_triptychs(a, a * 0.5, ["cat", "dog", "cat"], tmp_path, k=2, indices=[7, 9, 11])
    assert [p.name for p in paths] == ["000007_cat_triptych.png", "000009_dog_triptych.png"]
    strip = E.triptych(a[0], a[0])
    assert strip.shape == (128, 3 * 128 + 2 * 8, 3)
    assert not strip[:, -128:].any()
