import json

from ftattack import pipeline as P
from ftattack import victim as V
from ftattack.trainer import TrainConfig

VCFG = V.VictimConfig(iterations=4, batch_size=8, widths=(4, 6, 8), augment="base")
GCFG = TrainConfig(iterations=3, batch_size=4, hidden_width=4)


def test_artifacts_and_repeatability(tiny_split, tmp_path):
    a = P.run_pipeline(tiny_split, tmp_path / "a", VCFG, GCFG, n_triptych=2)
    b = P.run_pipeline(tiny_split, tmp_path / "b", VCFG, GCFG, n_triptych=2)
    assert a.metrics() == b.metrics()
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"bank.ftak", "bank.png", "split.manifest", "victim.ftak", "victim_log.csv",
            "victim_log.png", "gen.ftak", "gen_log.csv", "gen_log.png", "report.txt",
            "report.json", "report.csv", "report_identity.json", "report_accuracy.png",
            "triptychs.png", "timings.json"} <= names
    assert len(list((tmp_path / "a" / "triptychs").glob("*.png"))) == 2
    assert a.identity_report.original_acc == a.identity_report.adversarial_acc
    fp = a.config["fingerprint"]
    assert json.loads((tmp_path / "a" / "gen.ftak.json").read_text())["fingerprint"] == fp
    assert P.read_log(tmp_path / "a" / "gen_log.csv") == a.generator_log
    assert P.read_log(tmp_path / "a" / "victim_log.csv") == a.victim_log


def test_fingerprint_stable():
    assert P.fingerprint({"b": 1, "a": (1, 2)}) == P.fingerprint({"a": [1, 2], "b": 1})
    assert P.fingerprint({"a": 1}) != P.fingerprint({"a": 2})


def test_checkpoint_loaders(tmp_path):
    import pytest
    from ftattack import generator as G
    from ftattack.io import CheckpointFormatError
    assert P.load_generator("identity") is None
    P.save_params(G.init_generator(4, 0), tmp_path / "g.ftak")
    assert P.load_generator(tmp_path / "g.ftak").hidden_width == 4
    with pytest.raises(CheckpointFormatError):
        P.load_victim(tmp_path / "g.ftak")
