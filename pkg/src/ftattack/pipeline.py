"""End-to-end run: kernel bank, split, victim, generator, evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np

from . import evalharness as E
from . import generator as G
from . import io as fio
from . import plotting
from . import victim as V
from .data import DatasetSplit, load_cifar10, make_split, write_manifest
from .ftkernels import KernelBank, build_bank
from .simnet import SimNet
from .trainer import TrainConfig, train_generator


def _plain(obj):
    if is_dataclass(obj):
        return {k: _plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def fingerprint(config: dict) -> str:
    """Short stable hash of a JSON-serializable config."""
    blob = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_log(rows, path, config: dict | None = None) -> Path:
    """CSV with a leading ``# config=`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if config is not None:
            fh.write("# config=" + json.dumps(_plain(config), sort_keys=True) + "\n")
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: (int(v) if k == "iter" else float(v)) for k, v in r.items()}
            for r in csv.DictReader(lines)]


def save_bank(bank: KernelBank, path, config=None) -> Path:
    return fio.save_file(path, bank.to_tensors(), config)


def load_bank(path) -> KernelBank:
    return KernelBank.from_tensors(fio.load_file(path))


def save_params(params, path, config=None) -> Path:
    return fio.save_file(path, params.to_tensors(), config)


def load_generator(path) -> G.GeneratorParams | None:
    """``identity`` yields ``None``, which the harness treats as the identity map."""
    if str(path) == "identity":
        return None
    t = fio.load_file(path)
    if "meta.hidden_width" not in t:
        raise fio.CheckpointFormatError(f"{path}: not a generator checkpoint")
    return G.GeneratorParams.from_tensors(t)


def load_victim(path) -> V.VictimParams:
    t = fio.load_file(path)
    if "meta.widths" not in t:
        raise fio.CheckpointFormatError(f"{path}: not a victim checkpoint")
    return V.VictimParams.from_tensors(t)


@dataclass
class PipelineResult:
    out_dir: Path
    report: E.AttackReport
    identity_report: E.AttackReport
    victim_log: list[dict]
    generator_log: list[dict]
    timings: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        """Every logged number, for bitwise comparison between runs."""
        return {
            "report": self.report.to_dict(),
            "identity_report": self.identity_report.to_dict(),
            "victim_log": self.victim_log,
            "generator_log": self.generator_log,
        }


def run_pipeline(split: DatasetSplit, out_dir, victim_cfg: V.VictimConfig = V.VictimConfig(),
                 gen_cfg: TrainConfig = TrainConfig(), bank: KernelBank | None = None,
                 victim_name: str = "small-cnn", n_triptych: int = 8, progress=None) -> PipelineResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank = bank or build_bank()
    config = _plain({"victim": victim_cfg, "generator": gen_cfg, "bank_digest": bank.digest(),
                     "source": split.source, "targets": list(split.target_classes)})
    config["fingerprint"] = fingerprint(config)
    say = progress or (lambda msg: None)
    timings = {}

    save_bank(bank, out / "bank.ftak", config)
    plotting.plot_kernel_bank(bank, out / "bank.png")
    write_manifest(split, out / "split.manifest")

    t = time.perf_counter()
    say("training victim")
    victim, vlog = V.train_victim(split, victim_cfg)
    timings["victim"] = time.perf_counter() - t
    save_params(victim, out / "victim.ftak", config)
    write_log(vlog, out / "victim_log.csv", config)
    plotting.plot_victim_curve(vlog, out / "victim_log.png")

    t = time.perf_counter()
    say("training generator")
    gen, glog = train_generator(split, SimNet(bank), gen_cfg)
    timings["generator"] = time.perf_counter() - t
    save_params(gen, out / "gen.ftak", config)
    write_log(glog, out / "gen_log.csv", config)
    plotting.plot_loss_curves(glog, out / "gen_log.png")

    t = time.perf_counter()
    say("evaluating")
    images = split.target_test.images
    adv = G.generate(gen, images)
    report = E.evaluate_attack(victim, gen, split, victim_name, config, adversarial=adv)
    ident = E.evaluate_attack(victim, None, split, victim_name + " (identity)", config)
    E.write_report(report, out / "report")
    E.write_report(ident, out / "report_identity")
    plotting.plot_accuracy(report, out / "report_accuracy.png")
    names = [split.target_classes[i] for i in split.binary_labels(split.target_test.labels)]
    E.export_triptychs(images, adv, names, out / "triptychs", k=n_triptych,
                       indices=split.target_test.indices)
    plotting.plot_triptychs(images, adv, names, out / "triptychs.png", k=min(n_triptych, 6))
    timings["evaluate"] = time.perf_counter() - t
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return PipelineResult(out, report, ident, vlog, glog, timings, config)


def run_from_cifar(cifar_dir, out_dir, seed: int = 0, augment: str = "base", **kw) -> PipelineResult:
    split = make_split(load_cifar10(cifar_dir))
    vcfg = V.VictimConfig(seed=seed, augment=augment)
    gcfg = TrainConfig(seed=seed)
    return run_pipeline(split, out_dir, vcfg, gcfg, **kw)
