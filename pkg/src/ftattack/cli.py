"""Command-line front end: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evalharness as E
from . import generator as G
from . import io as fio
from . import plotting
from . import tensor as T
from . import victim as V
from .data import (CLASSES, DataFormatError, export_png, load_cifar10, make_split, read_manifest,
                   write_manifest)
from .ftkernels import build_bank
from .losses import LossWeights
from .pipeline import (fingerprint, load_bank, load_generator, load_victim, run_pipeline,
                       save_bank, save_params, write_log)
from .simnet import SimNet
from .trainer import TrainConfig, gradcheck, train_generator

PROG = "ftattack"


class CliError(Exception):
    """A user-facing failure reported as one line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{PROG}: error: {message}\n")


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="key=value file; command-line flags win")

    p = _Parser(prog=PROG, description="Black-box attack via a fixed edge-kernel simulation network.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    kernels = sub.add_parser("kernels", help="kernel bank utilities")
    ksub = kernels.add_subparsers(dest="kcommand", required=True, parser_class=_Parser)
    kg = ksub.add_parser("gen", parents=[common], help="build the rotated kernel bank")
    kg.add_argument("--size", type=int, default=5)
    kg.add_argument("--angles", type=int, default=12)
    kg.add_argument("--normalize", type=_bool, default=False)
    kg.add_argument("--out", type=Path, required=True)
    kg.set_defaults(func=cmd_kernels_gen)
    ke = ksub.add_parser("export-png", parents=[common], help="write one PNG per kernel")
    ke.add_argument("--bank", type=Path, required=True)
    ke.add_argument("--out", type=Path, required=True)
    ke.add_argument("--scale", type=int, default=16)
    ke.set_defaults(func=cmd_kernels_export)

    data = sub.add_parser("data", help="dataset utilities")
    dsub = data.add_subparsers(dest="dcommand", required=True, parser_class=_Parser)
    ds = dsub.add_parser("split", parents=[common], help="write the target/adversarial split manifest")
    ds.add_argument("--cifar", type=Path, required=True)
    ds.add_argument("--targets", type=_csv_names, default=("cat", "dog"))
    ds.add_argument("--out", type=Path, required=True)
    ds.set_defaults(func=cmd_data_split)

    tv = sub.add_parser("train-victim", parents=[common], help="train the cat/dog classifier")
    tv.add_argument("--split", type=Path, required=True)
    tv.add_argument("--augment", choices=("none", "base", "enriched"), default="base")
    tv.add_argument("--iters", type=int, default=4000)
    tv.add_argument("--batch-size", type=int, default=64)
    tv.add_argument("--widths", type=_csv_ints, default=(32, 64, 128))
    tv.add_argument("--out", type=Path, required=True)
    tv.set_defaults(func=cmd_train_victim)

    d = TrainConfig()
    tg = sub.add_parser("train-generator", parents=[common], help="train the adversarial generator")
    tg.add_argument("--split", type=Path, required=True)
    tg.add_argument("--bank", type=Path, help="kernel bank checkpoint (default: built-in 5x5, 12 angles)")
    tg.add_argument("--alpha", type=float, default=d.weights.alpha)
    tg.add_argument("--beta", type=float, default=d.weights.beta)
    tg.add_argument("--gamma", type=float, default=d.weights.gamma)
    tg.add_argument("--delta", type=float, default=d.weights.delta)
    tg.add_argument("--iters", type=int, default=d.iterations)
    tg.add_argument("--batch-size", type=int, default=d.batch_size)
    tg.add_argument("--hidden-width", type=int, default=d.hidden_width)
    tg.add_argument("--optimizer", choices=("adadelta", "sgd"), default=d.optimizer)
    tg.add_argument("--lr", type=float, default=d.lr)
    tg.add_argument("--momentum", type=float, default=d.momentum)
    tg.add_argument("--log-every", type=int, default=d.log_every)
    tg.add_argument("--out", type=Path, required=True)
    tg.set_defaults(func=cmd_train_generator)

    at = sub.add_parser("attack", parents=[common], help="export original/adversarial/diff triptychs")
    at.add_argument("--gen", required=True, help="generator checkpoint, or 'identity'")
    at.add_argument("--split", type=Path, required=True)
    at.add_argument("--partition", default="target_test")
    at.add_argument("--count", type=int, default=16)
    at.add_argument("--out-images", type=Path, required=True)
    at.set_defaults(func=cmd_attack)

    ev = sub.add_parser("evaluate", parents=[common], help="victim accuracy on original vs. adversarial images")
    ev.add_argument("--victim", type=Path, required=True)
    ev.add_argument("--gen", required=True, help="generator checkpoint, or 'identity'")
    ev.add_argument("--split", type=Path, required=True)
    ev.add_argument("--name", default="small-cnn")
    ev.add_argument("--report", type=Path, required=True, help="output prefix for .txt/.json/.csv/.png")
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--scope", choices=("all", "tensor", "losses", "generator", "victim"), default="all")
    gc.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    gc.set_defaults(func=cmd_gradcheck)

    ra = sub.add_parser("run-all", parents=[common], help="full pipeline into one directory")
    ra.add_argument("--cifar", type=Path, required=True)
    ra.add_argument("--augment", choices=("none", "base", "enriched"), default="base")
    ra.add_argument("--victim-iters", type=int, default=4000)
    ra.add_argument("--gen-iters", type=int, default=d.iterations)
    ra.add_argument("--out", type=Path, required=True)
    ra.set_defaults(func=cmd_run_all)
    return p


# ------------------------------------------------------------------- config


def read_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _leaf_parser(parser: argparse.ArgumentParser, argv) -> argparse.ArgumentParser:
    """The subparser that will handle ``argv``."""
    node = parser
    for tok in argv:
        subs = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not subs:
            break
        if tok in subs[0].choices:
            node = subs[0].choices[tok]
    return node


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is not None:
        cfg = read_config_file(known.config)
        leaf = _leaf_parser(parser, argv)
        dests = {a.dest for a in leaf._actions}
        unknown = sorted(k for k in cfg if k not in dests or k in ("config", "help"))
        if unknown:
            raise CliError(f"{known.config}: unknown config keys: {', '.join(unknown)}")
        for action in leaf._actions:
            if action.dest in cfg:
                action.required = False
        leaf.set_defaults(**cfg)
    return parser.parse_args(argv)


def resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config"}
    return {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(vars(args).items()) if k not in skip}


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")
    return Path(path)


def _split(args):
    return read_manifest(_require(args.split, "split manifest"))


# ------------------------------------------------------------------ commands


def cmd_kernels_gen(args, config):
    bank = build_bank(args.size, args.angles, args.normalize)
    save_bank(bank, args.out, config)
    fig = plotting.plot_kernel_bank(bank, args.out.with_suffix(".png"))
    print(f"wrote {args.out} ({len(bank)} kernels, {bank.size}x{bank.size}, digest {bank.digest()[:16]})")
    print(f"wrote {fig}")


def _kernel_image(k: np.ndarray, scale: int) -> np.ndarray:
    lim = float(np.abs(k).max()) or 1.0
    img = 0.5 + 0.5 * k / lim
    return np.kron(img, np.ones((scale, scale)))


def cmd_kernels_export(args, config):
    bank = load_bank(_require(args.bank, "kernel bank"))
    imgs = np.stack([np.repeat(_kernel_image(k, args.scale)[None], 3, axis=0) for k in bank.stack()])
    names = [f"kernel{int(round(a)):03d}deg" for a in bank.angles]
    paths = export_png(imgs, names, args.out, indices=range(len(bank)))
    (args.out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(paths)} PNGs to {args.out}")


def cmd_data_split(args, config):
    raw = load_cifar10(_require(args.cifar, "CIFAR-10 directory"))
    split = make_split(raw, args.targets)
    write_manifest(split, args.out)
    fio.sidecar(args.out).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    counts = " ".join(f"{k}={v}" for k, v in split.counts().items())
    print(f"wrote {args.out}: {counts}")


def cmd_train_victim(args, config):
    split = _split(args)
    cfg = V.VictimConfig(iterations=args.iters, batch_size=args.batch_size, seed=args.seed,
                         widths=args.widths, augment=args.augment)

    def progress(it, loss):
        if it % 500 == 0:
            print(f"iter {it:5d} loss {loss:.4f}", flush=True)

    params, rows = V.train_victim(split, cfg, progress)
    save_params(params, args.out, config)
    log = write_log(rows, args.out.with_suffix(".csv"), config)
    plotting.plot_victim_curve(rows, args.out.with_suffix(".png"))
    acc = V.accuracy_by_class(params, split)
    print("test accuracy " + " ".join(f"{c}={v:.2f}%" for c, v in acc.items()))
    print(f"wrote {args.out} and {log}")


def cmd_train_generator(args, config):
    split = _split(args)
    bank = load_bank(_require(args.bank, "kernel bank")) if args.bank else build_bank()
    cfg = TrainConfig(iterations=args.iters, batch_size=args.batch_size, seed=args.seed,
                      optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
                      weights=LossWeights(args.alpha, args.beta, args.gamma, args.delta),
                      hidden_width=args.hidden_width, log_every=args.log_every)

    def progress(it, b):
        if it % 250 == 0:
            print(f"iter {it:5d} " + " ".join(f"{k}={v:.4f}" for k, v in b.as_row().items()), flush=True)

    params, rows = train_generator(split, SimNet(bank), cfg, progress)
    save_params(params, args.out, config)
    log = write_log(rows, args.out.with_suffix(".csv"), config)
    plotting.plot_loss_curves(rows, args.out.with_suffix(".png"))
    print(f"wrote {args.out} and {log}")


def cmd_attack(args, config):
    gen = load_generator(args.gen if args.gen == "identity" else _require(Path(args.gen), "generator"))
    split = _split(args)
    part = split.partition(args.partition)
    k = min(args.count, len(part))
    images = part.images[:k]
    adv = images if gen is None else G.generate(gen, images)
    names = [CLASSES[int(lb)] for lb in part.labels[:k]]
    paths = E.export_triptychs(images, adv, names, args.out_images, indices=part.indices[:k])
    plotting.plot_triptychs(images, adv, names, args.out_images / "triptychs.png")
    (args.out_images / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(paths)} triptychs to {args.out_images}")


def cmd_evaluate(args, config):
    victim = load_victim(_require(args.victim, "victim checkpoint"))
    gen = load_generator(args.gen if args.gen == "identity" else _require(Path(args.gen), "generator"))
    split = _split(args)
    report = E.evaluate_attack(victim, gen, split, args.name, config)
    paths = E.write_report(report, args.report)
    fig = plotting.plot_accuracy(report, args.report.with_name(args.report.name + "_accuracy.png"))
    sys.stdout.write(E.report_render(report, "text"))
    print("wrote " + ", ".join(str(p) for p in [*paths, fig]))


def cmd_gradcheck(args, config):
    report = gradcheck(args.scope, args.seed, np.dtype(args.dtype).type)
    for line in report.lines():
        print(line)
    bad = report.failures()
    if bad:
        raise CliError(f"gradcheck failed for {len(bad)} group(s): "
                       + ", ".join(f"{r.scope}/{r.group}" for r in bad))
    print(f"gradcheck passed ({len(report.results)} groups)")


def cmd_run_all(args, config):
    split = make_split(load_cifar10(_require(args.cifar, "CIFAR-10 directory")))
    vcfg = V.VictimConfig(iterations=args.victim_iters, seed=args.seed, augment=args.augment)
    gcfg = TrainConfig(iterations=args.gen_iters, seed=args.seed)
    res = run_pipeline(split, args.out, vcfg, gcfg, progress=lambda m: print(m, flush=True))
    sys.stdout.write(E.report_render(res.report, "text"))
    print(f"artifacts in {args.out}")


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        T.configure_threads()
        config = resolved_config(args)
        config["fingerprint"] = fingerprint(config)
        print(f"config {config['fingerprint']} {json.dumps(config, sort_keys=True)}", flush=True)
        args.func(args, config)
    except CliError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, DataFormatError, fio.CheckpointFormatError, ValueError,
            FloatingPointError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
