"""Command-line entry point: ``modrec gen | train | eval | report | gradcheck``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace

from .arch import ARCH_IDS, build, default_spec, param_count
from .dataset import (
    DEFAULT_SNRS,
    PROFILES,
    GenerationConfig,
    build_dataset,
    dataset_hash,
    read_dataset,
    read_model,
    split,
    write_dataset,
    write_model,
)
from .errors import ConfigError, IoError, ModrecError
from .synth import SynthConfig

SPLITS = ("train", "val", "test")


@dataclass
class Command:
    name: str
    options: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    threads: int | None = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _u64(text):
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modrec", description="Radio modulation recognition lab.")
    p.add_argument("--config", help="JSON file with generation/synth/train sections")
    p.add_argument("--threads", type=int, help="cap BLAS threads (also MODREC_THREADS)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="synthesize a labeled dataset file")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument(
        "--profile", choices=sorted(PROFILES), default="paper", help="frames per cell: paper 800, smoke-paper 100, smoke 5"
    )
    g.add_argument("--seed", type=_u64, default=0, help="generation seed (default 0)")
    g.add_argument("--snr-min", type=int, help="lowest SNR label in dB (default -20)")
    g.add_argument("--snr-max", type=int, help="highest SNR label in dB (default 18)")
    g.add_argument("--snr-step", type=int, help="SNR grid step in dB (default 2)")
    g.add_argument("--impaired", action="store_true", help="enable CFO, sample-rate offset and multipath")

    t = sub.add_parser("train", help="train one architecture on a dataset file")
    t.add_argument("--data", required=True, help="dataset file from gen")
    t.add_argument("--arch", required=True, choices=ARCH_IDS)
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--seed", type=_u64, default=0, help="init, shuffle and dropout seed")
    t.add_argument("--patience", type=int, help="epochs without improvement before stopping (default 20)")
    t.add_argument("--dropout", type=float, help="dropout rate (default 0.6)")
    t.add_argument("--batch", type=int, dest="batch_size", help="mini-batch size (default 512)")
    t.add_argument("--lr", type=float, dest="learning_rate", help="Adam step size (default 1e-3)")
    t.add_argument("--max-epochs", type=int, help="epoch cap (default 100)")
    t.add_argument("--split-seed", type=_u64, default=0, help="seed of the 60/20/20 split")
    t.add_argument("--history", help="history CSV path (default: next to the model)")
    t.add_argument("--quiet", action="store_true", help="no per-epoch lines")

    e = sub.add_parser("eval", help="evaluate a model on one split of a dataset file")
    e.add_argument("--model", required=True, help="model file from train")
    e.add_argument("--data", required=True, help="dataset file from gen")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--split", choices=SPLITS + ("all",), default="test", help="which part to score (default test)")
    e.add_argument("--split-seed", type=_u64, default=0, help="must match the seed used by train")
    e.add_argument("--label", help="series name in charts (default: architecture id)")

    r = sub.add_parser("report", help="render charts from one or more eval directories")
    r.add_argument("--in", dest="inputs", nargs="+", required=True, help="eval directories or report.json files")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-png", action="store_true", help="skip the matplotlib PNGs")

    c = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    c.add_argument("--seed", type=_u64, default=0, help="seed for inputs and sampled coordinates")
    c.add_argument("--arch", nargs="*", choices=ARCH_IDS, default=list(ARCH_IDS), help="architectures to check (default all)")
    return p


def parse(argv) -> Command:
    ns = build_parser().parse_args(argv)
    opts = vars(ns)
    name = opts.pop("command")
    config_path = opts.pop("config")
    threads = opts.pop("threads")
    config = {}
    if config_path:
        try:
            with open(config_path) as fh:
                config = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
    if threads is None and os.environ.get("MODREC_THREADS"):
        try:
            threads = int(os.environ["MODREC_THREADS"])
        except ValueError as exc:
            raise ConfigError("MODREC_THREADS must be an integer") from exc
    if threads is not None and threads < 1:
        raise ConfigError("thread count must be at least 1")
    return Command(name, opts, config, threads)


# ---------------------------------------------------------------------------
# path checks


def _need_file(path, what):
    if not os.path.isfile(path):
        raise IoError(f"{what} {path!r} does not exist")


def _need_parent(path, what):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise IoError(f"directory for {what} {path!r} does not exist")
    if not os.access(parent, os.W_OK):
        raise IoError(f"directory for {what} {path!r} is not writable")


def _need_dir(path):
    if os.path.exists(path) and not os.path.isdir(path):
        raise IoError(f"output {path!r} exists and is not a directory")
    _need_parent(path, "output directory")


def _section(cfg, key, cls):
    doc = cfg.get(key, {})
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {key} field(s): {', '.join(sorted(unknown))}")
    return doc


# ---------------------------------------------------------------------------
# subcommands


def _generation_config(cmd: Command) -> GenerationConfig:
    o = cmd.options
    gen_doc = dict(_section(cmd.config, "generation", GenerationConfig))
    gen_doc.pop("synth", None)
    synth = SynthConfig.from_dict(cmd.config.get("synth", {}))
    if o["impaired"]:
        synth = replace(synth, channel=SynthConfig.impaired().channel)
    cfg = GenerationConfig(frames_per_cell=PROFILES[o["profile"]], synth=synth)
    if gen_doc:
        gen_doc = {k: tuple(v) if isinstance(v, list) else v for k, v in gen_doc.items()}
        cfg = replace(cfg, **gen_doc)
    snrs = cfg.snrs
    if any(o[k] is not None for k in ("snr_min", "snr_max", "snr_step")):
        lo = o["snr_min"] if o["snr_min"] is not None else min(snrs)
        hi = o["snr_max"] if o["snr_max"] is not None else max(snrs)
        step = o["snr_step"] if o["snr_step"] is not None else 2
        if step < 1 or hi < lo:
            raise ConfigError("SNR range must satisfy snr-min <= snr-max and snr-step >= 1")
        snrs = tuple(range(lo, hi + 1, step))
        bad = [s for s in snrs if s not in DEFAULT_SNRS]
        if bad:
            raise ConfigError(f"SNR values {bad} are outside the -20..18 dB even grid")
        cfg = replace(cfg, snrs=snrs)
    return cfg


def cmd_gen(cmd: Command) -> int:
    o = cmd.options
    _need_parent(o["out"], "output")
    cfg = _generation_config(cmd)
    start = time.perf_counter()
    ds = build_dataset(cfg, o["seed"], workers=cmd.threads or 1)
    ds.meta["profile"] = o["profile"]
    write_dataset(ds, o["out"])
    print(
        f"wrote {len(ds)} examples ({len(cfg.classes)} classes x {len(cfg.snrs)} SNRs x "
        f"{cfg.frames_per_cell}) to {o['out']} in {time.perf_counter() - start:.1f}s"
    )
    print(f"sha256 {dataset_hash(ds)}")
    return 0


def train_config(cmd: Command):
    from .trainer import TrainConfig

    doc = dict(_section(cmd.config, "train", TrainConfig))
    for key in ("patience", "dropout", "batch_size", "learning_rate", "max_epochs"):
        if cmd.options.get(key) is not None:
            doc[key] = cmd.options[key]
    doc["seed"] = cmd.options["seed"]
    return TrainConfig(**doc)


def cmd_train(cmd: Command) -> int:
    from .trainer import export_history, train

    o = cmd.options
    _need_file(o["data"], "dataset")
    _need_parent(o["out"], "model")
    history_path = o["history"] or os.path.splitext(o["out"])[0] + ".history.csv"
    _need_parent(history_path, "history")
    cfg = train_config(cmd)
    data = read_dataset(o["data"])
    train_set, val_set, _ = split(data, o["split_seed"])
    spec = default_spec(o["arch"], num_classes=data.num_classes, dropout=cfg.dropout)
    net = build(spec, cfg.seed)
    print(
        f"training {o['arch']} ({param_count(spec)} parameters) on {len(train_set)} examples, "
        f"validating on {len(val_set)}",
        flush=True,
    )
    net, history = train(net, train_set, val_set, cfg, progress=not o["quiet"])
    write_model(net, o["out"])
    export_history(history, history_path)
    best = history.records[history.best_epoch - 1]
    print(
        f"stopped after {len(history.records)} epochs ({history.stop_reason}); best epoch "
        f"{history.best_epoch} val_loss {best.val_loss:.4f} val_acc {best.val_acc:.4f}"
    )
    print(f"model: {o['out']}\nhistory: {history_path}")
    return 0


def cmd_eval(cmd: Command) -> int:
    from .report import evaluate, render

    o = cmd.options
    _need_file(o["model"], "model")
    _need_file(o["data"], "dataset")
    _need_dir(o["out"])
    net = read_model(o["model"])
    data = read_dataset(o["data"])
    if o["split"] != "all":
        data = split(data, o["split_seed"])[SPLITS.index(o["split"])]
    rep = evaluate(net, data, model=o["label"] or net.spec.arch)
    rep.meta = {"model_file": os.path.basename(o["model"]), "split": o["split"], "examples": len(data)}
    render(rep, o["out"])
    at18 = f"{rep.accuracy[18]:.4f}" if 18 in rep.accuracy else "n/a"
    print(
        f"{rep.model}: overall {rep.overall_accuracy:.4f}, high-SNR mean {rep.high_snr_accuracy:.4f}, "
        f"+18 dB {at18} on {len(data)} {o['split']} examples"
    )
    print(f"report: {o['out']}")
    return 0


def cmd_report(cmd: Command) -> int:
    from .report import load_report, render_comparison

    o = cmd.options
    _need_dir(o["out"])
    for path in o["inputs"]:
        if not os.path.exists(path):
            raise IoError(f"report input {path!r} does not exist")
    reports = [load_report(p) for p in o["inputs"]]
    names = {tuple(r.class_names) for r in reports}
    if len(names) > 1:
        raise ConfigError("reports disagree on the class table")
    paths = render_comparison(reports, o["out"], png=not o["no_png"])
    print("model,overall,high_snr_mean,acc_18")
    for r in reports:
        at18 = r.accuracy.get(18, float("nan"))
        print(f"{r.model},{r.overall_accuracy:.4f},{r.high_snr_accuracy:.4f},{at18:.4f}")
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_gradcheck(cmd: Command) -> int:
    from .gradcheck import TOLERANCE, architecture_check, layer_checks

    seed = cmd.options["seed"]
    ok = True
    print(f"{'check':26s} {'max rel err':>12s} {'coords':>7s}  status")
    results = layer_checks(seed)
    results += [architecture_check(a, seed) for a in cmd.options["arch"]]
    for r in results:
        ok &= r.passed
        print(f"{r.name:26s} {r.max_rel_error:12.3e} {r.coords:7d}  {'ok' if r.passed else 'FAIL'}")
    print(f"all checks below {TOLERANCE:g}" if ok else f"some checks exceed {TOLERANCE:g}")
    return 0 if ok else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


@contextlib.contextmanager
def _thread_limit(n):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run(cmd: Command) -> int:
    try:
        with _thread_limit(cmd.threads):
            return COMMANDS[cmd.name](cmd)
    except (ModrecError, OSError, ValueError, IndexError) as exc:
        print(f"modrec {cmd.name}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        cmd = parse(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ModrecError as exc:
        print(f"modrec: error: {exc}", file=sys.stderr)
        return 1
    return run(cmd)


if __name__ == "__main__":
    sys.exit(main())
