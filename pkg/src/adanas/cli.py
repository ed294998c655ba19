"""Command-line entry point for reproducible search, training, and reports.

Every command echoes its fully resolved configuration into the output
directory so a run can be reproduced from its artifacts alone. The
``ADANAS_LOG`` environment variable sets log verbosity (debug/info/warning).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pickle
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .data import (load_dataset, save_dataset, sniff_task_type,
                   toy_task_generator, Vocab, TOY_KINDS)
from .engine import (SearchConfig, derive_from_checkpoint, enumerate_and_rank,
                     evaluate, search, train_child)
from .errors import AdanasError, ConfigError, DataError, TrainingError
from .losses import build_cost_table, cost_report_text
from .ops import ChildGraph
from .space import ChildNet
from .teacher import (ProbeSet, ProbeSettings, load_teacher, save_teacher,
                      synthetic_teacher, train_probes)

log = logging.getLogger("adanas.cli")

TRAINED_CHILD_VERSION = 1

_CONFIG_KEYS = {f.name for f in fields(SearchConfig)}
_PATH_KEYS = {"dataset", "teacher", "synthetic_teacher", "out"}
_OVERRIDE_FLAGS = ("seed", "beta", "gamma", "kd_temp", "tau_start", "tau_end",
                   "epochs", "batch_size", "k_max")


def _setup_logging() -> None:
    level = os.environ.get("ADANAS_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _read_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            payload = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    unknown = set(payload) - _CONFIG_KEYS - _PATH_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return payload


def _resolve_config(args) -> tuple[SearchConfig, dict]:
    """defaults <- config file <- command-line flags."""
    file_vals = _read_config_file(args.config) if getattr(args, "config", None) else {}
    merged = {k: v for k, v in file_vals.items() if k in _CONFIG_KEYS}
    if "operations" in merged:
        merged["operations"] = tuple(merged["operations"])
    for key in _OVERRIDE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    try:
        config = SearchConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    paths = {k: file_vals.get(k) for k in _PATH_KEYS}
    for key in _PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = value
    return config, paths


def _prepare_out(path) -> Path:
    if path is None:
        raise ConfigError("an output directory is required (--out)")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_resolved(out: Path, command: str, config: SearchConfig, paths: dict) -> None:
    inputs = {k: (str(v) if v is not None else None)
              for k, v in paths.items() if k != "out"}
    payload = {"command": command, "config": asdict(config), "inputs": inputs}
    (out / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_meta(out: Path, command: str, started: float) -> None:
    meta = {"command": command, "argv": sys.argv[1:],
            "wall_time": time.perf_counter() - started}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _parse_synthetic_spec(spec: str, default_seed: int) -> dict:
    """'J=12,H=64,seed=3' -> constructor kwargs for a synthetic teacher."""
    out = {"num_layers": 12, "hidden_dim": 64, "seed": default_seed}
    if spec in ("", "default"):
        return out
    names = {"J": "num_layers", "H": "hidden_dim", "seed": "seed"}
    for part in spec.split(","):
        if "=" not in part:
            raise ConfigError(f"bad synthetic teacher spec fragment {part!r}")
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in names:
            raise ConfigError(f"unknown synthetic teacher key {key!r}")
        try:
            out[names[key]] = int(value)
        except ValueError:
            raise ConfigError(f"synthetic teacher {key} must be an integer")
    return out


def _split_ids(view) -> tuple[list, list]:
    ids = view.ids
    cut = max(1, int(0.8 * len(ids)))
    return ids[:cut], ids[cut:]


def _load_or_train_probes(view, teacher_path, seed: int) -> ProbeSet:
    cache = Path(str(teacher_path) + ".probes.json") if teacher_path else None
    if cache is not None and cache.exists():
        log.info("loading cached probes from %s", cache)
        return ProbeSet.load(cache)
    train_ids, dev_ids = _split_ids(view)
    probes = train_probes(view, train_ids, dev_ids, ProbeSettings(seed=seed))
    if cache is not None:
        probes.save(cache)
        log.info("cached probes to %s", cache)
    return probes


def _teacher_for_search(config: SearchConfig, paths: dict, dataset, out: Path):
    if config.gamma == 0.0:
        return None, None
    if paths.get("teacher"):
        view = load_teacher(paths["teacher"])
        probes = _load_or_train_probes(view, paths["teacher"], config.seed)
        return view, probes
    spec = paths.get("synthetic_teacher")
    if spec is None:
        raise ConfigError("gamma > 0 needs --teacher or --synthetic-teacher")
    kwargs = _parse_synthetic_spec(spec, config.seed)
    view = synthetic_teacher(dataset, **kwargs)
    save_teacher(view, out / "teacher.jsonl")
    probes = _load_or_train_probes(view, None, config.seed)
    probes.save(out / "probes.json")
    return view, probes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    out = _prepare_out(args.out)
    dataset = toy_task_generator(args.kind, args.size, args.vocab_size,
                                 seed=args.seed if args.seed is not None else 0)
    path = out / "dataset.tsv"
    save_dataset(dataset, path)
    config, paths = _resolve_config(args)
    _echo_resolved(out, "gen-data", config, {**paths, "dataset": path})
    _write_meta(out, "gen-data", started)
    print(path)
    return 0


def cmd_probe_train(args) -> int:
    started = time.perf_counter()
    out = _prepare_out(args.out)
    view = load_teacher(args.teacher)
    seed = args.seed if args.seed is not None else 0
    train_ids, dev_ids = _split_ids(view)
    settings = ProbeSettings(seed=seed,
                             epochs=args.epochs if args.epochs is not None else 20)
    probes = train_probes(view, train_ids, dev_ids, settings)
    probes.save(out / "probes.json")
    probes.save(Path(str(args.teacher) + ".probes.json"))
    (out / "probe_metrics.json").write_text(json.dumps(
        {"dev_accuracy": probes.dev_accuracy, "epochs": probes.epochs},
        indent=2) + "\n")
    config, paths = _resolve_config(args)
    _echo_resolved(out, "probe-train", config, paths)
    _write_meta(out, "probe-train", started)
    print(json.dumps({"dev_accuracy": probes.dev_accuracy}))
    return 0


def cmd_search(args) -> int:
    started = time.perf_counter()
    config, paths = _resolve_config(args)
    if not paths.get("dataset"):
        raise ConfigError("search needs --dataset (or a dataset key in the config)")
    out = _prepare_out(paths.get("out"))
    dataset = load_dataset(paths["dataset"], sniff_task_type(paths["dataset"]))
    view, probes = _teacher_for_search(config, paths, dataset, out)
    _echo_resolved(out, "search", config, paths)
    search(config, dataset, view=view, probes=probes, out_dir=out)
    _write_meta(out, "search", started)
    print(out / "child.json")
    return 0


def cmd_derive(args) -> int:
    started = time.perf_counter()
    out = _prepare_out(args.out)
    child = derive_from_checkpoint(args.checkpoint)
    child.save(out / "child.json")
    config, paths = _resolve_config(args)
    _echo_resolved(out, "derive", config, paths)
    _write_meta(out, "derive", started)
    print(out / "child.json")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    config, paths = _resolve_config(args)
    if args.epochs is not None:
        config.child_epochs = args.epochs
    if not paths.get("dataset"):
        raise ConfigError("train needs --dataset")
    out = _prepare_out(paths.get("out"))
    child = ChildGraph.load(args.child)
    dataset = load_dataset(paths["dataset"], sniff_task_type(paths["dataset"]))
    net, metrics = train_child(child, dataset, config,
                               seed=config.seed)
    vocab = Vocab.build(dataset, max_len=config.max_len)
    blob = {
        "version": TRAINED_CHILD_VERSION,
        "child": child.to_dict(),
        "vocab_tokens": sorted(vocab.token_to_id, key=vocab.token_to_id.get),
        "max_len": vocab.max_len,
        "num_classes": dataset.num_classes,
        "task_type": dataset.task_type,
        "weights": [t.data.copy() for t in net.weight_tensors()],
        "bn": [(s.running_mean.copy(), s.running_var.copy())
               for s in net.bn_states()],
    }
    with open(out / "trained_child.pkl", "wb") as fh:
        pickle.dump(blob, fh)
    (out / "train_metrics.json").write_text(json.dumps({
        "best_dev_accuracy": metrics.best_dev_accuracy,
        "best_epoch": metrics.best_epoch,
        "final_dev_accuracy": metrics.final_dev_accuracy,
        "final_dev_loss": metrics.final_dev_loss,
        "history": metrics.history,
    }, indent=2) + "\n")
    _echo_resolved(out, "train", config, paths)
    _write_meta(out, "train", started)
    print(json.dumps({"best_dev_accuracy": metrics.best_dev_accuracy,
                      "best_epoch": metrics.best_epoch}))
    return 0


def _load_trained_child(path) -> tuple[ChildNet, Vocab, str]:
    try:
        with open(path, "rb") as fh:
            blob = pickle.load(fh)
    except (OSError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot read trained child {path}: {exc}") from exc
    if blob.get("version") != TRAINED_CHILD_VERSION:
        raise DataError(f"unsupported trained-child version {blob.get('version')!r}")
    child = ChildGraph.from_dict(blob["child"])
    vocab = Vocab(blob["vocab_tokens"], max_len=blob["max_len"])
    net = ChildNet(child, vocab_size=len(vocab), num_classes=blob["num_classes"],
                   seed=0)
    for tensor, arr in zip(net.weight_tensors(), blob["weights"]):
        tensor.data = arr.copy()
    for state, (mean, var) in zip(net.bn_states(), blob["bn"]):
        state.running_mean = mean.copy()
        state.running_var = var.copy()
    return net, vocab, blob["task_type"]


def cmd_eval(args) -> int:
    started = time.perf_counter()
    config, paths = _resolve_config(args)
    if not paths.get("dataset"):
        raise ConfigError("eval needs --dataset")
    net, vocab, task_type = _load_trained_child(args.checkpoint)
    dataset = load_dataset(paths["dataset"], sniff_task_type(paths["dataset"]))
    if dataset.task_type != task_type:
        raise DataError(f"trained child expects {task_type}, dataset is "
                        f"{dataset.task_type}")
    examples = dataset.split_examples(args.split)
    accuracy, per_class = evaluate(net, vocab, examples, dataset.task_type)
    result = {"accuracy": accuracy, "split": args.split,
              "per_class": {str(k): v for k, v in sorted(per_class.items())}}
    print(json.dumps(result))
    if args.out:
        out = _prepare_out(args.out)
        (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
        _echo_resolved(out, "eval", config, paths)
        _write_meta(out, "eval", started)
    return 0


def cmd_cost_report(args) -> int:
    started = time.perf_counter()
    child = ChildGraph.load(args.child)
    table = build_cost_table(child.embed_dim, args.max_len)
    vocab_size = num_classes = None
    config, paths = _resolve_config(args)
    if paths.get("dataset"):
        dataset = load_dataset(paths["dataset"], sniff_task_type(paths["dataset"]))
        vocab_size = len(Vocab.build(dataset, max_len=args.max_len))
        num_classes = dataset.num_classes
    text = cost_report_text(table, child, vocab_size=vocab_size,
                            num_classes=num_classes)
    print(text, end="")
    if args.out:
        out = _prepare_out(args.out)
        (out / "cost_report.txt").write_text(text)
        _echo_resolved(out, "cost-report", config, paths)
        _write_meta(out, "cost-report", started)
    return 0


def cmd_enumerate(args) -> int:
    started = time.perf_counter()
    config, paths = _resolve_config(args)
    if not paths.get("dataset"):
        raise ConfigError("enumerate needs --dataset")
    out = _prepare_out(paths.get("out"))
    dataset = load_dataset(paths["dataset"], sniff_task_type(paths["dataset"]))
    results = enumerate_and_rank(config, dataset, workers=args.workers)
    lines = [json.dumps({"rank": i, "child": r.child.encode(),
                         "dev_loss": r.dev_loss, "dev_accuracy": r.dev_accuracy},
                        sort_keys=True)
             for i, r in enumerate(results, start=1)]
    (out / "ranking.jsonl").write_text("\n".join(lines) + "\n")
    _echo_resolved(out, "enumerate", config, paths)
    _write_meta(out, "enumerate", started)
    print(out / "ranking.jsonl")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *, config=True, seed=True, out=True):
    if config:
        p.add_argument("--config", help="TOML config file (defaults match the "
                                        "published training recipe)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    if out:
        p.add_argument("--out", default=None, help="output directory")


def _add_search_overrides(p: argparse.ArgumentParser):
    p.add_argument("--beta", type=float, default=None,
                   help="efficiency loss coefficient (default 4)")
    p.add_argument("--gamma", type=float, default=None,
                   help="distillation mixing coefficient in [0,1] (default 0.8)")
    p.add_argument("--kd-temp", type=float, default=None,
                   help="distillation temperature (default 1)")
    p.add_argument("--tau-start", type=float, default=None,
                   help="initial Gumbel temperature (default 5.0)")
    p.add_argument("--tau-end", type=float, default=None,
                   help="final Gumbel temperature (default 0.5)")
    p.add_argument("--epochs", type=int, default=None,
                   help="training epochs (default 80)")
    p.add_argument("--batch-size", type=int, default=None,
                   help="batch size (default 32)")
    p.add_argument("--k-max", type=int, default=None,
                   help="maximum stacked layers (default 8)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adanas",
        description="Task-adaptive compression of a frozen teacher into a "
                    "small convolutional network via differentiable "
                    "architecture search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy dataset with a planted rule")
    _add_common(p)
    p.add_argument("--kind", required=True, choices=TOY_KINDS)
    p.add_argument("--size", type=int, default=400, help="example count (default 400)")
    p.add_argument("--vocab-size", type=int, default=40,
                   help="synthetic vocabulary size (default 40)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("probe-train", help="train per-layer probes on a teacher file")
    _add_common(p)
    p.add_argument("--teacher", required=True, help="teacher interchange file")
    p.add_argument("--epochs", type=int, default=None,
                   help="probe training epochs (default 20)")
    p.set_defaults(fn=cmd_probe_train)

    p = sub.add_parser("search", help="run the differentiable architecture search")
    _add_common(p)
    p.add_argument("--dataset", help="TSV dataset path")
    p.add_argument("--teacher", default=None, help="teacher interchange file")
    p.add_argument("--synthetic-teacher", default=None, metavar="SPEC",
                   help='build a synthetic teacher, e.g. "J=12,H=64"')
    _add_search_overrides(p)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("derive", help="argmax child from a search checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("train", help="retrain a derived child from scratch")
    _add_common(p)
    p.add_argument("--child", required=True, help="child architecture JSON")
    p.add_argument("--dataset", help="TSV dataset path")
    p.add_argument("--epochs", type=int, default=None,
                   help="child training epochs (default: search epochs)")
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained child on a split")
    _add_common(p)
    p.add_argument("--child", default=None, help="unused; identity comes from "
                                                 "the trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="trained_child.pkl")
    p.add_argument("--dataset", help="TSV dataset path")
    p.add_argument("--split", default="dev", choices=("train", "dev"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cost-report", help="analytic size/FLOPs report for a child")
    _add_common(p)
    p.add_argument("--child", required=True)
    p.add_argument("--dataset", default=None,
                   help="optional dataset for vocabulary/head accounting")
    p.add_argument("--max-len", type=int, default=128,
                   help="sequence length for FLOP accounting (default 128)")
    p.set_defaults(fn=cmd_cost_report)

    p = sub.add_parser("enumerate", help="train every child in a small space")
    _add_common(p)
    p.add_argument("--dataset", help="TSV dataset path")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel training workers (default 1)")
    _add_search_overrides(p)
    p.set_defaults(fn=cmd_enumerate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AdanasError as exc:
        print(f"error:{exc.category}: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            return 2
        if isinstance(exc, TrainingError):
            return 4
        return 3


if __name__ == "__main__":
    sys.exit(main())
