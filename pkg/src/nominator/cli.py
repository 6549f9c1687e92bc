"""Command-line entry point: corpus generation, ingestion, training, evaluation.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 numeric
failure (non-finite loss or a failed gradient check). Every run logs its
fully resolved configuration to stderr. The NOMINATOR_SEED environment
variable overrides --seed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import tensor as T
from .checks import EMBEDDER_KINDS, GradcheckFailure, embedder_gradcheck
from .dom import (
    DomError, EmptyCorpus, FeatureConfig, corpus_stats, load_corpus,
    load_manifest, load_page_json, parse_html, save_page_json,
)
from .embedders import EmbedderConfig
from .evaluation import (
    EvaluationError, evaluate_model, nominate, write_history_csv, write_metrics_csv,
)
from .report import render_history_figures, render_metrics_figure
from .synthgen import ConfigError, GenConfig, generate_corpus
from .training import (
    EmptyTrainSet, NonFiniteLoss, TrainConfig, TrainingError, fit,
    load_checkpoint, save_checkpoint, split_pages,
)

GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Bad flags, unknown config keys, or missing required arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


# option dest -> (dotted config key, default)
_OPTIONS = {
    "corpus": ("io.corpus", None),
    "out": ("io.out", None),
    "checkpoint": ("io.checkpoint", None),
    "page": ("io.page", None),
    "split": ("io.split", "test"),
    "model": ("model.kind", "gcn-mean"),
    "dim": ("model.dim", 150),
    "layers": ("model.layers", 2),
    "heads": ("model.heads", 2),
    "text_dim": ("features.text_dim", 0),
    "epochs": ("train.epochs", 50),
    "lr": ("train.lr", 1e-3),
    "M": ("train.M", None),  # resolved to 10 basic / 20 with augmentation
    "K": ("train.K", 5),
    "T": ("train.T", 50),
    "augment": ("train.augment", "off"),
    "batch_pages": ("train.batch_pages", 8),
    "val_fraction": ("train.val_fraction", 0.1),
    "seed": ("run.seed", 0),
    "workers": ("run.workers", 1),
    "pages": ("gen.pages", 100),
    "distractors": ("gen.distractors", 3),
    "jitter": ("gen.jitter", 30.0),
    "duplicates": ("gen.duplicates", 2),
    "min_nodes": ("gen.min_nodes", 60),
    "max_nodes": ("gen.max_nodes", 300),
    "context_only_subject": ("gen.context_only_subject", True),
}
_KEY_TO_DEST = {key: dest for dest, (key, _) in _OPTIONS.items()}


def _bool_flag(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="nominator", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser, *names: str) -> None:
        p.add_argument("--config", help="JSON or key=value config file; flags win")
        if "corpus" in names:
            p.add_argument("--corpus", help="corpus directory")
        if "out" in names:
            p.add_argument("--out", help="output directory")
        if "seed" in names:
            p.add_argument("--seed", type=int)
        if "workers" in names:
            p.add_argument("--workers", type=int)

    p = sub.add_parser("generate", help="write a synthetic labeled corpus")
    common(p, "out", "seed")
    p.add_argument("--pages", type=int)
    p.add_argument("--distractors", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--duplicates", type=int)
    p.add_argument("--min-nodes", dest="min_nodes", type=int)
    p.add_argument("--max-nodes", dest="max_nodes", type=int)
    p.add_argument("--context-only-subject", dest="context_only_subject", type=_bool_flag)
    p.add_argument("--text-dim", dest="text_dim", type=int)

    p = sub.add_parser("ingest", help="parse a directory of HTML files into canonical JSON")
    common(p, "corpus", "out")

    p = sub.add_parser("stats", help="print corpus statistics as JSON")
    common(p, "corpus")

    p = sub.add_parser("train", help="train a model and write checkpoint, history, figures")
    common(p, "corpus", "out", "seed", "workers")
    p.add_argument("--model", choices=EMBEDDER_KINDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--M", dest="M", type=int)
    p.add_argument("--K", dest="K", type=int)
    p.add_argument("--T", dest="T", type=int)
    p.add_argument("--augment", choices=("off", "once", "every"))
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--batch-pages", dest="batch_pages", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write metrics CSV + figure")
    common(p, "corpus", "out", "workers")
    p.add_argument("--checkpoint", help="checkpoint JSON file")
    p.add_argument("--split", choices=("train", "val", "test", "all"))

    p = sub.add_parser("nominate", help="print per-class nominees for one page as JSON")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint JSON file")
    p.add_argument("--page", help="canonical page JSON file")

    p = sub.add_parser("gradcheck", help="verify gradients of every architecture")
    common(p, "seed")
    return parser


def _parse_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise UsageError("config file must hold a flat JSON object")
    else:
        obj = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"config line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            try:
                obj[key.strip()] = json.loads(value.strip())
            except json.JSONDecodeError:
                obj[key.strip()] = value.strip()
    unknown = set(obj) - set(_KEY_TO_DEST)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return obj


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, overridden by the config file, overridden by flags, then env."""
    file_values = _parse_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for dest, (key, default) in _OPTIONS.items():
        value = getattr(args, dest, None)
        if value is None and key in file_values:
            value = file_values[key]
        if value is None:
            value = default
        resolved[dest] = value
    env_seed = os.environ.get("NOMINATOR_SEED")
    if env_seed is not None:
        try:
            resolved["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"NOMINATOR_SEED must be an integer, got {env_seed!r}") from None
    if resolved["M"] is None:
        resolved["M"] = 10 if resolved["augment"] == "off" else 20
    resolved["command"] = args.command
    return resolved


def _require(resolved: dict, *names: str) -> None:
    for name in names:
        if resolved[name] is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    return value


def _log_config(resolved: dict) -> None:
    printable = {k: _jsonable(v) for k, v in sorted(resolved.items())}
    print(f"config: {json.dumps(printable)}", file=sys.stderr)


# --- Command handlers -----------------------------------------------------------


def _cmd_generate(resolved: dict) -> int:
    _require(resolved, "out")
    cfg = GenConfig(
        seed=resolved["seed"], n_pages=resolved["pages"],
        min_nodes=resolved["min_nodes"], max_nodes=resolved["max_nodes"],
        distractors_per_class=resolved["distractors"],
        distractor_jitter=resolved["jitter"],
        duplicate_containers=resolved["duplicates"],
        context_only_subject=resolved["context_only_subject"],
        text_dim=resolved["text_dim"],
    )
    splits = generate_corpus(cfg, resolved["out"])
    print(json.dumps({
        "out": str(resolved["out"]),
        "pages": cfg.n_pages,
        "splits": {k: len(v) for k, v in splits.items()},
    }))
    return 0


def _cmd_ingest(resolved: dict) -> int:
    _require(resolved, "corpus", "out")
    src = Path(resolved["corpus"])
    if not src.is_dir():
        raise EmptyCorpus(f"{src} is not a directory")
    files = sorted([*src.glob("*.html"), *src.glob("*.htm")])
    if not files:
        raise EmptyCorpus(f"no HTML files in {src}")
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    for file in files:
        tree = parse_html(file.read_bytes(), page_id=file.stem)
        (out / f"{file.stem}.json").write_bytes(save_page_json(tree))
    print(json.dumps({"ingested": len(files), "out": str(out)}))
    return 0


def _cmd_stats(resolved: dict) -> int:
    _require(resolved, "corpus")
    stats = corpus_stats(load_corpus(resolved["corpus"]))
    print(json.dumps(dataclasses.asdict(stats)))
    return 0


def _configs_from_resolved(resolved: dict) -> tuple[EmbedderConfig, FeatureConfig, TrainConfig]:
    feature_cfg = FeatureConfig(text_dim=resolved["text_dim"])
    try:
        embedder_cfg = EmbedderConfig(
            kind=resolved["model"], input_dim=feature_cfg.dim, dim=resolved["dim"],
            layers=resolved["layers"], heads=resolved["heads"],
        )
        train_cfg = TrainConfig(
            epochs=resolved["epochs"], M=resolved["M"], K=resolved["K"],
            T=resolved["T"], augment=resolved["augment"], seed=resolved["seed"],
            batch_pages=resolved["batch_pages"], lr=resolved["lr"],
            val_fraction=resolved["val_fraction"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return embedder_cfg, feature_cfg, train_cfg


def _cmd_train(resolved: dict) -> int:
    _require(resolved, "corpus", "out")
    embedder_cfg, feature_cfg, train_cfg = _configs_from_resolved(resolved)
    pages = load_corpus(resolved["corpus"])
    manifest = load_manifest(resolved["corpus"])
    train_pages, val_pages, _ = split_pages(pages, manifest, train_cfg.val_fraction)
    checkpoint, history = fit(train_pages, val_pages, embedder_cfg, feature_cfg, train_cfg)
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(checkpoint, out / "checkpoint.json")
    write_history_csv(history, out / "history.csv")
    render_history_figures(history, out)
    print(json.dumps({
        "checkpoint": str(out / "checkpoint.json"),
        "best_epoch": checkpoint.best_epoch,
        "best_val_loss": checkpoint.best_val_loss,
        "final_val_nom_acc": history[-1].val_nom_acc if history else None,
    }))
    return 0


def _select_split(pages, manifest, split: str):
    if split == "all" or manifest is None:
        return pages
    by_id = {p.page_id: p for p in pages}
    return [by_id[i] for i in manifest.get(split, []) if i in by_id]


def _cmd_eval(resolved: dict) -> int:
    _require(resolved, "corpus", "checkpoint", "out")
    checkpoint = load_checkpoint(resolved["checkpoint"])
    model = checkpoint.to_model()
    pages = _select_split(
        load_corpus(resolved["corpus"]), load_manifest(resolved["corpus"]), resolved["split"]
    )
    if not pages:
        raise EmptyCorpus(f"split {resolved['split']!r} selects no pages")
    report = evaluate_model(
        model, pages, M=checkpoint.train_config.M, seed=checkpoint.train_config.seed,
        workers=resolved["workers"],
    )
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, out / "metrics.csv")
    render_metrics_figure(report, out)
    print(json.dumps({
        "average_accuracy": report.average_accuracy,
        "per_class": {cls.name.lower(): report.per_class_accuracy[cls]
                      for cls in report.per_class_accuracy},
        "metrics": str(out / "metrics.csv"),
    }))
    return 0


def _cmd_nominate(resolved: dict) -> int:
    _require(resolved, "checkpoint", "page")
    model = load_checkpoint(resolved["checkpoint"]).to_model()
    tree = load_page_json(Path(resolved["page"]).read_bytes())
    result = nominate(model, tree)
    print(json.dumps({
        cls.name.lower(): {"node_id": nom.node_id, "probability": nom.probability}
        for cls, nom in result.entries.items()
    }))
    return 0


def _cmd_gradcheck(resolved: dict) -> int:
    worst = 0.0
    for kind in EMBEDDER_KINDS:
        err = max(
            embedder_gradcheck(kind, resolved["seed"] + s) for s in range(5)
        )
        worst = max(worst, err)
        print(f"{kind}: max_rel_err={err:.3e}")
    print(f"overall: max_rel_err={worst:.3e} tolerance={GRADCHECK_TOLERANCE:g}")
    if worst >= GRADCHECK_TOLERANCE:
        raise GradcheckFailure(f"max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:g}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "ingest": _cmd_ingest,
    "stats": _cmd_stats,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "nominate": _cmd_nominate,
    "gradcheck": _cmd_gradcheck,
}


def run(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        resolved = resolve_config(args)
        _log_config(resolved)
        return _COMMANDS[args.command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLoss, T.NonFiniteValue, GradcheckFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DomError, ConfigError, TrainingError, EvaluationError, T.TensorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
