"""Paired-eye retinopathy grading tools: generate, inspect, train, evaluate, saliency.

Exit codes: 0 ok, 2 usage/config error, 3 IO error, 4 non-finite loss.

``train`` reads an optional ``--config`` file of ``key=value`` lines (``#``
comments allowed). Keys are field names of the training, loss and backbone
configuration, e.g. ``lr=0.01``, ``lam=0.1``, ``margin=2``, ``backbone=tiny-cnn``.
Explicit flags override the file, which overrides the defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    ManifestError,
    NumericError,
    UndefinedCorrelationError,
    load_manifest,
    pair_patients,
    pearson_correlation,
)
from .losses import LossConfig
from .model import BackboneSpec
from .trainer import TrainConfig

LOGGER = logging.getLogger("binocular_dr")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# -- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    from .synth import SynthConfig, generate_dataset

    kwargs = dict(
        n_pairs=args.n_pairs,
        image_size=args.image_size,
        target_rho=args.rho,
        seed=args.seed,
        lesion_strength=args.lesion_strength,
        mirror_fraction=args.mirror_fraction,
        test_fraction=args.test_fraction,
    )
    if args.marginal:
        kwargs["marginal"] = tuple(float(v) for v in args.marginal.split(","))
    config = SynthConfig(**kwargs)
    manifest = generate_dataset(config, args.out, workers=args.workers)
    pairs = [p for split in ("train", "test") for p in pair_patients(manifest, split)]
    rho = pearson_correlation([p.left.grade for p in pairs], [p.right.grade for p in pairs])
    print(f"manifest: {Path(args.out) / 'manifest.csv'}")
    print(f"pairs: {len(pairs)}  measured rho: {rho:.4f}  (target {config.target_rho})")
    return EXIT_OK


# -- inspect ----------------------------------------------------------------

def grade_statistics(pairs) -> dict:
    """Left/right marginals, |C_l - C_r| histogram and Pearson rho of paired grades."""
    left = [p.left.grade for p in pairs]
    right = [p.right.grade for p in pairs]
    try:
        rho = pearson_correlation(left, right)
        note = None
    except (UndefinedCorrelationError, ValueError) as exc:
        rho, note = None, str(exc)
    diff = [abs(a - b) for a, b in zip(left, right)]
    return {
        "n_pairs": len(pairs),
        "pearson_rho": rho,
        "pearson_note": note,
        "left_counts": np.bincount(left, minlength=5).tolist() if left else [0] * 5,
        "right_counts": np.bincount(right, minlength=5).tolist() if right else [0] * 5,
        "abs_diff_counts": np.bincount(diff, minlength=5).tolist() if diff else [0] * 5,
    }


def cmd_inspect(args) -> int:
    manifest = load_manifest(args.manifest)
    pairs = [p for split in ("train", "test") for p in pair_patients(manifest, split)]
    stats = grade_statistics(pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    plt = _plt()
    levels = np.arange(5)

    def bar(name, counts, xlabel):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar(levels, counts, color="tab:blue")
        ax.set_xticks(levels)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("patients")
        fig.tight_layout()
        fig.savefig(out / name, dpi=100)
        plt.close(fig)

    bar("left_grades.png", stats["left_counts"], "left-eye grade")
    bar("abs_grade_difference.png", stats["abs_diff_counts"], "|left - right| grade")
    bar("right_grades.png", stats["right_counts"], "right-eye grade")

    # jitter is for display only; statistics use the integer grades
    rng = np.random.default_rng(args.seed)
    left = np.array([p.left.grade for p in pairs], dtype=float)
    right = np.array([p.right.grade for p in pairs], dtype=float)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(left + rng.uniform(-0.3, 0.3, left.size), right + rng.uniform(-0.3, 0.3, right.size), s=4, alpha=0.3)
    ax.set_xlabel("left-eye grade")
    ax.set_ylabel("right-eye grade")
    rho = stats["pearson_rho"]
    ax.set_title("rho undefined" if rho is None else f"rho = {rho:.3f}")
    fig.tight_layout()
    fig.savefig(out / "grade_scatter.png", dpi=100)
    plt.close(fig)

    _write_json(out / "stats.json", stats)
    print(f"pearson rho: {'undefined' if rho is None else f'{rho:.4f}'}  ({stats['n_pairs']} pairs)")
    print(f"wrote {out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------

_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_LOSS_FIELDS = {f.name: f for f in fields(LossConfig)}
_SPEC_ALIASES = {"backbone": "name", "embedding_dim": "embedding_dim", "pretrained_weights": "pretrained_weights"}
_ALIASES = {"lambda": "lam", "monitor": "monitor_metric"}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[_ALIASES.get(key, key).replace("-", "_")] = value
    return values


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if value.lower() in ("none", "null", ""):
        return None
    try:
        return int(value)
    except ValueError:
        return value


def build_configs(file_values: dict, flag_values: dict) -> tuple[TrainConfig, LossConfig, BackboneSpec]:
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    train_defaults, loss_defaults, spec_defaults = TrainConfig(), LossConfig(), BackboneSpec()
    train_kw, loss_kw, spec_kw = {}, {}, {}
    for key, value in merged.items():
        key = _ALIASES.get(key, key)
        if key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(value, getattr(train_defaults, key))
        elif key == "class_weights":
            loss_kw[key] = tuple(float(v) for v in str(value).split(",")) if isinstance(value, str) else value
        elif key in _LOSS_FIELDS:
            loss_kw[key] = _coerce(value, getattr(loss_defaults, key))
        elif key in _SPEC_ALIASES:
            name = _SPEC_ALIASES[key]
            spec_kw[name] = _coerce(value, getattr(spec_defaults, name))
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if "class_weights" in loss_kw and "class_weighting" not in train_kw:
        train_kw["class_weighting"] = "given"
    if spec_kw.get("name") == "resnet50" and "embedding_dim" not in spec_kw:
        spec_kw["embedding_dim"] = 2048
    try:
        return TrainConfig(**train_kw), LossConfig(**loss_kw), BackboneSpec(**spec_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    from .trainer import train

    file_values = read_config_file(args.config) if args.config else {}
    flags = {
        "backbone": args.backbone,
        "embedding_dim": args.embedding_dim,
        "pretrained_weights": args.pretrained_weights,
        "mode": args.mode,
        "lam": args.lam,
        "margin": args.margin,
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "momentum": args.momentum,
        "plateau_patience": args.plateau_patience,
        "plateau_factor": args.plateau_factor,
        "monitor_metric": args.monitor,
        "image_size": args.image_size,
        "augment": False if args.no_augment else None,
        "synchronized_augment": True if args.synchronized_augment else None,
        "standardization": args.standardization,
        "eval_split": args.eval_split,
        "distance_on": args.distance_on,
        "class_weights": args.class_weights,
        "workers": args.workers,
    }
    train_cfg, loss_cfg, spec = build_configs(file_values, flags)
    manifest = load_manifest(args.manifest)
    print("run configuration:")
    print(f"  backbone={spec.name} embedding_dim={spec.embedding_dim} mode={train_cfg.mode}")
    print(
        f"  lr={train_cfg.lr} weight_decay={train_cfg.weight_decay} momentum={train_cfg.momentum} "
        f"batch_size={train_cfg.batch_size} epochs={train_cfg.epochs}"
    )
    print(
        f"  plateau: x{train_cfg.plateau_factor} after {train_cfg.plateau_patience} stale epochs "
        f"(monitor {train_cfg.monitor_metric} on {train_cfg.eval_split})"
    )
    print(f"  lambda={loss_cfg.lam} margin={loss_cfg.margin} seed={train_cfg.seed}")
    if train_cfg.eval_split == "test":
        print("  note: LR schedule and best checkpoint are driven by the test split; "
              "use --eval-split validation to avoid tuning on test data")
    result = train(manifest, spec, train_cfg, loss_cfg, args.out)
    last = result.history[-1]
    if last.eval_metrics is not None:
        m = last.eval_metrics
        auc = "n/a" if m.auc is None else f"{m.auc:.4f}"
        print(f"final epoch {last.epoch}: ACA {m.aca:.4f}  macro-F1 {m.macro_f1:.4f}  AUC {auc}")
    print(f"checkpoints: {result.checkpoint}, {result.best_checkpoint}")
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------

def plot_confusion(confusion, path: Path, title: str = "") -> Path:
    plt = _plt()
    cm = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(cm, cmap="Blues")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=8,
                    color="white" if cm[i, j] > cm.max() / 2 else "black")
    ax.set_xlabel("predicted grade")
    ax.set_ylabel("true grade")
    ax.set_xticks(range(cm.shape[1]))
    ax.set_yticks(range(cm.shape[0]))
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def cmd_evaluate(args) -> int:
    import torch

    from .trainer import evaluate

    torch.manual_seed(args.seed)
    manifest = load_manifest(args.manifest)
    report = evaluate(args.checkpoint, manifest, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report.to_dict())
    plot_confusion(report.confusion, out / "confusion.png", f"{args.split} split")
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(f"ACA {report.aca:.4f}  macro-F1 {report.macro_f1:.4f}  AUC {auc}")
    print(f"wrote {out / 'metrics.json'}")
    return EXIT_OK


# -- saliency ---------------------------------------------------------------

def cmd_saliency(args) -> int:
    import torch

    from .model import load_checkpoint
    from .pipeline import ImageStore
    from .saliency import export_pair_saliency

    torch.manual_seed(args.seed)
    manifest = load_manifest(args.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    store = ImageStore(manifest.root)
    for pid in args.patient:
        try:
            pair = manifest.find_pair(pid)
        except KeyError as exc:
            raise ConfigError(exc.args[0]) from None
        paths = export_pair_saliency(ckpt, pair, args.out, store, args.target_class, args.layer)
        print(f"{pid}: {paths[0]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binocular-dr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic paired dataset")
    g.add_argument("--n-pairs", type=int, default=500)
    g.add_argument("--rho", type=float, default=0.85)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--mirror-fraction", type=float, default=0.7)
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--lesion-strength", type=float, default=2.0)
    g.add_argument("--marginal", help="five comma-separated grade probabilities")
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("inspect", help="grade statistics and correlation plots")
    i.add_argument("--manifest", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0, help="seed for the scatter-plot jitter")
    i.set_defaults(func=cmd_inspect)

    t = sub.add_parser("train", help="train a binocular or monocular model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value configuration file")
    t.add_argument("--backbone")
    t.add_argument("--embedding-dim", type=int)
    t.add_argument("--pretrained-weights")
    t.add_argument("--mode", choices=("binocular", "monocular", "monocular_mse"))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--margin", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--plateau-patience", type=int)
    t.add_argument("--plateau-factor", type=float)
    t.add_argument("--monitor", choices=("aca", "macro_f1", "loss"))
    t.add_argument("--image-size", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--synchronized-augment", action="store_true")
    t.add_argument("--standardization", choices=("dataset", "image", "none"))
    t.add_argument("--eval-split", choices=("test", "validation", "train"))
    t.add_argument("--distance-on", choices=("embedding", "logits"))
    t.add_argument("--class-weights", help="five comma-separated weights (disables inverse-frequency weighting)")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("saliency", help="export paired Grad-CAM composites")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--patient", required=True, action="append")
    s.add_argument("--out", required=True)
    s.add_argument("--target-class", type=int)
    s.add_argument("--layer")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_saliency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ManifestError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
