"""Training loop: SGD with weight decay, plateau LR decay, checkpoints, per-epoch evaluation.

Run directory layout::

    out_dir/config.json     effective configuration
    out_dir/history.jsonl   one JSON object per epoch
    out_dir/best.ckpt       best epoch by the monitored metric
    out_dir/last.ckpt       most recent epoch
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import (
    ConfigError,
    DatasetManifest,
    EyeImageRecord,
    NumericError,
    Split,
    pair_patients,
)
from .losses import LossBreakdown, LossConfig, class_weights, hybrid_loss, mse_grade_loss, weighted_cross_entropy
from .metrics import MetricReport, is_better, metric_report
from .model import (
    Backbone,
    BackboneSpec,
    Checkpoint,
    binocular_forward,
    build_backbone,
    load_checkpoint,
    monocular_forward,
    save_checkpoint,
)
from .pipeline import (
    AugmentConfig,
    AugmentParams,
    ImageStore,
    channel_stats,
    epoch_seed,
    make_batches,
    make_image_batches,
    transform_images,
)

LOGGER = logging.getLogger(__name__)

MODES = ("binocular", "monocular", "monocular_mse")
MONITORS = {"aca": True, "macro_f1": True, "loss": False}  # name -> higher is better
EVAL_SPLITS = ("test", "validation", "train")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    weight_decay: float = 1e-8
    momentum: float = 0.0
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    monitor_metric: str = "aca"
    seed: int = 0
    mode: str = "binocular"
    image_size: int | None = None
    augment: bool = True
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_deg: float = 10.0
    synchronized_augment: bool = False
    standardization: str = "dataset"
    class_weighting: str = "inverse"
    eval_split: str = "test"
    validation_fraction: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1")
        if self.monitor_metric not in MONITORS:
            raise ConfigError(f"monitor_metric must be one of {sorted(MONITORS)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.standardization not in ("dataset", "image", "none"):
            raise ConfigError("standardization must be 'dataset', 'image' or 'none'")
        if self.class_weighting not in ("inverse", "given"):
            raise ConfigError("class_weighting must be 'inverse' or 'given'")
        if self.eval_split not in EVAL_SPLITS:
            raise ConfigError(f"eval_split must be one of {EVAL_SPLITS}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: LossBreakdown
    eval_metrics: MetricReport | None
    lr: float
    momentum: float = 0.0

    def to_json(self) -> dict:
        ev = None
        if self.eval_metrics is not None:
            ev = {"aca": self.eval_metrics.aca, "macro_f1": self.eval_metrics.macro_f1, "auc": self.eval_metrics.auc}
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss.to_dict(),
            "eval": ev,
            "lr": self.lr,
            "momentum": self.momentum,
        }


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path
    history: list[EpochRecord] = field(default_factory=list)
    backbone: Backbone | None = None


def sgd_step(params, grads, lr: float, weight_decay: float = 0.0, momentum: float = 0.0, buffers=None):
    """One in-place SGD update ``p <- p - lr * (g + weight_decay * p)``.

    ``params`` and ``grads`` are dicts keyed by parameter name (or plain
    sequences). With ``momentum > 0`` the classical buffer
    ``b <- momentum * b + (g + weight_decay * p)`` is kept in ``buffers``.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
        grads = {str(i): g for i, g in enumerate(grads)}
    if buffers is None:
        buffers = {}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {name!r}")
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            step = g + weight_decay * p if weight_decay else g.clone()
            if momentum:
                buf = buffers.get(name)
                if buf is None:
                    buf = step.clone()
                else:
                    buf.mul_(momentum).add_(step)
                buffers[name] = buf
                step = buf
            p.sub_(lr * step)
    return params


class SGD:
    """Minimal optimizer over a module's named parameters, built on :func:`sgd_step`."""

    def __init__(self, module: nn.Module, lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = dict(module.named_parameters())
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.buffers: dict[str, torch.Tensor] = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        sgd_step(self.params, grads, self.lr, self.weight_decay, self.momentum, self.buffers)


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` consecutive epochs without strict improvement."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.1, higher_is_better: bool = True):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.higher_is_better = higher_is_better
        self.best: float | None = None
        self.stale = 0

    def step(self, metric: float) -> float:
        if is_better(metric, self.best, self.higher_is_better):
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


def plateau_schedule(history: Sequence[float], lr: float, patience: int = 10, factor: float = 0.1,
                     higher_is_better: bool = True) -> float:
    """Learning rate after replaying a monitored-metric ``history`` from ``lr``."""
    if len(history) == 0:
        raise ValueError("empty metric history")
    sched = PlateauScheduler(lr, patience, factor, higher_is_better)
    for value in history:
        sched.step(value)
    return sched.lr


def _split_validation(records: list[EyeImageRecord], fraction: float, seed: int) -> set[str]:
    """Patient ids held out of training; whole patients only."""
    ids = sorted({r.patient_id for r in records})
    if not ids:
        return set()
    n_val = max(1, int(round(fraction * len(ids))))
    rng = np.random.default_rng([seed, 7])
    return set(rng.choice(ids, size=n_val, replace=False).tolist())


def _eval_records(manifest: DatasetManifest, config: TrainConfig, held_out: set[str]) -> list[EyeImageRecord]:
    if config.eval_split == "test":
        return manifest.split_records(Split.TEST)
    if config.eval_split == "train":
        return manifest.split_records(Split.TRAIN)
    return [r for r in manifest.split_records(Split.TRAIN) if r.patient_id in held_out]


def preprocess_dict(aug: AugmentConfig) -> dict:
    return {
        "target_size": aug.target_size,
        "channel_mean": list(aug.channel_mean),
        "channel_std": list(aug.channel_std),
        "per_image_standardization": aug.per_image_standardization,
    }


def preprocess_config(preprocess: dict) -> AugmentConfig:
    try:
        return AugmentConfig(
            0.0, 0.0, 0.0,
            int(preprocess["target_size"]),
            tuple(preprocess["channel_mean"]),
            tuple(preprocess["channel_std"]),
            per_image_standardization=bool(preprocess.get("per_image_standardization", False)),
        )
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks preprocessing field {exc}") from None


@torch.no_grad()
def predict_logits(backbone: nn.Module, records: Sequence[EyeImageRecord], preprocess: AugmentConfig,
                   load=None, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for each record, in record order."""
    load = load or ImageStore()
    backbone.eval()
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = transform_images([load(r) for r in chunk], [AugmentParams()] * len(chunk), preprocess)
        _, logits = monocular_forward(backbone, x)
        out.append(logits.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 5))


def evaluate_backbone(backbone: nn.Module, records: Sequence[EyeImageRecord], preprocess: AugmentConfig,
                      load=None) -> MetricReport:
    """Per-eye evaluation: every image is classified on its own."""
    if not records:
        raise ValueError("no records to evaluate")
    logits = predict_logits(backbone, records, preprocess, load)
    return metric_report([r.grade for r in records], logits)


def evaluate(checkpoint, manifest: DatasetManifest, split="test") -> MetricReport:
    """Score a saved checkpoint (path or :class:`Checkpoint`) on one manifest split."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    preprocess = preprocess_config(ckpt.preprocess)
    records = manifest.split_records(split)
    return evaluate_backbone(ckpt.backbone, records, preprocess, ImageStore(manifest.root))


def _mean_breakdown(parts: list[tuple[int, dict]]) -> LossBreakdown:
    total_n = sum(n for n, _ in parts)
    keys = ("contrastive", "cross_entropy", "total", "mse")
    avg = {k: math.fsum(n * d.get(k, 0.0) for n, d in parts) / total_n for k in keys}
    return LossBreakdown(**avg)


def _batch_loss(backbone, batch, config: TrainConfig, loss_config: LossConfig) -> LossBreakdown:
    if config.mode == "binocular":
        out = binocular_forward(backbone, batch)
        return hybrid_loss(out, (batch.left_grades, batch.right_grades), loss_config)
    _, logits = monocular_forward(backbone, batch.images)
    reduction = "mean" if loss_config.batch_reduction == "mean" else "sum"
    ce = weighted_cross_entropy(logits, batch.grades, loss_config.class_weights, reduction)
    zero = torch.zeros((), dtype=ce.dtype)
    if config.mode == "monocular_mse":
        mse = mse_grade_loss(logits, batch.grades)
        return LossBreakdown(contrastive=zero, cross_entropy=ce, total=ce + mse, mse=mse)
    return LossBreakdown(contrastive=zero, cross_entropy=ce, total=ce)


def _resolve_image_size(config: TrainConfig, manifest: DatasetManifest, store: ImageStore, record) -> int:
    if config.image_size:
        return config.image_size
    if manifest.image_size:
        return manifest.image_size
    return int(store(record).shape[0])


def train(manifest: DatasetManifest, backbone_spec: BackboneSpec, train_config: TrainConfig,
          loss_config: LossConfig, out_dir) -> TrainResult:
    """Train a backbone in binocular or monocular mode and write the run directory."""
    config = train_config
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = ImageStore(manifest.root)

    pairs = pair_patients(manifest, Split.TRAIN) if config.mode == "binocular" else []
    records = manifest.split_records(Split.TRAIN)
    held_out: set[str] = set()
    if config.eval_split == "validation":
        held_out = _split_validation(records, config.validation_fraction, config.seed)
        pairs = [p for p in pairs if p.patient_id not in held_out]
        records = [r for r in records if r.patient_id not in held_out]
    if config.mode == "binocular" and not pairs:
        raise ConfigError("binocular training needs at least one train pair")
    if not records:
        raise ConfigError("no training records")
    eval_records = _eval_records(manifest, config, held_out)

    train_records = [r for p in pairs for r in (p.left, p.right)] if config.mode == "binocular" else records
    size = _resolve_image_size(config, manifest, store, train_records[0])
    if config.standardization == "dataset":
        mean, std = channel_stats((store(r) for r in train_records), target_size=size)
    else:
        mean, std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
    aug = AugmentConfig(
        hflip_prob=config.hflip_prob if config.augment else 0.0,
        vflip_prob=config.vflip_prob if config.augment else 0.0,
        rotation_deg=config.rotation_deg if config.augment else 0.0,
        target_size=size,
        channel_mean=mean,
        channel_std=std,
        synchronized_augment=config.synchronized_augment,
        per_image_standardization=config.standardization == "image",
    )
    if config.class_weighting == "inverse":
        counts = [0] * 5
        for r in train_records:
            counts[r.grade] += 1
        loss_config = LossConfig(**{**asdict(loss_config), "class_weights": tuple(class_weights(counts))})

    effective = {
        "train": asdict(config),
        "loss": asdict(loss_config),
        "backbone": asdict(backbone_spec),
        "preprocess": preprocess_dict(aug),
        "n_train_pairs": len(pairs),
        "n_train_records": len(train_records),
        "n_eval_records": len(eval_records),
    }
    (out_dir / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")

    torch.manual_seed(config.seed)
    backbone = build_backbone(backbone_spec)
    optimizer = SGD(backbone, config.lr, config.weight_decay, config.momentum)
    higher = MONITORS[config.monitor_metric]
    scheduler = PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor, higher)
    history_path = out_dir / "history.jsonl"
    history_path.write_text("")
    last_path, best_path = out_dir / "last.ckpt", out_dir / "best.ckpt"
    best_value = None
    history: list[EpochRecord] = []
    preprocess = preprocess_dict(aug)

    for epoch in range(1, config.epochs + 1):
        backbone.train()
        lr = optimizer.lr
        shuffle_seed = epoch_seed(config.seed, epoch)
        if config.mode == "binocular":
            batches = make_batches(pairs, config.batch_size, shuffle_seed, aug, store, config.augment, config.workers)
        else:
            batches = make_image_batches(records, config.batch_size, shuffle_seed, aug, store, config.augment,
                                         config.workers)
        parts = []
        for index, batch in enumerate(batches):
            optimizer.zero_grad()
            loss = _batch_loss(backbone, batch, config, loss_config)
            if not torch.isfinite(loss.total):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {index}")
            loss.total.backward()
            optimizer.step()
            parts.append((len(batch), loss.to_dict()))
        train_loss = _mean_breakdown(parts)

        report = evaluate_backbone(backbone, eval_records, aug.for_eval(), store) if eval_records else None
        if config.monitor_metric == "loss":
            monitored = float(train_loss.total)
        elif report is None:
            raise ConfigError(f"monitor {config.monitor_metric!r} needs a non-empty {config.eval_split} split")
        else:
            monitored = getattr(report, config.monitor_metric)

        record = EpochRecord(epoch, train_loss, report, lr, config.momentum)
        history.append(record)
        with history_path.open("a") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

        new_lr = scheduler.step(monitored)
        state = {"epoch": epoch, "lr": new_lr, "best_metric": monitored if best_value is None else best_value,
                 "monitor": config.monitor_metric, "mode": config.mode}
        if is_better(monitored, best_value, higher):
            best_value = monitored
            state["best_metric"] = monitored
            save_checkpoint(best_path, backbone, backbone_spec, state, preprocess)
        save_checkpoint(last_path, backbone, backbone_spec, state, preprocess)
        optimizer.lr = new_lr
        LOGGER.info(
            "epoch %d/%d loss %.4f (cg %.4f, ce %.4f) %s=%.4f lr %.2e",
            epoch, config.epochs, train_loss.total, train_loss.contrastive, train_loss.cross_entropy,
            config.monitor_metric, monitored, lr,
        )

    backbone.eval()
    return TrainResult(last_path, best_path, history, backbone)
