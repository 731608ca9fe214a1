"""Contrastive grading loss, weighted cross-entropy, and their hybrid.

For a pair of eyes with grades ``C_l``, ``C_r`` and embedding distance ``d``::

    L_cg  = F_c * d**2 + |C_l - C_r| * max(margin - d, 0)**2     F_c = [C_l == C_r]
    L_ce  = weight[y] * (-x[y] + logsumexp(x))
    L     = lambda * L_cg + L_ce
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .core import NUM_GRADES, ClassDistribution, ConfigError
from .model import BinocularOutput

DEFAULT_MARGIN = 2.0
DEFAULT_LAMBDA = 0.1

_BATCH_REDUCTIONS = ("mean", "sum")
_CE_REDUCTIONS = ("mean", "plain_mean", "sum", "none")


@dataclass(frozen=True)
class LossConfig:
    margin: float = DEFAULT_MARGIN
    lam: float = DEFAULT_LAMBDA
    class_weights: tuple[float, ...] = (1.0,) * NUM_GRADES
    ce_pair_reduction: str = "mean"
    batch_reduction: str = "mean"
    distance_on: str = "embedding"

    def __post_init__(self):
        weights = tuple(float(w) for w in self.class_weights)
        object.__setattr__(self, "class_weights", weights)
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if len(weights) != NUM_GRADES or not all(w > 0 and w < float("inf") for w in weights):
            raise ConfigError(f"class_weights must be {NUM_GRADES} positive finite values, got {weights}")
        if self.ce_pair_reduction not in _BATCH_REDUCTIONS:
            raise ConfigError(f"ce_pair_reduction must be one of {_BATCH_REDUCTIONS}")
        if self.batch_reduction not in _BATCH_REDUCTIONS:
            raise ConfigError(f"batch_reduction must be one of {_BATCH_REDUCTIONS}")
        if self.distance_on not in ("embedding", "logits"):
            raise ConfigError("distance_on must be 'embedding' or 'logits'")


@dataclass
class LossBreakdown:
    """Loss terms of one batch. Fields are 0-d tensors during training."""

    contrastive: torch.Tensor | float
    cross_entropy: torch.Tensor | float
    total: torch.Tensor | float
    mse: torch.Tensor | float = 0.0

    def to_dict(self) -> dict[str, float]:
        out = {
            "contrastive": _scalar(self.contrastive),
            "cross_entropy": _scalar(self.cross_entropy),
            "total": _scalar(self.total),
        }
        if _scalar(self.mse) != 0.0:
            out["mse"] = _scalar(self.mse)
        return out


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def euclidean_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 distance with a zero subgradient where ``a == b``."""
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected matching B x E arrays, got {tuple(a.shape)} and {tuple(b.shape)}")
    sq = ((a - b) ** 2).sum(dim=1)
    positive = sq > 0
    # double-where keeps the sqrt gradient finite at 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(sq))


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        return values.sum()
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_grades(grades: torch.Tensor, n: int, name: str) -> torch.Tensor:
    grades = torch.as_tensor(grades)
    if grades.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {tuple(grades.shape)}")
    if grades.numel() and (grades.min() < 0 or grades.max() >= NUM_GRADES):
        raise ValueError(f"{name} outside 0..{NUM_GRADES - 1}")
    return grades.long()


def contrastive_grading_loss(
    emb_l: torch.Tensor,
    emb_r: torch.Tensor,
    grade_l,
    grade_r,
    margin: float = DEFAULT_MARGIN,
    reduction: str = "mean",
) -> torch.Tensor:
    """Contrastive loss whose hinge term is scaled by the grade gap.

    Same-grade pairs are pulled together (``d**2``); pairs that differ by
    ``k`` grades are pushed apart until ``d >= margin`` with weight ``k``.
    ``reduction='none'`` returns the per-pair values.
    """
    if not (torch.isfinite(emb_l).all() and torch.isfinite(emb_r).all()):
        raise ValueError("non-finite embeddings")
    n = emb_l.shape[0]
    grade_l = _check_grades(grade_l, n, "grade_l")
    grade_r = _check_grades(grade_r, n, "grade_r")
    d = euclidean_distance(emb_l, emb_r)
    same = (grade_l == grade_r).to(d.dtype)
    gap = (grade_l - grade_r).abs().to(d.dtype)
    hinge = torch.clamp(margin - d, min=0.0)
    per_pair = same * d**2 + gap * hinge**2
    return _reduce(per_pair, reduction)


def class_weights(dist: ClassDistribution | Sequence[int]) -> list[float]:
    """Inverse-frequency class weights scaled to have mean 1.

    Accepts a :class:`ClassDistribution` or a bare count sequence of any length.
    """
    counts = list(dist.counts) if isinstance(dist, ClassDistribution) else [int(c) for c in dist]
    if not counts:
        raise ValueError("no classes")
    empty = [i for i, c in enumerate(counts) if c <= 0]
    if empty:
        raise ValueError(
            f"class(es) {empty} have no training samples; merge or augment them, "
            "or pass explicit class weights"
        )
    total = sum(counts)
    inv = [total / c for c in counts]
    mean = sum(inv) / len(inv)
    return [w / mean for w in inv]


def weighted_cross_entropy(logits: torch.Tensor, labels, weights, reduction: str = "mean") -> torch.Tensor:
    """Class-weighted cross-entropy with a max-shifted log-sum-exp.

    ``reduction``: ``mean`` divides the weighted sum by the sum of applied
    weights, ``plain_mean`` divides by the batch size, ``sum`` and ``none``
    are as usual.
    """
    if reduction not in _CE_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if logits.ndim != 2:
        raise ValueError(f"logits must be B x C, got {tuple(logits.shape)}")
    n_classes = logits.shape[1]
    labels = torch.as_tensor(labels).long()
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels must have shape ({logits.shape[0]},)")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside 0..{n_classes - 1}")
    weights = torch.as_tensor(weights, dtype=logits.dtype)
    if weights.shape != (n_classes,):
        raise ValueError(f"expected {n_classes} class weights")
    shift = logits.max(dim=1, keepdim=True).values.detach()
    lse = shift.squeeze(1) + torch.log(torch.exp(logits - shift).sum(dim=1))
    picked = logits.gather(1, labels[:, None]).squeeze(1)
    w = weights[labels]
    per_sample = w * (lse - picked)
    if reduction == "mean":
        return per_sample.sum() / w.sum()
    if reduction == "plain_mean":
        return per_sample.mean()
    return _reduce(per_sample, reduction)


def mse_grade_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Squared error between the softmax-expected grade and the true grade."""
    labels = torch.as_tensor(labels).to(logits.dtype)
    levels = torch.arange(logits.shape[1], dtype=logits.dtype)
    expected = torch.softmax(logits, dim=1) @ levels
    return ((expected - labels) ** 2).mean()


def hybrid_loss(output: BinocularOutput, grades, config: LossConfig) -> LossBreakdown:
    """``lambda * L_cg + L_ce`` with cross-entropy over both streams."""
    grade_l, grade_r = grades
    ce_reduction = "mean" if config.batch_reduction == "mean" else "sum"
    weights = config.class_weights
    ce_l = weighted_cross_entropy(output.logits_left, grade_l, weights, ce_reduction)
    ce_r = weighted_cross_entropy(output.logits_right, grade_r, weights, ce_reduction)
    ce = (ce_l + ce_r) / 2 if config.ce_pair_reduction == "mean" else ce_l + ce_r
    if config.distance_on == "embedding":
        a, b = output.embedding_left, output.embedding_right
    else:
        a, b = output.logits_left, output.logits_right
    cg = contrastive_grading_loss(a, b, grade_l, grade_r, config.margin, config.batch_reduction)
    return LossBreakdown(contrastive=cg, cross_entropy=ce, total=config.lam * cg + ce)
