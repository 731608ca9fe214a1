"""Image loading, augmentation, standardization and batch assembly."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import ConfigError, EyeImageRecord, PatientPair

PAPER_TARGET_SIZE = 224
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_deg: float = 10.0
    target_size: int = PAPER_TARGET_SIZE
    channel_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    channel_std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    synchronized_augment: bool = False
    per_image_standardization: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channel_mean", tuple(float(v) for v in self.channel_mean))
        object.__setattr__(self, "channel_std", tuple(float(v) for v in self.channel_std))
        if self.target_size <= 0:
            raise ConfigError(f"target_size must be > 0, got {self.target_size}")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ConfigError("channel_mean and channel_std need 3 components")
        if any(not s > 0 for s in self.channel_std):
            raise ConfigError(f"channel_std must be positive, got {self.channel_std}")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.rotation_deg < 0:
            raise ConfigError("rotation_deg must be >= 0")

    def for_eval(self) -> "AugmentConfig":
        """Resize and standardize only."""
        return AugmentConfig(
            0.0, 0.0, 0.0, self.target_size, self.channel_mean, self.channel_std,
            per_image_standardization=self.per_image_standardization,
        )


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0


def sample_params(config: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    # always draw three numbers so the stream position never depends on config
    u_h, u_v, u_a = rng.random(3)
    return AugmentParams(
        hflip=bool(u_h < config.hflip_prob),
        vflip=bool(u_v < config.vflip_prob),
        angle=float((2.0 * u_a - 1.0) * config.rotation_deg),
    )


@dataclass
class PairBatch:
    left_images: torch.Tensor
    right_images: torch.Tensor
    left_grades: torch.Tensor
    right_grades: torch.Tensor
    patient_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.left_images.shape != self.right_images.shape:
            raise ValueError(
                f"left/right shape mismatch: {tuple(self.left_images.shape)} vs {tuple(self.right_images.shape)}"
            )
        if self.left_images.shape[0] < 1:
            raise ValueError("empty batch")

    def __len__(self):
        return self.left_images.shape[0]


@dataclass
class ImageBatch:
    images: torch.Tensor
    grades: torch.Tensor

    def __len__(self):
        return self.images.shape[0]


def load_image(path) -> np.ndarray:
    """Read an image file as ``H x W x 3`` float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


class ImageStore:
    """Decoded-image cache keyed by resolved path; holds uint8 to keep memory low."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._cache: dict[Path, np.ndarray] = {}

    def path_of(self, record: EyeImageRecord) -> Path:
        p = record.image_path
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        return p

    def __call__(self, record: EyeImageRecord) -> np.ndarray:
        p = self.path_of(record)
        arr = self._cache.get(p)
        if arr is None:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            self._cache[p] = arr
        return arr.astype(np.float32) / 255.0


def _check_finite(image: np.ndarray):
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")


def _rotate(x: torch.Tensor, angles: Sequence[float]) -> torch.Tensor:
    # bilinear, zero fill; angle-0 images are passed through untouched
    rad = torch.tensor([math.radians(a) for a in angles], dtype=x.dtype)
    cos, sin, zero = torch.cos(rad), torch.sin(rad), torch.zeros_like(rad)
    theta = torch.stack([torch.stack([cos, -sin, zero], 1), torch.stack([sin, cos, zero], 1)], 1)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    rotated = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    keep = (rad == 0).view(-1, 1, 1, 1)
    return torch.where(keep, x, rotated)


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-2:] == (size, size):
        return x
    downscale = x.shape[-1] > size or x.shape[-2] > size
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=downscale)


def transform_images(images: Sequence[np.ndarray], params: Sequence[AugmentParams], config: AugmentConfig) -> torch.Tensor:
    """Apply flips, rotation, resize and standardization; returns ``B x 3 x S x S``."""
    if len({im.shape for im in images}) > 1:
        return torch.cat([transform_images([im], [p], config) for im, p in zip(images, params)])
    for im in images:
        _check_finite(im)
    x = torch.from_numpy(np.stack(images).astype(np.float32, copy=False)).permute(0, 3, 1, 2).contiguous()
    hflip = torch.tensor([p.hflip for p in params]).view(-1, 1, 1, 1)
    vflip = torch.tensor([p.vflip for p in params]).view(-1, 1, 1, 1)
    x = torch.where(hflip, x.flip(-1), x)
    x = torch.where(vflip, x.flip(-2), x)
    if any(p.angle != 0.0 for p in params):
        x = _rotate(x, [p.angle for p in params])
    x = _resize(x, config.target_size)
    if config.per_image_standardization:
        mean = x.mean(dim=(2, 3), keepdim=True)
        std = x.std(dim=(2, 3), unbiased=False, keepdim=True)
        return (x - mean) / torch.where(std > 0, std, torch.ones_like(std))
    mean = torch.tensor(config.channel_mean, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(config.channel_std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Randomly flip, rotate, resize and standardize one ``H x W x 3`` image."""
    return transform_images([image], [sample_params(config, rng)], config)[0]


def eval_transform(image: np.ndarray, config: AugmentConfig) -> torch.Tensor:
    return transform_images([image], [AugmentParams()], config)[0]


def pair_params(config: AugmentConfig, rng: np.random.Generator) -> tuple[AugmentParams, AugmentParams]:
    left = sample_params(config, rng)
    right = left if config.synchronized_augment else sample_params(config, rng)
    return left, right


def augment_pair(left: np.ndarray, right: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    """Augment both eyes; draws are independent unless ``synchronized_augment`` is set."""
    pl, pr = pair_params(config, rng)
    out = transform_images([left, right], [pl, pr], config)
    return out[0], out[1]


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _item_rng(shuffle_seed: int, position: int) -> np.random.Generator:
    return np.random.default_rng([shuffle_seed, 1, position])


def _chunks(n: int, batch_size: int) -> list[range]:
    return [range(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _run(fn, jobs, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            yield from pool.map(fn, jobs)
    else:
        for job in jobs:
            yield fn(job)


def make_batches(
    pairs: Sequence[PatientPair],
    batch_size: int,
    shuffle_seed: int,
    config: AugmentConfig,
    load: Callable[[EyeImageRecord], np.ndarray] | None = None,
    train: bool = True,
    workers: int = 1,
) -> Iterator[PairBatch]:
    """Shuffle ``pairs`` with ``shuffle_seed`` and yield augmented :class:`PairBatch` es.

    The final short batch is kept. Augmentation draws are seeded per position in
    the shuffled order, so output does not depend on ``workers``.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not pairs:
        raise ValueError("no pairs to batch")
    load = load or ImageStore()
    order = np.random.default_rng([shuffle_seed, 0]).permutation(len(pairs)) if train else np.arange(len(pairs))
    ordered = [pairs[i] for i in order]
    eval_cfg = config.for_eval()

    def build(idx: range) -> PairBatch:
        images, params = [], []
        for pos in idx:
            pair = ordered[pos]
            images += [load(pair.left), load(pair.right)]
            params += pair_params(config, _item_rng(shuffle_seed, pos)) if train else [AugmentParams()] * 2
        x = transform_images(images, params, config if train else eval_cfg)
        chosen = [ordered[pos] for pos in idx]
        return PairBatch(
            left_images=x[0::2],
            right_images=x[1::2],
            left_grades=torch.tensor([p.left.grade for p in chosen]),
            right_grades=torch.tensor([p.right.grade for p in chosen]),
            patient_ids=[p.patient_id for p in chosen],
        )

    return _run(build, _chunks(len(ordered), batch_size), workers)


def make_image_batches(
    records: Sequence[EyeImageRecord],
    batch_size: int,
    shuffle_seed: int,
    config: AugmentConfig,
    load: Callable[[EyeImageRecord], np.ndarray] | None = None,
    train: bool = True,
    workers: int = 1,
) -> Iterator[ImageBatch]:
    """Single-eye counterpart of :func:`make_batches`."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not records:
        raise ValueError("no records to batch")
    load = load or ImageStore()
    order = np.random.default_rng([shuffle_seed, 0]).permutation(len(records)) if train else np.arange(len(records))
    ordered = [records[i] for i in order]
    eval_cfg = config.for_eval()

    def build(idx: range) -> ImageBatch:
        images = [load(ordered[pos]) for pos in idx]
        if train:
            params = [sample_params(config, _item_rng(shuffle_seed, pos)) for pos in idx]
        else:
            params = [AugmentParams()] * len(images)
        x = transform_images(images, params, config if train else eval_cfg)
        return ImageBatch(x, torch.tensor([ordered[pos].grade for pos in idx]))

    return _run(build, _chunks(len(ordered), batch_size), workers)


def channel_stats(images, target_size: int | None = None) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and standard deviation over an iterable of ``H x W x 3`` images.

    With ``target_size`` the statistics are taken after resizing, matching what
    the network actually sees.
    """
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for im in images:
        if target_size is not None:
            cfg = AugmentConfig(0, 0, 0, target_size)
            im = eval_transform(im, cfg).permute(1, 2, 0).numpy()
        flat = np.asarray(im, dtype=np.float64).reshape(-1, 3)
        total += flat.sum(axis=0)
        total_sq += (flat**2).sum(axis=0)
        count += flat.shape[0]
    if count == 0:
        raise ValueError("no images for channel statistics")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)
