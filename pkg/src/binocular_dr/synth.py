"""Synthetic paired fundus-like images with correlated left/right grades.

Each image is a dark disc on a black background with an optic-disc highlight
and ``grade * k`` bright lesion blobs. The right eye copies the left grade with
probability ``p`` and otherwise jitters it by a bounded step; ``p`` is solved
so that the expected grade correlation hits ``target_rho``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    NUM_GRADES,
    ConfigError,
    DatasetManifest,
    EyeImageRecord,
    Side,
    Split,
    load_manifest,
    write_manifest,
)

JITTER_STEPS = np.array([-2, -1, 1, 2])
DEFAULT_MARGINAL = (0.40, 0.20, 0.18, 0.12, 0.10)
MAX_BLOBS_PER_GRADE = NUM_GRADES - 1

LESION_SIGMA = (0.02, 0.035)  # fraction of image size
LESION_AMPLITUDE = (0.12, 0.45)

# stream ids mixed into SeedSequence entropy
_GRADE_STREAM = 0
_SPLIT_STREAM = 1
_PAIR_STREAM = 2


@dataclass(frozen=True)
class SynthConfig:
    n_pairs: int = 500
    image_size: int = 64
    target_rho: float = 0.85
    marginal: tuple[float, ...] = DEFAULT_MARGINAL
    seed: int = 0
    lesion_strength: float = 2.0
    mirror_fraction: float = 0.7
    test_fraction: float = 0.2
    noise_std: float = 0.05

    def __post_init__(self):
        marginal = tuple(float(m) for m in self.marginal)
        object.__setattr__(self, "marginal", marginal)
        if self.n_pairs < 1:
            raise ConfigError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if not 0.0 <= self.target_rho <= 1.0:
            raise ConfigError(f"target_rho must lie in [0, 1], got {self.target_rho}")
        if len(marginal) != NUM_GRADES or any(m < 0 for m in marginal):
            raise ConfigError(f"marginal must be {NUM_GRADES} non-negative probabilities")
        if abs(sum(marginal) - 1.0) > 1e-9:
            raise ConfigError(f"marginal sums to {sum(marginal)!r}, expected 1")
        if not self.lesion_strength > 0:
            raise ConfigError("lesion_strength must be > 0")
        if not 0.0 <= self.mirror_fraction <= 1.0:
            raise ConfigError("mirror_fraction must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")

    @property
    def blobs_per_grade(self) -> int:
        return max(1, int(round(self.lesion_strength)))


def _jitter_transition() -> np.ndarray:
    """Row-stochastic matrix of C_r given C_l for the jitter branch."""
    trans = np.zeros((NUM_GRADES, NUM_GRADES))
    for g in range(NUM_GRADES):
        for step in JITTER_STEPS:
            trans[g, int(np.clip(g + step, 0, NUM_GRADES - 1))] += 1.0 / len(JITTER_STEPS)
    return trans


def grade_joint(marginal, copy_prob: float) -> np.ndarray:
    """Joint distribution P(C_l, C_r) under the copy-or-jitter mechanism."""
    m = np.asarray(marginal, dtype=float)
    cond = copy_prob * np.eye(NUM_GRADES) + (1.0 - copy_prob) * _jitter_transition()
    return m[:, None] * cond


def expected_correlation(marginal, copy_prob: float) -> float:
    """Population Pearson correlation of (C_l, C_r) for a given copy probability."""
    joint = grade_joint(marginal, copy_prob)
    g = np.arange(NUM_GRADES, dtype=float)
    pl, pr = joint.sum(axis=1), joint.sum(axis=0)
    ml, mr = pl @ g, pr @ g
    vl = pl @ (g - ml) ** 2
    vr = pr @ (g - mr) ** 2
    if vl <= 0 or vr <= 0:
        return float("nan")
    cov = (g - ml) @ joint @ (g - mr)
    return float(cov / np.sqrt(vl * vr))


def solve_copy_probability(marginal, target_rho: float, tol: float = 1e-10) -> float:
    """Bisection for the copy probability whose expected correlation is ``target_rho``."""
    lo_rho = expected_correlation(marginal, 0.0)
    hi_rho = expected_correlation(marginal, 1.0)
    if np.isnan(lo_rho) or np.isnan(hi_rho):
        raise ConfigError("target_rho unreachable: marginal puts all mass on one grade")
    if target_rho >= hi_rho:
        return 1.0
    if target_rho < lo_rho:
        raise ConfigError(
            f"target_rho={target_rho} unreachable for this marginal: "
            f"the jitter-only mechanism already gives rho={lo_rho:.4f}"
        )
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if expected_correlation(marginal, mid) < target_rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_grade_pairs(config: SynthConfig) -> list[tuple[int, int]]:
    p = solve_copy_probability(config.marginal, config.target_rho)
    rng = np.random.default_rng([config.seed, _GRADE_STREAM])
    n = config.n_pairs
    left = rng.choice(NUM_GRADES, size=n, p=config.marginal)
    copy = rng.random(n) < p
    step = rng.choice(JITTER_STEPS, size=n)
    right = np.where(copy, left, np.clip(left + step, 0, NUM_GRADES - 1))
    return [(int(a), int(b)) for a, b in zip(left, right)]


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, _PAIR_STREAM, index]).generate_state(1)[0])


def _random_blobs(rng, n, size):
    # (y, x, sigma, amplitude); centres stay inside the disc
    radius = 0.45 * size * 0.75
    r = radius * np.sqrt(rng.random(n))
    theta = rng.uniform(0, 2 * np.pi, n)
    centre = (size - 1) / 2
    ys = centre + r * np.sin(theta)
    xs = centre + r * np.cos(theta)
    sigma = rng.uniform(*LESION_SIGMA, n) * size
    amp = rng.uniform(*LESION_AMPLITUDE, n)
    return np.stack([ys, xs, sigma, amp], axis=1)


def lesion_layout(grades, config: SynthConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Blob parameters ``(y, x, sigma, amplitude)`` for the left and right eye.

    Layouts are prefix-stable: the blobs of grade ``g`` are the first ``g * k``
    rows of the grade-4 layout, so raising a grade only adds lesions. Mirrored
    right-eye blobs sit at the horizontally flipped left-eye coordinate.
    """
    grade_l, grade_r = grades
    k = config.blobs_per_grade
    n_max = MAX_BLOBS_PER_GRADE * k
    size = config.image_size
    rng = np.random.default_rng([seed, 0])
    left = _random_blobs(rng, n_max, size)
    own = _random_blobs(rng, n_max, size)
    mirrored = rng.random(n_max) < config.mirror_fraction
    flipped = left.copy()
    flipped[:, 1] = (size - 1) - left[:, 1]
    right = np.where(mirrored[:, None], flipped, own)
    return left[: grade_l * k], right[: grade_r * k]


def _render_eye(blobs: np.ndarray, side: Side, config: SynthConfig, rng) -> np.ndarray:
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    centre = (size - 1) / 2
    dist = np.hypot(yy - centre, xx - centre) / (0.45 * size)
    disc = (dist <= 1.0).astype(float)
    tint = rng.uniform(0.85, 1.15)
    base = np.array([0.42, 0.18, 0.08]) * tint
    vignette = 1.0 - 0.35 * np.clip(dist, 0, 1) ** 2
    img = disc[..., None] * vignette[..., None] * base

    # optic disc sits nasally, so it mirrors between eyes
    od_x = centre + (0.22 if side is Side.RIGHT else -0.22) * size
    od_y = centre + rng.uniform(-0.04, 0.04) * size
    od = np.exp(-((yy - od_y) ** 2 + (xx - od_x) ** 2) / (2 * (0.07 * size) ** 2))
    img += 0.35 * od[..., None] * np.array([1.0, 0.85, 0.6]) * disc[..., None]

    img += rng.normal(0.0, config.noise_std, img.shape) * disc[..., None]
    img = np.clip(img, 0.0, 1.0)
    lesion_colour = np.array([1.0, 0.92, 0.55])
    for y, x, sigma, amp in blobs:
        bump = amp * np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * sigma**2))
        img += bump[..., None] * lesion_colour
    return np.clip(img, 0.0, 1.0)


def render_pair(grades, config: SynthConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render ``H x W x 3`` images in [0, 1] for one patient."""
    left_blobs, right_blobs = lesion_layout(grades, config, seed)
    left = _render_eye(left_blobs, Side.LEFT, config, np.random.default_rng([seed, 1]))
    right = _render_eye(right_blobs, Side.RIGHT, config, np.random.default_rng([seed, 2]))
    return left, right


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def balanced_test_patients(grade_pairs, config: SynthConfig) -> set[int]:
    """Indices of test pairs, equal eye counts per grade by construction.

    Only concordant pairs (C_l == C_r) are drawn, the same number per grade,
    which keeps the per-eye test distribution exactly balanced.
    """
    n_test = int(round(config.test_fraction * config.n_pairs))
    if n_test == 0:
        return set()
    pools = {g: [i for i, (a, b) in enumerate(grade_pairs) if a == b == g] for g in range(NUM_GRADES)}
    present = [g for g in range(NUM_GRADES) if pools[g]]
    quota = max(1, n_test // len(present))
    quota = min([quota] + [len(pools[g]) for g in present])
    rng = np.random.default_rng([config.seed, _SPLIT_STREAM])
    chosen = set()
    for g in present:
        chosen.update(int(i) for i in rng.choice(pools[g], size=quota, replace=False))
    return chosen


def generate_dataset(config: SynthConfig, out_dir, workers: int = 1) -> DatasetManifest:
    """Write ``images/{patient_id}_{side}.png`` and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    grade_pairs = sample_grade_pairs(config)
    test_idx = balanced_test_patients(grade_pairs, config)
    width = max(5, len(str(config.n_pairs - 1)))

    def work(index):
        pid = f"p{index:0{width}d}"
        grades = grade_pairs[index]
        images = render_pair(grades, config, pair_seed(config.seed, index))
        split = Split.TEST if index in test_idx else Split.TRAIN
        recs = []
        for side, grade, img in zip((Side.LEFT, Side.RIGHT), grades, images):
            rel = Path("images") / f"{pid}_{side.value}.png"
            Image.fromarray(to_uint8(img)).save(out_dir / rel)
            recs.append(EyeImageRecord(pid, side, grade, rel, split))
        return recs

    indices = range(config.n_pairs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(work, indices))
    else:
        chunks = [work(i) for i in indices]
    records = [rec for chunk in chunks for rec in chunk]
    manifest_path = write_manifest(records, out_dir / "manifest.csv")
    return load_manifest(manifest_path, image_size=config.image_size)
