"""Domain types, manifest handling and label statistics.

A manifest is a CSV index of single-eye images::

    patient_id,side,grade,image_path,split
    p1,left,0,images/p1_left.png,train
    p1,right,1,images/p1_right.png,train

Relative image paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

NUM_GRADES = 5
MANIFEST_COLUMNS = ("patient_id", "side", "grade", "image_path", "split")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest content."""


class ConfigError(ValueError):
    """Invalid user-supplied configuration."""


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested for a zero-variance sequence."""


class SingleEyeWarning(UserWarning):
    """Patients with only one eye in a split were left out of pairing."""


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


def check_grade(value) -> int:
    """Return ``value`` as an int severity level, rejecting anything outside 0..4."""
    if isinstance(value, bool):
        raise ValueError(f"grade must be an integer, got {value!r}")
    try:
        grade = int(value)
    except (TypeError, ValueError):
        raise ValueError(f"grade must be an integer, got {value!r}") from None
    if grade != value and not isinstance(value, str):
        raise ValueError(f"grade must be an integer, got {value!r}")
    if not 0 <= grade < NUM_GRADES:
        raise ValueError(f"grade {grade} outside 0..{NUM_GRADES - 1}")
    return grade


@dataclass(frozen=True)
class EyeImageRecord:
    patient_id: str
    side: Side
    grade: int
    image_path: Path
    split: Split = Split.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "grade", check_grade(self.grade))
        object.__setattr__(self, "image_path", Path(self.image_path))


@dataclass(frozen=True)
class PatientPair:
    left: EyeImageRecord
    right: EyeImageRecord

    def __post_init__(self):
        if self.left.patient_id != self.right.patient_id:
            raise ValueError(
                f"pair mixes patients {self.left.patient_id!r} and {self.right.patient_id!r}"
            )
        if self.left.side is not Side.LEFT or self.right.side is not Side.RIGHT:
            raise ValueError("pair must be (left, right)")

    @property
    def patient_id(self) -> str:
        return self.left.patient_id

    @property
    def grades(self) -> tuple[int, int]:
        return self.left.grade, self.right.grade


@dataclass(frozen=True)
class ClassDistribution:
    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != NUM_GRADES or any(c < 0 for c in counts):
            raise ValueError(f"expected {NUM_GRADES} non-negative counts, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)

    def frequencies(self) -> list[float]:
        total = self.total
        if total == 0:
            raise ValueError("empty class distribution has no frequencies")
        return [c / total for c in self.counts]


@dataclass
class DatasetManifest:
    records: list[EyeImageRecord]
    image_size: int | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            key = (rec.patient_id, rec.side)
            if key in seen:
                raise ManifestError(f"duplicate record for patient {rec.patient_id!r}, {rec.side.value}")
            seen.add(key)

    def split_records(self, split) -> list[EyeImageRecord]:
        split = Split(split)
        return [r for r in self.records if r.split is split]

    def resolve(self, record: EyeImageRecord) -> Path:
        if record.image_path.is_absolute():
            return record.image_path
        return self.root / record.image_path

    def patient_ids(self, split=None) -> list[str]:
        records = self.records if split is None else self.split_records(split)
        return sorted({r.patient_id for r in records})

    def find_pair(self, patient_id: str) -> PatientPair:
        sides = {r.side: r for r in self.records if r.patient_id == patient_id}
        if not sides:
            raise KeyError(f"unknown patient {patient_id!r}")
        if len(sides) != 2:
            raise KeyError(f"patient {patient_id!r} does not have both eyes")
        return PatientPair(sides[Side.LEFT], sides[Side.RIGHT])


def load_manifest(path, image_size: int | None = None) -> DatasetManifest:
    """Read and validate a manifest CSV.

    Errors name the offending line (1-based, header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    seen = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}:1: expected header {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            pid, side, grade, image_path, split = (cell.strip() for cell in row)
            try:
                rec = EyeImageRecord(pid, side, grade, Path(image_path), split)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if not pid:
                raise ManifestError(f"{path}:{lineno}: empty patient_id")
            key = (rec.patient_id, rec.side)
            if key in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate record for patient {pid!r}, {rec.side.value} "
                    f"(first seen on line {seen[key]})"
                )
            seen[key] = lineno
            records.append(rec)
    return DatasetManifest(records, image_size=image_size, root=path.parent)


def write_manifest(records: Iterable[EyeImageRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.patient_id, r.side.value, r.grade, r.image_path.as_posix(), r.split.value])
    return path


def pair_patients(manifest: DatasetManifest, split) -> list[PatientPair]:
    """Join left/right records of each patient in ``split``, sorted by patient id.

    Patients with a single eye in the split are dropped and reported through a
    :class:`SingleEyeWarning`.
    """
    by_patient: dict[str, dict[Side, EyeImageRecord]] = {}
    for rec in manifest.split_records(split):
        by_patient.setdefault(rec.patient_id, {})[rec.side] = rec
    pairs = []
    single = []
    for pid in sorted(by_patient):
        sides = by_patient[pid]
        if len(sides) == 2:
            pairs.append(PatientPair(sides[Side.LEFT], sides[Side.RIGHT]))
        else:
            single.append(pid)
    if single:
        warnings.warn(
            f"{len(single)} patient(s) with a single eye excluded from pairing: {', '.join(single)}",
            SingleEyeWarning,
            stacklevel=2,
        )
    return pairs


def class_distribution(manifest: DatasetManifest, split) -> ClassDistribution:
    counts = [0] * NUM_GRADES
    for rec in manifest.split_records(split):
        counts[rec.grade] += 1
    return ClassDistribution(tuple(counts))


def pearson_correlation(left_grades: Sequence[float], right_grades: Sequence[float]) -> float:
    """Sample Pearson correlation of two paired sequences.

    Raises :class:`UndefinedCorrelationError` instead of returning NaN when
    either sequence has zero variance.
    """
    xs = [float(v) for v in left_grades]
    ys = [float(v) for v in right_grades]
    if len(xs) != len(ys):
        raise ValueError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if not xs:
        raise ValueError("correlation of empty sequences")
    n = len(xs)
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined: a sequence has zero variance")
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    rho = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))
