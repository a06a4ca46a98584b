"""Map crowd-sourced emotion votes to valence/arousal/dominance ratings."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EMOTIONS = ("happiness", "surprise", "sadness", "anger", "disgust", "fear", "contempt", "neutral")
DIMENSIONS = ("valence", "arousal", "dominance")
NORMS_HEADER = ("emotion", "valence", "arousal", "dominance", "sd_valence", "sd_arousal", "sd_dominance")


class NormsFormatError(ValueError):
    pass


class UnratableImageError(ValueError):
    """All eight emotion counts are zero; the image has no rating."""


@dataclass(frozen=True)
class CrowdLabelCounts:
    happiness: int = 0
    surprise: int = 0
    sadness: int = 0
    anger: int = 0
    disgust: int = 0
    fear: int = 0
    contempt: int = 0
    neutral: int = 0
    discarded: int = 0

    def __post_init__(self):
        for name in EMOTIONS + ("discarded",):
            if getattr(self, name) < 0:
                raise ValueError(f"negative vote count for {name}")

    def emotion_counts(self) -> np.ndarray:
        return np.array([getattr(self, e) for e in EMOTIONS], dtype=np.int64)

    @property
    def rated(self) -> int:
        return int(self.emotion_counts().sum())

    @property
    def total(self) -> int:
        return self.rated + self.discarded


@dataclass(frozen=True)
class NormRow:
    mean: tuple[float, float, float]
    sd: tuple[float, float, float]


class NormTable:
    """Per-emotion V/A/D means and standard deviations on the 1-9 scale."""

    def __init__(self, rows: Mapping[str, NormRow]):
        missing = [e for e in EMOTIONS if e not in rows]
        if missing:
            raise NormsFormatError(f"norms table missing emotion row(s): {', '.join(missing)}")
        extra = [e for e in rows if e not in EMOTIONS]
        if extra:
            raise NormsFormatError(f"unknown emotion row(s): {', '.join(extra)}")
        for name, row in rows.items():
            for dim, m in zip(DIMENSIONS, row.mean):
                if not 1.0 <= m <= 9.0:
                    raise NormsFormatError(f"{name}: mean {dim} {m} outside [1, 9]")
            for dim, s in zip(DIMENSIONS, row.sd):
                if not s > 0:
                    raise NormsFormatError(f"{name}: sd {dim} must be positive, got {s}")
        self._rows = {e: rows[e] for e in EMOTIONS}

    def __getitem__(self, emotion: str) -> NormRow:
        return self._rows[emotion]

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows)

    @property
    def means(self) -> np.ndarray:
        """(8, 3) array in EMOTIONS order."""
        return np.array([self._rows[e].mean for e in EMOTIONS], dtype=np.float64)

    @property
    def sds(self) -> np.ndarray:
        return np.array([self._rows[e].sd for e in EMOTIONS], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(NORMS_HEADER)
            for e in EMOTIONS:
                r = self._rows[e]
                w.writerow([e, *(repr(float(v)) for v in r.mean), *(repr(float(v)) for v in r.sd)])


def load_norms(path) -> NormTable:
    path = Path(path)
    rows: dict[str, NormRow] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != NORMS_HEADER:
            raise NormsFormatError(f"{path}: expected header {','.join(NORMS_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(NORMS_HEADER):
                raise NormsFormatError(f"{path}:{lineno}: expected {len(NORMS_HEADER)} fields")
            name = rec[0].strip()
            if name in rows:
                raise NormsFormatError(f"{path}:{lineno}: duplicate row for {name}")
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise NormsFormatError(f"{path}:{lineno}: row {name}: {exc}") from None
            rows[name] = NormRow(tuple(vals[:3]), tuple(vals[3:]))
    try:
        return NormTable(rows)
    except NormsFormatError as exc:
        raise NormsFormatError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class EmotionVector:
    valence: float
    arousal: float
    dominance: float | None = None

    @property
    def dims(self) -> int:
        return 2 if self.dominance is None else 3

    def as_array(self) -> np.ndarray:
        vals = (self.valence, self.arousal) if self.dominance is None else (self.valence, self.arousal, self.dominance)
        return np.array(vals, dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> EmotionVector:
        if len(values) == 2:
            return cls(float(values[0]), float(values[1]))
        if len(values) == 3:
            return cls(float(values[0]), float(values[1]), float(values[2]))
        raise ValueError(f"emotion vector must have 2 or 3 components, got {len(values)}")


def map_labels(counts: CrowdLabelCounts, norms: NormTable, dims: int = 3) -> EmotionVector:
    """Vote-weighted mean of the emotion norms; discarded votes are ignored."""
    if dims not in (2, 3):
        raise ValueError(f"dims must be 2 or 3, got {dims}")
    c = counts.emotion_counts()
    total = c.sum()
    if total == 0:
        raise UnratableImageError("image has no votes on any of the eight emotions")
    # int/int division is correctly rounded, so scaling all counts leaves weights bit-identical
    weights = [int(ck) / int(total) for ck in c]
    means = norms.means
    vals = [sum(weights[k] * means[k, d] for k in range(len(EMOTIONS))) for d in range(dims)]
    return EmotionVector.from_array(vals)


def derive_thresholds(norms: NormTable) -> dict[str, float]:
    """Mean of all 24 norm sds, and the unit accuracy threshold (half of it)."""
    sd_mean = float(sum(sorted(norms.sds.reshape(-1).tolist())) / 24.0)
    return {"sd_mean": sd_mean, "t_unit": 0.5 * sd_mean}


def rating_histogram(vectors: Iterable[EmotionVector], bins: int = 32) -> np.ndarray:
    """Per-dimension counts over ``bins`` uniform bins on [1, 9]; shape (dims, bins)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    arr = np.array([v.as_array() for v in vectors], dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, bins), dtype=np.int64)
    idx = np.floor((arr - 1.0) / 8.0 * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    return np.stack([np.bincount(idx[:, d], minlength=bins) for d in range(arr.shape[1])])
