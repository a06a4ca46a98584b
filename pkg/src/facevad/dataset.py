"""FER-2013 images + FERPlus-style vote files -> VAD regression splits."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .tensor import Tensor
from .vad import (
    EMOTIONS,
    CrowdLabelCounts,
    EmotionVector,
    NormRow,
    NormTable,
    UnratableImageError,
    map_labels,
)

log = logging.getLogger(__name__)

IMAGE_SIDE = 48
N_PIXELS = IMAGE_SIDE * IMAGE_SIDE
USAGES = ("Training", "PublicTest", "PrivateTest")
IMAGE_HEADER = ("emotion", "pixels", "Usage")
LABEL_HEADER = (
    "usage", "image", "neutral", "happiness", "surprise", "sadness",
    "anger", "disgust", "fear", "contempt", "unknown", "NF",
)
# FER-2013 emotion codes; contempt has no code there
FER_CODES = {"anger": 0, "disgust": 1, "fear": 2, "happiness": 3, "sadness": 4, "surprise": 5, "neutral": 6}


class DataFormatError(ValueError):
    pass


def image_id(index: int) -> str:
    """FERPlus naming: zero-based row index of the FER-2013 file."""
    return f"fer{index:07d}.png"


@dataclass(frozen=True, eq=False)
class FaceImage:
    id: str
    pixels: np.ndarray  # (48, 48) uint8
    usage: str


@dataclass(frozen=True)
class LabeledExample:
    image: FaceImage
    counts: CrowdLabelCounts
    target: EmotionVector

    @property
    def id(self) -> str:
        return self.image.id


@dataclass
class SplitDataset:
    train: list[LabeledExample] = field(default_factory=list)
    val: list[LabeledExample] = field(default_factory=list)
    test: list[LabeledExample] = field(default_factory=list)
    dims: int = 3
    dropped_unratable: int = 0
    dropped_unlabeled: int = 0

    @property
    def retained(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def split(self, name: str) -> list[LabeledExample]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}; expected train, val or test")
        return getattr(self, name)

    def all(self) -> list[LabeledExample]:
        return self.train + self.val + self.test


# ---------------------------------------------------------------- parsing


def parse_pixels(text: str, where: str) -> np.ndarray:
    try:
        vals = [int(v) for v in text.split()]
    except ValueError:
        raise DataFormatError(f"{where}: pixels must be base-10 integers") from None
    if len(vals) != N_PIXELS:
        raise DataFormatError(f"{where}: expected {N_PIXELS} pixel values, got {len(vals)}")
    arr = np.array(vals, dtype=np.int64)
    if arr.min() < 0 or arr.max() > 255:
        raise DataFormatError(f"{where}: pixel value out of range [0, 255]")
    return arr.astype(np.uint8).reshape(IMAGE_SIDE, IMAGE_SIDE)


def parse_image_csv(path) -> list[FaceImage]:
    images = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(IMAGE_HEADER):
            raise DataFormatError(f"{path}:1: expected header {','.join(IMAGE_HEADER)}")
        for row_index, rec in enumerate(reader):
            lineno = row_index + 2
            where = f"{path}:{lineno}"
            if len(rec) != 3:
                raise DataFormatError(f"{where}: expected 3 fields, got {len(rec)}")
            usage = rec[2].strip()
            if usage not in USAGES:
                raise DataFormatError(f"{where}: unknown Usage {usage!r}")
            images.append(FaceImage(image_id(row_index), parse_pixels(rec[1], where), usage))
    return images


def _normalize_label_header(name: str) -> str:
    key = name.strip().lower()
    if key == "image name":
        return "image"
    if key == "nf":
        return "NF"
    return key


def parse_crowd_labels(path) -> dict[str, CrowdLabelCounts]:
    """Read a FERPlus vote file. Rows with an empty image name are skipped."""
    labels: dict[str, CrowdLabelCounts] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        cols = [_normalize_label_header(h) for h in header]
        missing = [c for c in LABEL_HEADER if c not in cols]
        if missing:
            raise DataFormatError(f"{path}:1: missing column(s) {', '.join(missing)}")
        pos = {c: cols.index(c) for c in LABEL_HEADER}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            where = f"{path}:{lineno}"
            if len(rec) < len(cols):
                raise DataFormatError(f"{where}: expected {len(cols)} fields, got {len(rec)}")
            name = rec[pos["image"]].strip()
            if not name:
                continue
            votes = {}
            for c in LABEL_HEADER[2:]:
                try:
                    v = int(rec[pos[c]])
                except ValueError:
                    raise DataFormatError(f"{where}: column {c} is not an integer") from None
                if v < 0:
                    raise DataFormatError(f"{where}: negative vote in column {c}")
                votes[c] = v
            labels[name] = CrowdLabelCounts(
                **{e: votes[e] for e in EMOTIONS}, discarded=votes["unknown"] + votes["NF"]
            )
    return labels


def build_dataset(
    images: Sequence[FaceImage],
    labels: Mapping[str, CrowdLabelCounts],
    norms: NormTable,
    dims: int = 3,
) -> SplitDataset:
    """Join, drop unlabeled/unratable images, and split by Usage."""
    by_id = {im.id: im for im in images}
    for name in labels:
        if name not in by_id:
            log.warning("label row %s references a missing image; skipped", name)
    out = SplitDataset(dims=dims)
    dest = {"Training": out.train, "PublicTest": out.val, "PrivateTest": out.test}
    for im in images:
        counts = labels.get(im.id)
        if counts is None:
            out.dropped_unlabeled += 1
            continue
        try:
            target = map_labels(counts, norms, dims)
        except UnratableImageError:
            out.dropped_unratable += 1
            continue
        dest[im.usage].append(LabeledExample(im, counts, target))
    return out


def load_data_dir(data_dir, norms: NormTable, dims: int = 3) -> SplitDataset:
    data_dir = Path(data_dir)
    return build_dataset(
        parse_image_csv(data_dir / "images.csv"), parse_crowd_labels(data_dir / "labels.csv"), norms, dims
    )


# ---------------------------------------------------------------- tensors


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array to ``size`` x ``size``."""
    h, w = img.shape
    if (h, w) == (size, size):
        return img.copy()

    def axis(n_in):
        src = (np.arange(size, dtype=np.float64) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    # lerp as a + f*(b - a) so constant images stay exactly constant
    rows = img[y0] + fy[:, None] * (img[y1] - img[y0])
    return rows[:, x0] + fx[None, :] * (rows[:, x1] - rows[:, x0])


def preprocess(image: FaceImage, target_size: int = 48, channels: int = 1) -> Tensor:
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    x = image.pixels.astype(np.float32) / np.float32(255.0)
    x = resize_bilinear(x, target_size)
    return Tensor(np.repeat(x[None], channels, axis=0))


def mirror(t: Tensor) -> Tensor:
    return Tensor(t.data[..., ::-1].copy())


def augment_flip(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Horizontal mirror with probability 1/2."""
    return mirror(t) if rng.random() < 0.5 else t


def batch_iter(
    examples: Sequence[LabeledExample],
    batch_size: int,
    rng: np.random.Generator | None = None,
    shuffle: bool = True,
    *,
    target_size: int = 48,
    channels: int = 1,
    flip: bool = False,
) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield (inputs, targets) minibatches covering every example once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if (shuffle or flip) and rng is None:
        raise ValueError("shuffling or flipping needs an rng")
    order = rng.permutation(len(examples)) if shuffle else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        xs = []
        for ex in chunk:
            t = preprocess(ex.image, target_size, channels)
            xs.append((augment_flip(t, rng) if flip else t).data)
        ys = np.stack([ex.target.as_array() for ex in chunk]).astype(np.float32)
        yield Tensor(np.stack(xs)), Tensor(ys)


# ---------------------------------------------------------------- synthetic data

# Desk-scale stand-in values. Only the happiness row is a published anchor;
# the rest are illustrative and must be replaced with real norms for real runs.
SYNTHETIC_NORMS = {
    "happiness": ((8.21, 6.49, 6.63), (1.82, 2.77, 2.43)),
    "surprise": ((7.44, 6.57, 6.11), (1.97, 1.88, 2.18)),
    "sadness": ((1.61, 4.13, 3.45), (0.95, 2.38, 2.07)),
    "anger": ((2.34, 6.91, 5.14), (1.32, 2.06, 2.66)),
    "disgust": ((2.45, 5.42, 4.34), (1.41, 2.59, 2.37)),
    "fear": ((2.76, 6.14, 3.22), (2.12, 2.39, 2.04)),
    "contempt": ((3.85, 5.28, 5.46), (2.13, 2.04, 1.94)),
    "neutral": ((5.40, 2.74, 5.29), (1.35, 1.87, 1.93)),
}


def synthetic_norms() -> NormTable:
    return NormTable({e: NormRow(m, s) for e, (m, s) in SYNTHETIC_NORMS.items()})


def _render_face(v: float, a: float, d: float, rng: np.random.Generator) -> np.ndarray:
    """Cartoon face whose mouth, eyes and brows move with V, A and D.

    Valence bends the mouth and brightens it (teeth), arousal opens the eyes
    and mouth, dominance slants and thickens the brows. Lighting varies
    mildly per image.
    """
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(np.float64)
    cx = 23.5 + rng.normal(0, 0.7)
    cy = 24.0 + rng.normal(0, 0.7)
    background = rng.uniform(30.0, 60.0)
    skin = rng.uniform(155.0, 175.0)
    img = np.full((IMAGE_SIDE, IMAGE_SIDE), background)
    img[((xx - cx) / 18.0) ** 2 + ((yy - cy) / 22.0) ** 2 <= 1.0] = skin
    vs, as_, ds = (v - 5.0) / 4.0, (a - 5.0) / 4.0, (d - 5.0) / 4.0
    eye_h = 1.0 + 3.0 * (as_ + 1.0)
    for ex in (cx - 8.0, cx + 8.0):
        img[((xx - ex) / 4.5) ** 2 + ((yy - (cy - 5.0)) / eye_h) ** 2 <= 1.0] = 15.0
        side = 1 if ex < cx else -1
        brow_y = cy - 9.0 - eye_h - 0.5 * side * ds * (xx - ex)
        img[(np.abs(xx - ex) <= 5.5) & (np.abs(yy - brow_y) <= 1.0 + 1.5 * (ds + 1.0))] = 10.0
    # mouth: parabola opening up for positive valence
    half_w = 9.0 + 4.0 * abs(vs)
    curve = -0.08 * vs
    centre = cy + 11.0 + curve * (xx - cx) ** 2 - curve * half_w**2 / 2
    open_h = 1.5 + 3.5 * (as_ + 1.0)
    mouth = (np.abs(xx - cx) <= half_w) & (np.abs(yy - centre) <= open_h)
    img[mouth] = 128.0 + 120.0 * vs
    img += rng.normal(0, 4.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthesize(
    n: int,
    seed: int = 0,
    split: Sequence[float] = (0.8, 0.1, 0.1),
    unratable_frac: float = 0.0,
    norms: NormTable | None = None,
) -> tuple[list[FaceImage], dict[str, tuple[str, dict[str, int]]], NormTable]:
    """Generate ``n`` images with 10-vote FERPlus-style labels.

    Returns images, a mapping id -> (usage, vote dict over LABEL_HEADER[2:]),
    and the norms table the images were rendered against.
    """
    norms = norms or synthetic_norms()
    rng = np.random.default_rng(seed)
    n_train = int(round(n * split[0]))
    n_val = min(n - n_train, int(round(n * split[1])))
    usages = np.array(["Training"] * n_train + ["PublicTest"] * n_val + ["PrivateTest"] * (n - n_train - n_val))
    usages = usages[rng.permutation(n)]
    means = norms.means
    images, votes = [], {}
    for i in range(n):
        iid = image_id(i)
        if rng.random() < unratable_frac:
            unk = int(rng.integers(0, 11))
            vote = {c: 0 for c in LABEL_HEADER[2:]}
            vote["unknown"], vote["NF"] = unk, 10 - unk
            vad = np.full(3, 5.0)
        else:
            dominant = int(rng.integers(0, 8))
            alpha = np.full(8, 0.3)
            alpha[dominant] = 4.0
            counts = rng.multinomial(10, rng.dirichlet(alpha))
            vote = {c: 0 for c in LABEL_HEADER[2:]}
            for e, c in zip(EMOTIONS, counts):
                vote[e] = int(c)
            vad = counts @ means / 10.0
        images.append(FaceImage(iid, _render_face(*vad, rng), str(usages[i])))
        votes[iid] = (str(usages[i]), vote)
    return images, votes, norms


def write_image_csv(images: Sequence[FaceImage], path, votes=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMAGE_HEADER)
        for im in images:
            code = 6
            if votes is not None:
                v = votes[im.id][1]
                top = max(EMOTIONS, key=lambda e: v[e])
                code = FER_CODES.get(top, 0)
            w.writerow([code, " ".join(str(int(p)) for p in im.pixels.reshape(-1)), im.usage])


def write_label_csv(votes: Mapping[str, tuple[str, dict[str, int]]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for iid, (usage, vote) in votes.items():
            w.writerow([usage, iid, *(vote[c] for c in LABEL_HEADER[2:])])


def write_synthetic(out_dir, n: int, seed: int = 0, split=(0.8, 0.1, 0.1), unratable_frac: float = 0.0) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, votes, norms = synthesize(n, seed, split, unratable_frac)
    write_image_csv(images, out_dir / "images.csv", votes)
    write_label_csv(votes, out_dir / "labels.csv")
    norms.to_csv(out_dir / "norms.csv")
    return out_dir
