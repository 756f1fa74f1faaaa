"""Dataset ingestion: FER2013 CSV, class-per-directory image folders, batching."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import netpbm
from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SIZE = (64, 64)
FER_SIDE = 48


class EmotionClass(enum.IntEnum):
    ANGRY = 0
    DISGUST = 1
    FEAR = 2
    HAPPY = 3
    SAD = 4
    SURPRISE = 5
    NEUTRAL = 6

    @property
    def title(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "EmotionClass":
        key = text.strip().lower()
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown emotion class {text!r}") from None


_ALIASES = {m.name.lower(): m for m in EmotionClass}
_ALIASES.update(
    anger=EmotionClass.ANGRY,
    disgusted=EmotionClass.DISGUST,
    fearful=EmotionClass.FEAR,
    happiness=EmotionClass.HAPPY,
    sadness=EmotionClass.SAD,
    surprised=EmotionClass.SURPRISE,
)

NUM_CLASSES = len(EmotionClass)
CLASS_NAMES = [c.title for c in EmotionClass]


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Origin(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Normalization:
    """Pixels scaled to [0, 1], then (x - mean) / std per channel."""

    mean: float = 0.5
    std: float = 0.5

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return ((np.asarray(pixels, dtype=np.float64) / 255.0 - self.mean) / self.std).astype(np.float32)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) * self.std + self.mean) * 255.0

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std


DEFAULT_NORM = Normalization()


# ---------------------------------------------------------------- resize


def _axis_taps(size: int, out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(out) + 0.5) * (size / out) - 0.5
    src = np.clip(src, 0.0, size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [..., H, W] with half-pixel centers and edge clamping.

    Written as lerps (a + t*(b - a)) so constant regions stay bit-exact.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError(f"source image is empty: {h}x{w}")
    y0, y1, fy = _axis_taps(h, out_h)
    x0, x1, fx = _axis_taps(w, out_w)
    top, bottom = img[..., y0, :], img[..., y1, :]
    rows = top + fy[:, None] * (bottom - top)
    left, right = rows[..., x0], rows[..., x1]
    return left + fx * (right - left)


# ---------------------------------------------------------------- samples


@dataclass(frozen=True)
class Sample:
    """One image/label pair.

    ``pixels`` holds the normalized [3, 64, 64] float32 image; samples backed by
    a file (``path``) decode on access instead.
    """

    label: EmotionClass
    origin: Origin = Origin.REAL
    source_id: str = ""
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)
    path: Path | None = None

    @property
    def image(self) -> np.ndarray:
        if self.pixels is not None:
            return self.pixels
        if self.path is None:
            raise ValueError(f"sample {self.source_id!r} has neither pixels nor a path")
        return load_image_file(self.path)


def prepare_image(raw: np.ndarray, size: tuple[int, int] = IMAGE_SIZE, norm: Normalization = DEFAULT_NORM) -> np.ndarray:
    """uint8 [C, H, W] -> normalized float32 [3, h, w]."""
    if raw.ndim != 3 or raw.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3, H, W] image, got shape {raw.shape}")
    out = resize_bilinear(raw, *size) if raw.shape[1:] != tuple(size) else raw
    out = ((out / 255.0 - norm.mean) / norm.std).astype(np.float32)
    if out.shape[0] == 1:
        out = np.broadcast_to(out, (3,) + out.shape[1:])
    return out


def load_image_file(path: str | Path, size: tuple[int, int] = IMAGE_SIZE, norm: Normalization = DEFAULT_NORM) -> np.ndarray:
    return prepare_image(netpbm.read(path), size, norm)


@dataclass
class LabeledDataset:
    samples: list[Sample]
    split: Split = Split.TRAIN
    name: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.fromiter((int(s.label) for s in self.samples), dtype=np.int64, count=len(self.samples))

    def merge(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(self.samples + other.samples, self.split, self.name)

    def subset(self, indices: Sequence[int], split: Split | None = None) -> "LabeledDataset":
        return LabeledDataset([self.samples[i] for i in indices], split or self.split, self.name)


def class_histogram(dataset: LabeledDataset) -> list[int]:
    """Counts per emotion class in class-code order."""
    return np.bincount(dataset.labels, minlength=NUM_CLASSES).tolist()


# ---------------------------------------------------------------- FER2013 CSV


FER2013_SPLITS: dict[str, Split] = {"Training": Split.TRAIN, "PublicTest": Split.VAL, "PrivateTest": Split.TEST}


@dataclass(frozen=True)
class SplitSpec:
    """Raw partition tag -> split. The default routes PublicTest to validation."""

    mapping: Mapping[str, Split] = field(default_factory=lambda: dict(FER2013_SPLITS))

    def __post_init__(self):
        for tag, split in self.mapping.items():
            if not isinstance(split, Split):
                raise TypeError(f"tag {tag!r} maps to {split!r}, not a Split")

    def route(self, tag: str) -> Split:
        try:
            return self.mapping[tag]
        except KeyError:
            raise KeyError(tag) from None


class DataFormatError(ValueError):
    pass


def load_fer2013_csv(
    path: str | Path,
    split_spec: SplitSpec | None = None,
    norm: Normalization = DEFAULT_NORM,
    name: str = "FER2013",
) -> dict[Split, LabeledDataset]:
    split_spec = split_spec or SplitSpec()
    n_pix = FER_SIDE * FER_SIDE
    labels: list[int] = []
    splits: list[Split] = []
    rows: list[np.ndarray] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["emotion", "pixels", "Usage"]:
            raise DataFormatError(f"{path}: expected header 'emotion,pixels,Usage', got {','.join(header)!r}")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}: row {rowno}: expected 3 fields, got {len(row)}")
            emotion, pixels, tag = row
            try:
                code = int(emotion)
            except ValueError:
                raise DataFormatError(f"{path}: row {rowno}: label {emotion!r} is not an integer") from None
            if not 0 <= code < NUM_CLASSES:
                raise DataFormatError(f"{path}: row {rowno}: label code {code} outside 0-{NUM_CLASSES - 1}")
            try:
                split = split_spec.route(tag.strip())
            except KeyError:
                raise DataFormatError(f"{path}: row {rowno}: unknown partition tag {tag!r}") from None
            fields = pixels.split()
            if len(fields) != n_pix:
                raise DataFormatError(f"{path}: row {rowno}: expected {n_pix} pixels, got {len(fields)}")
            try:
                values = np.array(fields, dtype=np.int64)
            except ValueError:
                raise DataFormatError(f"{path}: row {rowno}: non-integer pixel value") from None
            if values.min() < 0 or values.max() > 255:
                raise DataFormatError(f"{path}: row {rowno}: pixel value outside 0-255")
            labels.append(code)
            splits.append(split)
            rows.append(values.astype(np.uint8))

    images = _fer_images(rows, norm)
    out = {s: LabeledDataset([], s, name) for s in set(split_spec.mapping.values())}
    for i, (code, split) in enumerate(zip(labels, splits)):
        img = np.broadcast_to(images[i], (3,) + IMAGE_SIZE)
        out[split].samples.append(Sample(EmotionClass(code), Origin.REAL, f"{name}:{i}", pixels=img))
    log.info("loaded %s: %s", path, {s.value: len(d) for s, d in out.items()})
    return out


def _fer_images(rows: list[np.ndarray], norm: Normalization, chunk: int = 2048) -> np.ndarray:
    out = np.empty((len(rows), 1) + IMAGE_SIZE, dtype=np.float32)
    for start in range(0, len(rows), chunk):
        block = np.stack(rows[start:start + chunk]).reshape(-1, 1, FER_SIDE, FER_SIDE)
        up = resize_bilinear(block, *IMAGE_SIZE)
        out[start:start + len(block)] = (up / 255.0 - norm.mean) / norm.std
    return out


# ---------------------------------------------------------------- image folders


def load_image_folder(
    root: str | Path,
    split: Split = Split.TRAIN,
    name: str | None = None,
    lazy: bool = False,
    origin: Origin = Origin.REAL,
    norm: Normalization = DEFAULT_NORM,
) -> LabeledDataset:
    """Read ``<root>/<ClassName>/<file>`` trees of 8-bit PGM/PPM images.

    Files are ordered lexicographically by path; dotfiles are ignored. With ``lazy`` the samples keep
    only their path and decode when their image is first requested.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"image folder {root} does not exist")
    entries: list[tuple[Path, EmotionClass]] = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = EmotionClass.parse(class_dir.name)
        except ValueError:
            raise DataFormatError(f"unknown class directory {class_dir}") from None
        entries.extend((f, label) for f in sorted(class_dir.iterdir()) if f.is_file() and not f.name.startswith("."))
    entries.sort(key=lambda e: str(e[0]))
    samples = []
    for path, label in entries:
        sid = str(path.relative_to(root))
        if lazy:
            samples.append(Sample(label, origin, sid, path=path))
            continue
        try:
            pixels = load_image_file(path, norm=norm)
        except netpbm.NetpbmError as exc:
            raise DataFormatError(f"cannot decode {path}: {exc}") from exc
        samples.append(Sample(label, origin, sid, pixels=pixels, path=path))
    return LabeledDataset(samples, split, name or root.name)


def carve_validation(dataset: LabeledDataset, fraction: float = 0.1, seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded hold-out of ``fraction`` of the samples as a validation split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(n * fraction))) if n > 1 else 0
    val_idx, train_idx = sorted(perm[:k]), sorted(perm[k:])
    return dataset.subset(train_idx, Split.TRAIN), dataset.subset(val_idx, Split.VAL)


# ---------------------------------------------------------------- batching


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int = 0) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(
    dataset: LabeledDataset,
    batch_size: int,
    shuffle: bool = True,
    seed: int = 0,
    epoch: int = 0,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images [N,3,H,W], labels [N]); the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError(f"dataset {dataset.name!r} ({dataset.split.value}) is empty")
    order = epoch_order(len(dataset), shuffle, seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = [dataset.samples[i] for i in idx]
        images = np.stack([s.image for s in batch]).astype(np.float32, copy=False)
        yield Tensor(images), np.array([int(s.label) for s in batch], dtype=np.int64)
