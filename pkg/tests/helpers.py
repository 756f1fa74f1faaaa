"""Builders shared by the test modules: FER-style CSVs, stub datasets, crafted evaluations."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from resemote.augment import AugmentationScheme, compute_plan, emit_manifest, run_generation, StubGenerator
from resemote.data import NUM_CLASSES, EmotionClass, LabeledDataset, Origin, Sample, Split, load_image_folder
from resemote.tensor import Tensor

# Original training-split counts keyed by class name, as tabulated in the source table
# (whose rows run Anger, Disgust, Fear, Happy, Neutral, Sad, Surprise).
TABLE2_ORIGINAL = {
    "FER2013": {"Angry": 3995, "Disgust": 436, "Fear": 4097, "Happy": 7215, "Neutral": 4965, "Sad": 4830, "Surprise": 3171},
    "RAF-DB": {"Angry": 705, "Disgust": 717, "Fear": 281, "Happy": 4772, "Neutral": 2524, "Sad": 1982, "Surprise": 1290},
}


def in_code_order(by_name: dict[str, int]) -> list[int]:
    return [by_name[c.title] for c in EmotionClass]


FER_ORIGINAL = in_code_order(TABLE2_ORIGINAL["FER2013"])  # [3995, 436, 4097, 7215, 4830, 3171, 4965]
RAF_ORIGINAL = in_code_order(TABLE2_ORIGINAL["RAF-DB"])  # [705, 717, 281, 4772, 1982, 1290, 2524]


def write_fer_csv(path: Path, rows) -> Path:
    """rows: iterable of (label, pixels: 2304 ints, tag)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("emotion,pixels,Usage\n")
        for label, pixels, tag in rows:
            fh.write(f"{label},{' '.join(str(int(v)) for v in pixels)},{tag}\n")
    return path


def toy_fer_rows(per_class: dict[str, int], seed: int = 0):
    """Class-dependent constant-ish 48x48 faces so a tiny model has something to learn."""
    rng = np.random.default_rng(seed)
    for tag, n in per_class.items():
        for i in range(n):
            label = i % NUM_CLASSES
            base = 20 + 30 * label
            yield label, np.clip(base + rng.integers(-5, 6, 48 * 48), 0, 255), tag


def stub_folder(root: Path, per_class: int, seed: int = 0) -> Path:
    """Generate ``per_class`` stub images per class through the planner and generator."""
    plan = compute_plan([0] * NUM_CLASSES, AugmentationScheme.fixed(per_class), "stub")
    report = run_generation(emit_manifest(plan, seed=seed), StubGenerator(), root)
    assert report.failed == 0
    return root


def stub_dataset(root: Path, per_class: int, seed: int = 0) -> LabeledDataset:
    return load_image_folder(stub_folder(root, per_class, seed), Split.TRAIN, name="stub")


def constant_dataset(labels, value: float = 0.0) -> LabeledDataset:
    img = np.full((3, 64, 64), value, dtype=np.float32)
    return LabeledDataset([Sample(EmotionClass(int(c)), Origin.REAL, f"s{i}", pixels=img) for i, c in enumerate(labels)],
                          Split.TEST, "toy")


class LookupModel:
    """Predicts from a per-sample table; ties the evaluation harness to hand-built predictions."""

    def __init__(self, predictions):
        self.predictions = list(predictions)
        self.pos = 0
        self.training = False

    def eval(self):
        self.training = False

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        logits = np.zeros((n, NUM_CLASSES), dtype=np.float32)
        for i in range(n):
            logits[i, self.predictions[self.pos + i]] = 1.0
        self.pos += n
        return Tensor(logits)


# 14 samples: two per class, with three hand-placed mistakes
FOURTEEN_TRUE = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6]
FOURTEEN_PRED = [0, 0, 1, 3, 2, 4, 3, 3, 4, 4, 5, 5, 6, 0]
