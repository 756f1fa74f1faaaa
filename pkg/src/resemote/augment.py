"""Class-rebalancing with synthetic images.

Plan per-class deficits, expand them into text-prompt manifests, drive an image
generator over the manifest, and fold the generated files back into the
training split with a count check.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import netpbm
from .data import (
    CLASS_NAMES,
    IMAGE_SIZE,
    NUM_CLASSES,
    EmotionClass,
    LabeledDataset,
    Origin,
    Split,
    class_histogram,
    load_image_folder,
    resize_bilinear,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# Named rebalancing schemes: equalize to the largest class, then fixed per-class targets.
PRESETS = {"aug1": None, "aug2": 10000, "aug3": 12500, "aug4": 15000}


# ---------------------------------------------------------------- planning


@dataclass(frozen=True)
class AugmentationScheme:
    """``target=None`` equalizes every class to the largest one."""

    target: int | None = None

    def __post_init__(self):
        if self.target is not None and self.target < 1:
            raise ValueError(f"fixed target must be >= 1, got {self.target}")

    @classmethod
    def equalize(cls) -> "AugmentationScheme":
        return cls(None)

    @classmethod
    def fixed(cls, target: int) -> "AugmentationScheme":
        return cls(int(target))

    @classmethod
    def parse(cls, text: str) -> "AugmentationScheme":
        key = text.strip().lower()
        if key == "equalize":
            return cls.equalize()
        if key in PRESETS:
            return cls(PRESETS[key])
        m = re.fullmatch(r"fixed:(\d+)", key)
        if m and int(m.group(1)) >= 1:
            return cls.fixed(int(m.group(1)))
        raise ValueError(f"bad scheme {text!r}; expected 'equalize', 'fixed:<N>' with N >= 1, or aug1..aug4")

    def __str__(self) -> str:
        return "equalize" if self.target is None else f"fixed:{self.target}"

    @property
    def tag(self) -> str:
        for name, target in PRESETS.items():
            if target == self.target:
                return name.capitalize()
        return str(self)


@dataclass(frozen=True)
class ClassPlan:
    label: EmotionClass
    original: int
    target: int

    @property
    def deficit(self) -> int:
        return max(0, self.target - self.original)

    @property
    def expected(self) -> int:
        """Post-merge count: the target, or the original for overfull classes (never downsampled)."""
        return self.original + self.deficit


@dataclass(frozen=True)
class AugmentationPlan:
    classes: tuple[ClassPlan, ...]
    scheme: AugmentationScheme
    dataset: str = ""

    @property
    def originals(self) -> list[int]:
        return [c.original for c in self.classes]

    @property
    def targets(self) -> list[int]:
        return [c.target for c in self.classes]

    @property
    def deficits(self) -> list[int]:
        return [c.deficit for c in self.classes]

    @property
    def expected(self) -> list[int]:
        return [c.expected for c in self.classes]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "scheme": str(self.scheme),
            "classes": [
                {"class": c.label.title, "original": c.original, "target": c.target, "deficit": c.deficit}
                for c in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPlan":
        classes = tuple(ClassPlan(EmotionClass.parse(c["class"]), int(c["original"]), int(c["target"])) for c in d["classes"])
        return cls(classes, AugmentationScheme.parse(d["scheme"]), d.get("dataset", ""))

    def table(self) -> str:
        lines = [f"{'class':<10}{'original':>10}{'target':>10}{'deficit':>10}"]
        for c in self.classes:
            lines.append(f"{c.label.title:<10}{c.original:>10}{c.target:>10}{c.deficit:>10}")
        lines.append(f"{'total':<10}{sum(self.originals):>10}{sum(self.expected):>10}{sum(self.deficits):>10}")
        return "\n".join(lines)


def compute_plan(histogram: Sequence[int], scheme: AugmentationScheme, dataset: str = "") -> AugmentationPlan:
    counts = [int(c) for c in histogram]
    if len(counts) != NUM_CLASSES:
        raise ValueError(f"histogram needs {NUM_CLASSES} counts, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError(f"histogram counts must be nonnegative, got {counts}")
    if scheme.target is None:
        target = max(counts)
        if target == 0:
            raise ValueError("cannot equalize an all-zero histogram: no target is definable")
    else:
        target = scheme.target
    return AugmentationPlan(
        tuple(ClassPlan(EmotionClass(i), c, target) for i, c in enumerate(counts)), scheme, dataset
    )


# ---------------------------------------------------------------- prompts


@dataclass(frozen=True)
class Subject:
    noun: str
    article: str
    pronoun: str
    ages: tuple[str, ...]


SUBJECTS = (
    Subject("man", "a", "his", ("20's", "30's", "40's", "50's")),
    Subject("woman", "a", "her", ("20's", "30's", "40's", "50's")),
    Subject("kid", "a", "their", ("teens",)),
    Subject("old man", "an", "his", ("60's", "70's", "80's")),
    Subject("old woman", "an", "her", ("60's", "70's", "80's")),
)

EMOTION_WORDS = {
    EmotionClass.ANGRY: "angry",
    EmotionClass.DISGUST: "disgust",
    EmotionClass.FEAR: "fear",
    EmotionClass.HAPPY: "happy",
    EmotionClass.SAD: "sad",
    EmotionClass.SURPRISE: "surprise",
    EmotionClass.NEUTRAL: "neutral",
}


@dataclass(frozen=True)
class PromptTemplate:
    """Format string over {A_subject}, {a_subject}, {subject}, {pronoun}, {age}, {emotion}, {Emotion}.

    ``keywords`` lists slot names (or literal words) in the order they are reported.
    """

    text: str
    keywords: tuple[str, ...]

    def render(self, emotion: EmotionClass, subject: Subject, age: str) -> tuple[str, list[str]]:
        word = EMOTION_WORDS[emotion]
        a_subject = f"{subject.article} {subject.noun}"
        slots = {
            "A_subject": a_subject[0].upper() + a_subject[1:],
            "a_subject": a_subject,
            "subject": subject.noun,
            "pronoun": subject.pronoun,
            "age": age,
            "emotion": word,
            "Emotion": word.capitalize(),
        }
        prompt = self.text.format(**slots)
        keywords = [slots.get(k, k) for k in self.keywords]
        return prompt, keywords


DEFAULT_TEMPLATES = (
    PromptTemplate("{A_subject}'s face with {emotion} emotion", ("subject", "emotion")),
    PromptTemplate("A face of {a_subject} in {pronoun} {age} expressing {emotion} emotion", ("subject", "age", "emotion")),
    PromptTemplate("{Emotion} expression on {a_subject}, realistic photo", ("emotion", "subject", "realistic")),
    PromptTemplate("{A_subject} in {pronoun} {age} expressing {emotion} emotions on {pronoun} face", ("subject", "age", "emotion")),
)


@dataclass(frozen=True)
class ManifestEntry:
    label: EmotionClass
    prompt: str
    keywords: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"class": self.label.title, "prompt": self.prompt, "keywords": list(self.keywords), "seed": self.seed}


@dataclass(frozen=True)
class PromptManifest:
    entries: tuple[ManifestEntry, ...]
    dataset: str = ""
    scheme: str = ""
    version: int = MANIFEST_VERSION

    def counts(self) -> list[int]:
        out = [0] * NUM_CLASSES
        for e in self.entries:
            out[e.label] += 1
        return out

    def seed_range(self, label: EmotionClass) -> tuple[int, int] | None:
        seeds = [e.seed for e in self.entries if e.label == label]
        return (min(seeds), max(seeds)) if seeds else None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dataset": self.dataset,
            "scheme": self.scheme,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptManifest":
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        entries = tuple(
            ManifestEntry(EmotionClass.parse(e["class"]), e["prompt"], tuple(e["keywords"]), int(e["seed"]))
            for e in d["entries"]
        )
        seeds = [e.seed for e in entries]
        if len(set(seeds)) != len(seeds):
            raise ValueError("manifest seeds must be distinct")
        return cls(entries, d.get("dataset", ""), d.get("scheme", ""), d["version"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PromptManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def emit_manifest(
    plan: AugmentationPlan,
    templates: Sequence[PromptTemplate] = DEFAULT_TEMPLATES,
    seed: int = 0,
) -> PromptManifest:
    """Expand every class deficit into prompts, round-robin over template, subject, then age."""
    if not templates:
        raise ValueError("template set must be nonempty")
    entries = []
    next_seed = seed
    n_t, n_s = len(templates), len(SUBJECTS)
    for cp in plan.classes:
        for i in range(cp.deficit):
            template = templates[i % n_t]
            subject = SUBJECTS[(i // n_t) % n_s]
            age = subject.ages[(i // (n_t * n_s)) % len(subject.ages)]
            prompt, keywords = template.render(cp.label, subject, age)
            entries.append(ManifestEntry(cp.label, prompt, tuple(keywords), next_seed))
            next_seed += 1
    return PromptManifest(tuple(entries), plan.dataset, str(plan.scheme))


# ---------------------------------------------------------------- generators

Generator = Callable[[str, int], bytes]


class GenerationError(RuntimeError):
    pass


def emotion_from_prompt(prompt: str) -> EmotionClass:
    found = set()
    for word in re.findall(r"[a-z]+", prompt.lower()):
        try:
            found.add(EmotionClass.parse(word))
        except ValueError:
            continue
    if not found:
        raise GenerationError(f"no emotion keyword in prompt {prompt!r}")
    if len(found) > 1:
        raise GenerationError(f"prompt names several emotions {sorted(c.title for c in found)}: {prompt!r}")
    return found.pop()


def _class_color(label: EmotionClass) -> np.ndarray:
    # classes sit evenly on a circle around mid-gray, in the plane orthogonal to the gray axis
    u = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
    v = np.array([1.0, 1.0, -2.0]) / math.sqrt(6.0)
    theta = 2.0 * math.pi * int(label) / NUM_CLASSES
    return 128.0 + 70.0 * (math.cos(theta) * u + math.sin(theta) * v)


def stub_generate(prompt: str, seed: int) -> bytes:
    """Deterministic 64x64 PPM whose color and stripe pattern encode the prompt's emotion.

    Each class has its own base color, stripe frequency and orientation; the seed
    only jitters phase, contrast, tint and adds faint noise.
    """
    label = emotion_from_prompt(prompt)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(label)])
    h, w = IMAGE_SIZE
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    angle = math.pi * int(label) / NUM_CLASSES
    freq = 1 + int(label)
    phase = rng.uniform(0, 2 * math.pi)
    coord = math.cos(angle) * xx + math.sin(angle) * yy
    stripes = rng.uniform(30.0, 40.0) * np.sin(2 * math.pi * freq * coord + phase)
    color = _class_color(label) + rng.uniform(-6.0, 6.0, 3)
    img = color[:, None, None] + stripes[None] + rng.uniform(-4.0, 4.0, (3, h, w))
    return netpbm.encode(np.clip(np.round(img), 0, 255).astype(np.uint8))


class StubGenerator:
    def __call__(self, prompt: str, seed: int) -> bytes:
        return stub_generate(prompt, seed)

    def __repr__(self) -> str:
        return "StubGenerator()"


class CommandGenerator:
    """Runs ``argv + [prompt, seed]``; the image bytes (PGM/PPM) come back on stdout."""

    def __init__(self, argv: Sequence[str], timeout: float | None = 600.0):
        if not argv:
            raise ValueError("generator command must be nonempty")
        self.argv = list(argv)
        self.timeout = timeout

    def __call__(self, prompt: str, seed: int) -> bytes:
        try:
            proc = subprocess.run(
                self.argv + [prompt, str(seed)], capture_output=True, timeout=self.timeout, check=False
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise GenerationError(f"generator command failed to run: {exc}") from exc
        if proc.returncode != 0:
            err = proc.stderr.decode("utf-8", "replace").strip()[-200:]
            raise GenerationError(f"generator exited with status {proc.returncode}: {err}")
        return proc.stdout

    def __repr__(self) -> str:
        return f"CommandGenerator({self.argv!r})"


def generator_from_spec(spec: str) -> Generator:
    """'stub' or 'cmd:<shell-style command>'."""
    import shlex

    if spec == "stub":
        return StubGenerator()
    if spec.startswith("cmd:") and spec[4:].strip():
        return CommandGenerator(shlex.split(spec[4:]))
    raise ValueError(f"bad generator spec {spec!r}; expected 'stub' or 'cmd:<command>'")


# ---------------------------------------------------------------- generation run


@dataclass
class ClassGeneration:
    requested: int = 0
    succeeded: int = 0
    skipped: int = 0
    failed: list[dict] = field(default_factory=list)


@dataclass
class GenerationReport:
    classes: dict[str, ClassGeneration] = field(default_factory=lambda: {n: ClassGeneration() for n in CLASS_NAMES})

    @property
    def requested(self) -> int:
        return sum(c.requested for c in self.classes.values())

    @property
    def succeeded(self) -> int:
        return sum(c.succeeded for c in self.classes.values())

    @property
    def skipped(self) -> int:
        return sum(c.skipped for c in self.classes.values())

    @property
    def failed(self) -> int:
        return sum(len(c.failed) for c in self.classes.values())

    @property
    def all_failed(self) -> bool:
        return self.requested > 0 and self.failed == self.requested

    def to_dict(self) -> dict:
        return {
            "requested": self.requested,
            "succeeded": self.succeeded,
            "skipped": self.skipped,
            "failed": self.failed,
            "classes": {
                name: {"requested": c.requested, "succeeded": c.succeeded, "skipped": c.skipped, "failed": c.failed}
                for name, c in self.classes.items()
            },
        }


def _to_stored_image(raw: bytes) -> np.ndarray:
    img = netpbm.decode(raw)
    if img.shape[1:] != IMAGE_SIZE:
        img = np.clip(np.round(resize_bilinear(img, *IMAGE_SIZE)), 0, 255).astype(np.uint8)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img


def run_generation(
    manifest: PromptManifest,
    generator: Generator,
    out_dir: str | Path,
    workers: int = 1,
) -> GenerationReport:
    """Write ``<out_dir>/<Class>/<seed>.ppm`` per entry; existing files are skipped.

    A failing entry is recorded and the run continues.
    """
    out_dir = Path(out_dir)
    report = GenerationReport()
    pending = []
    for entry in manifest.entries:
        cls = report.classes[entry.label.title]
        cls.requested += 1
        path = out_dir / entry.label.title / f"{entry.seed}.ppm"
        if path.exists():
            cls.skipped += 1
        else:
            pending.append((entry, path))

    def work(item):
        entry, path = item
        try:
            img = _to_stored_image(generator(entry.prompt, entry.seed))
        except Exception as exc:  # generator faults are data, not crashes
            return entry, repr(exc) if not str(exc) else str(exc)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".{path.name}.tmp"
        netpbm.write(tmp, img)
        os.replace(tmp, path)
        return entry, None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, pending))
    else:
        results = [work(item) for item in pending]
    for entry, error in results:
        cls = report.classes[entry.label.title]
        if error is None:
            cls.succeeded += 1
        else:
            cls.failed.append({"seed": entry.seed, "reason": error})
    log.info("generation: %d requested, %d new, %d skipped, %d failed",
             report.requested, report.succeeded, report.skipped, report.failed)
    return report


# ---------------------------------------------------------------- merge


class VerificationError(ValueError):
    def __init__(self, mismatches: list[tuple[str, int, int]]):
        self.mismatches = mismatches
        detail = "; ".join(f"{name}: expected {exp}, actual {act}" for name, exp, act in mismatches)
        super().__init__(f"post-merge class counts do not match the plan ({detail})")


def merge_and_verify(real: LabeledDataset, synth_dir: str | Path | None, plan: AugmentationPlan) -> LabeledDataset:
    """Append synthetic images to a training split and check the plan's counts exactly."""
    if real.split is not Split.TRAIN:
        raise ValueError(f"synthetic data only ever joins the training split, got {real.split.value}")
    merged = real
    if synth_dir is not None and Path(synth_dir).is_dir():
        synth = load_image_folder(synth_dir, Split.TRAIN, real.name, lazy=True, origin=Origin.SYNTHETIC)
        merged = real.merge(synth)
    hist = class_histogram(merged)
    bad = [(c.label.title, c.expected, hist[c.label]) for c in plan.classes if hist[c.label] != c.expected]
    if bad:
        raise VerificationError(bad)
    return merged
