"""Datasets: BUSI-style ingestion, speckle phantoms, manifests, splits, prompts."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .util import image_to_uint8


class DataError(ValueError):
    """Invalid dataset input or layout."""


class ClassLabel(str, Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"
    NORMAL = "normal"

    @classmethod
    def parse(cls, value: str) -> "ClassLabel":
        try:
            return cls(value)
        except ValueError:
            raise DataError(
                f"unknown class label {value!r}; expected one of "
                f"{[m.value for m in cls]}"
            ) from None


LABELS: tuple[ClassLabel, ...] = (ClassLabel.BENIGN, ClassLabel.MALIGNANT, ClassLabel.NORMAL)

_PROMPTS = {
    ClassLabel.BENIGN: "ultrasound image of a benign breast lesion",
    ClassLabel.MALIGNANT: "ultrasound image of a malignant breast lesion",
    ClassLabel.NORMAL: "ultrasound image of normal breast tissue",
}

DEFAULT_TI_TOKEN = "<ultrasound>"


def prompt_for_label(label: ClassLabel, ti_mode: bool = False, ti_token: str = DEFAULT_TI_TOKEN) -> str:
    """Class-conditional prompt; with ``ti_mode`` the learned token replaces
    the word "ultrasound" so prompts stay grammatical and length-stable."""
    prompt = _PROMPTS[ClassLabel.parse(label)]
    if not ti_mode:
        return prompt
    if not ti_token:
        raise DataError("ti_mode requires a non-empty ti_token")
    return " ".join(ti_token if w == "ultrasound" else w for w in prompt.split())


@dataclass
class Sample:
    image_ref: str | np.ndarray
    label: ClassLabel
    split: str | None = None  # "train" | "val" | None (unassigned)
    prompt: str = ""
    synthetic: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.label = ClassLabel.parse(self.label)
        if self.split not in (None, "train", "val"):
            raise DataError(f"invalid split {self.split!r}")
        if self.synthetic and self.seed is None:
            raise DataError("synthetic samples must record their generation seed")
        if not self.prompt:
            self.prompt = prompt_for_label(self.label)


@dataclass
class Manifest:
    samples: list[Sample]
    image_size: int
    metadata: dict = field(default_factory=dict)

    def class_counts(self, split: str | None = "any") -> dict[ClassLabel, int]:
        counts = {label: 0 for label in LABELS}
        for s in self.samples:
            if split == "any" or s.split == split:
                counts[s.label] += 1
        return counts

    def subset(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def save(self, path: str | Path) -> None:
        """Write JSON Lines (one sample per line) plus a .meta.json sidecar.

        Image refs must already be on disk; paths are stored relative to the
        manifest so run directories stay relocatable and byte-stable.
        """
        path = Path(path)
        base = path.parent.resolve()
        lines = []
        for s in self.samples:
            if isinstance(s.image_ref, np.ndarray):
                raise DataError("cannot save a manifest with in-memory images; write them first")
            rel = _relative_posix(Path(s.image_ref), base)
            lines.append(
                json.dumps(
                    {
                        "path": rel,
                        "label": s.label.value,
                        "split": s.split,
                        "prompt": s.prompt,
                        "synthetic": s.synthetic,
                        "seed": s.seed,
                    }
                )
            )
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        meta = {"image_size": self.image_size, "metadata": self.metadata}
        _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        samples = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(
                Sample(
                    image_ref=str((path.parent / rec["path"]).resolve()),
                    label=ClassLabel.parse(rec["label"]),
                    split=rec["split"],
                    prompt=rec["prompt"],
                    synthetic=bool(rec["synthetic"]),
                    seed=rec["seed"],
                )
            )
        meta_path = _meta_path(path)
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            image_size = int(meta["image_size"])
            metadata = meta.get("metadata", {})
        else:
            image_size = _probe_image_size(samples)
            metadata = {}
        return cls(samples=samples, image_size=image_size, metadata=metadata)

    def load_image(self, sample: Sample) -> np.ndarray:
        if isinstance(sample.image_ref, np.ndarray):
            return sample.image_ref
        return load_image(sample.image_ref, self.image_size)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _relative_posix(target: Path, base: Path) -> str:
    return Path(os.path.relpath(target.resolve(), base)).as_posix()


def _probe_image_size(samples: list[Sample]) -> int:
    for s in samples:
        if isinstance(s.image_ref, str):
            with Image.open(s.image_ref) as im:
                return im.size[0]
    raise DataError("cannot determine image size from an empty manifest")


def load_image(path: str | Path, image_size: int) -> np.ndarray:
    """Load a grayscale image, resize to square, normalize to [-1, 1]."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return arr / 127.5 - 1.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(image_to_uint8(image), mode="L").save(path)


def ingest_busi(root_dir: str | Path, image_size: int = 64) -> Manifest:
    """Build a manifest from the public BUSI directory layout.

    Expects ``root_dir`` to contain benign/malignant/normal subdirectories;
    files whose stem contains ``_mask`` are segmentation masks and skipped.
    Splits stay unassigned.
    """
    root = Path(root_dir)
    samples: list[Sample] = []
    warnings: list[str] = []
    for label in LABELS:
        class_dir = root / label.value
        if not class_dir.is_dir():
            raise DataError(f"missing class directory for {label.value!r}: {class_dir}")
        files = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and "_mask" not in p.stem and p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
        if not files:
            warnings.append(f"class directory {class_dir} contains no usable images")
        for p in files:
            load_image(p, image_size)  # fail fast with the file path
            samples.append(Sample(image_ref=str(p.resolve()), label=label, synthetic=False))
    metadata = {"source": "busi", "root": str(root)}
    if warnings:
        metadata["warnings"] = warnings
    return Manifest(samples=samples, image_size=image_size, metadata=metadata)


def split_stratified(manifest: Manifest, train_fraction: float, seed: int) -> Manifest:
    """Assign splits per class: floor(count * fraction) train, rest val.

    Uses a seeded permutation per class, so the assignment is deterministic
    for a fixed seed. Each class needs at least 2 samples to populate both
    splits.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_label: dict[ClassLabel, list[int]] = {label: [] for label in LABELS}
    for i, s in enumerate(manifest.samples):
        by_label[s.label].append(i)
    new_samples = [replace(s) for s in manifest.samples]
    for label in LABELS:
        idx = by_label[label]
        if not idx:
            continue
        if len(idx) < 2:
            raise DataError(f"class {label.value!r} has {len(idx)} sample(s); need >= 2 to split")
        n_train = math.floor(len(idx) * train_fraction + 1e-9)
        perm = rng.permutation(len(idx))
        for j, p in enumerate(perm):
            new_samples[idx[p]].split = "train" if j < n_train else "val"
    meta = dict(manifest.metadata)
    meta["split"] = {"train_fraction": train_fraction, "seed": seed}
    return Manifest(samples=new_samples, image_size=manifest.image_size, metadata=meta)


def balance_plan(train_counts: dict[ClassLabel, int], target_per_class: int) -> dict[ClassLabel, int]:
    """Per-class generation deficits to reach ``target_per_class``.

    Never plans to remove real data: a target below an existing count is an
    error.
    """
    plan = {}
    for label, count in train_counts.items():
        label = ClassLabel.parse(label)
        if target_per_class < count:
            raise DataError(
                f"target {target_per_class} below existing count {count} for {label.value!r}; "
                "real samples are never deleted"
            )
        plan[label] = target_per_class - count
    return plan


# ---------------------------------------------------------------------------
# Speckle phantom generator: the desk-scale stand-in dataset.


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    speckle_scale: float = 1.0
    lesion_intensity: float = 0.32
    benign_axes: tuple[float, float] = (0.12, 0.24)  # semi-axis range, fraction of size
    malignant_spikes: tuple[int, int] = (5, 9)
    malignant_irregularity: float = 0.45
    normal_bands: tuple[int, int] = (3, 7)
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise DataError(f"image_size must be >= 16, got {self.image_size}")
        if self.speckle_scale <= 0:
            raise DataError("speckle_scale must be positive")
        if not 0.0 <= self.lesion_intensity <= 1.0:
            raise DataError("lesion_intensity must be in [0, 1]")
        for name, rng_pair in (
            ("benign_axes", self.benign_axes),
            ("malignant_spikes", self.malignant_spikes),
            ("normal_bands", self.normal_bands),
        ):
            if rng_pair[1] < rng_pair[0]:
                raise DataError(f"{name} range is empty: {rng_pair}")


_DEPTH_GAIN = 0.15
_FAINT_BAND_AMP = 0.05
_MALIGNANT_EXTRA = 0.22
_MALIGNANT_HETEROGENEITY = 0.18


def _smooth3(a: np.ndarray) -> np.ndarray:
    """Separable [1,2,1]/4 smoothing with reflect borders."""
    p = np.pad(a, 1, mode="reflect")
    a = (p[:-2, 1:-1] + 2.0 * p[1:-1, 1:-1] + p[2:, 1:-1]) / 4.0
    p = np.pad(a, 1, mode="reflect")
    return (p[1:-1, :-2] + 2.0 * p[1:-1, 1:-1] + p[1:-1, 2:]) / 4.0


def _speckle(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    # magnitude of a smoothed complex Gaussian field: spatially correlated
    # speckle whose marginal stays exactly Rayleigh
    g1 = _smooth3(rng.standard_normal((size, size))) / 0.375
    g2 = _smooth3(rng.standard_normal((size, size))) / 0.375
    envelope = np.hypot(g1, g2) / math.sqrt(math.pi / 2.0)  # mean 1
    return 1.0 + scale * (envelope - 1.0)


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    v = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(v, v, indexing="ij")  # (row/depth, column)


def _bands(vv: np.ndarray, amp: float, freq: float, phase: float) -> np.ndarray:
    return 1.0 + amp * np.sin(2.0 * math.pi * freq * vv + phase)


def phantom_fields(label: ClassLabel, config: PhantomConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Phantom image in [-1, 1] plus its ground-truth lesion mask.

    The mask is boolean (all False for the normal class); tests use it as an
    oracle for lesion geometry.
    """
    label = ClassLabel.parse(label)
    rng = np.random.default_rng(seed)
    size = config.image_size
    vv, uu = _coords(size)
    tissue = 1.0 - _DEPTH_GAIN * vv
    mask = np.zeros((size, size), dtype=bool)
    lesion_field = np.ones((size, size), dtype=np.float64)

    if label is ClassLabel.NORMAL:
        freq = float(rng.integers(config.normal_bands[0], config.normal_bands[1] + 1))
        amp = rng.uniform(0.15, 0.28)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        tissue = tissue * _bands(vv, amp, freq, phase)
    else:
        freq = float(rng.integers(2, 5))
        phase = rng.uniform(0.0, 2.0 * math.pi)
        tissue = tissue * _bands(vv, _FAINT_BAND_AMP, freq, phase)
        cy = 0.45 + rng.uniform(-0.08, 0.08)
        cx = 0.50 + rng.uniform(-0.08, 0.08)
        dy = vv - cy
        dx = uu - cx
        if label is ClassLabel.BENIGN:
            a = rng.uniform(*config.benign_axes)
            b = rng.uniform(*config.benign_axes)
            theta = rng.uniform(0.0, math.pi)
            ct, st = math.cos(theta), math.sin(theta)
            r1 = (dx * ct + dy * st) / a
            r2 = (-dx * st + dy * ct) / b
            d = r1 * r1 + r2 * r2
            mask = d <= 1.0
            soft = 1.0 / (1.0 + np.exp(-(1.0 - d) / 0.08))
            lesion_field = 1.0 - (1.0 - config.lesion_intensity) * soft
        else:
            r0 = rng.uniform(0.10, 0.18)
            n_spikes = int(rng.integers(config.malignant_spikes[0], config.malignant_spikes[1] + 1))
            c1 = rng.uniform(0.55, 1.0)
            c2 = rng.uniform(0.2, 0.5)
            p1 = rng.uniform(0.0, 2.0 * math.pi)
            p2 = rng.uniform(0.0, 2.0 * math.pi)
            phi = np.arctan2(dy, dx)
            wobble = c1 * np.cos(n_spikes * phi + p1) + c2 * np.cos((n_spikes + 2) * phi + p2)
            radius = r0 * np.maximum(1.0 + config.malignant_irregularity * wobble / (c1 + c2), 0.3)
            mask = np.hypot(dx, dy) <= radius
            interior = config.lesion_intensity + _MALIGNANT_EXTRA
            texture = _smooth3(rng.standard_normal((size, size))) / 0.375
            lesion_field = np.where(
                mask,
                np.clip(interior + _MALIGNANT_HETEROGENEITY * texture, 0.05, 1.0),
                1.0,
            )

    raw = tissue * lesion_field * _speckle(rng, size, config.speckle_scale)
    image = np.clip(raw, 0.0, 2.0) - 1.0
    return image, mask


def generate_phantom(label: ClassLabel, config: PhantomConfig, seed: int) -> np.ndarray:
    """Deterministic speckle phantom for the given class."""
    return phantom_fields(label, config, seed)[0]


def make_phantom_manifest(
    counts: dict[ClassLabel, int],
    config: PhantomConfig,
    out_dir: str | Path,
) -> Manifest:
    """Generate phantoms to ``out_dir/images`` and return their manifest.

    Per-image seeds derive from ``config.seed`` by class and index, so the
    dataset regenerates identically for a fixed config.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for label in LABELS:
        n = counts.get(label, 0)
        for i in range(n):
            seed = int(config.seed) * 1_000_003 + _label_offset(label) * 100_000 + i
            image = generate_phantom(label, config, seed)
            path = images_dir / f"{label.value}_{i:04d}.png"
            save_image(image, path)
            samples.append(Sample(image_ref=str(path.resolve()), label=label, synthetic=False))
    return Manifest(
        samples=samples,
        image_size=config.image_size,
        metadata={"source": "phantom", "seed": int(config.seed)},
    )


def _label_offset(label: ClassLabel) -> int:
    return LABELS.index(label)
