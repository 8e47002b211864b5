"""Dataset manifests, class accounting and the synthetic lesion generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imaging

CLASSES = ("melanoma", "nevus", "seborrheic_keratosis")
SPLITS = ("train", "val", "test")
FIELDS = ("image", "mask", "label", "split")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    image: str
    mask: Optional[str] = None
    label: Optional[str] = None
    split: str = "train"

    @property
    def label_index(self) -> Optional[int]:
        return None if self.label is None else CLASSES.index(self.label)


@dataclass
class Manifest:
    records: list[DatasetRecord]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> dict[str, int]:
        return {s: sum(r.split == s for r in self.records) for s in SPLITS}

    def class_counts(self, split: Optional[str] = "train") -> dict[str, int]:
        recs = self.records if split is None else self.split(split)
        return {c: sum(r.label == c for r in recs) for c in CLASSES}

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_image(self, rec: DatasetRecord) -> np.ndarray:
        return imaging.read_image(self.resolve(rec.image))

    def load_mask(self, rec: DatasetRecord) -> np.ndarray:
        if rec.mask is None:
            raise ManifestError(f"record {rec.image} has no mask")
        return imaging.read_mask(self.resolve(rec.mask))


def _parse_record(obj, lineno: int) -> DatasetRecord:
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected an object")
    unknown = set(obj) - set(FIELDS)
    if unknown:
        raise ManifestError(f"line {lineno}: unknown fields {sorted(unknown)}")
    image, split = obj.get("image"), obj.get("split")
    mask, label = obj.get("mask"), obj.get("label")
    if not isinstance(image, str) or not image:
        raise ManifestError(f"line {lineno}: 'image' must be a non-empty string")
    if split not in SPLITS:
        raise ManifestError(f"line {lineno}: unknown split {split!r}")
    if mask is not None and not isinstance(mask, str):
        raise ManifestError(f"line {lineno}: 'mask' must be a string or null")
    if label is not None and label not in CLASSES:
        raise ManifestError(f"line {lineno}: unknown label {label!r}")
    return DatasetRecord(image=image, mask=mask, label=label, split=split)


def parse_manifest(text: str, root: Path = Path()) -> Manifest:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: {exc.msg}") from None
        records.append(_parse_record(obj, lineno))
    return Manifest(records, Path(root))


def load_manifest(path) -> Manifest:
    """Read a line-delimited manifest. Image files are not checked here."""
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def dump_manifest(manifest: Manifest) -> str:
    lines = [json.dumps({k: getattr(r, k) for k in FIELDS}) for r in manifest.records]
    return "".join(line + "\n" for line in lines)


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(dump_manifest(manifest), encoding="utf-8")


def class_weights(manifest: Manifest) -> np.ndarray:
    """Inverse-frequency weights T / (3 n_k) over the labelled train split."""
    counts = manifest.class_counts("train")
    return weights_from_counts([counts[c] for c in CLASSES])


def weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        missing = [CLASSES[i] for i in np.flatnonzero(counts <= 0)]
        raise ManifestError(f"no labelled train records for {missing}")
    return counts.sum() / (len(counts) * counts)


# ---------------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    counts: tuple[int, int, int] = (200, 40, 0)  # train, val, test
    size: int = 150
    mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)


@dataclass(frozen=True)
class LesionShape:
    """Geometry of one synthetic lesion, in pixel coordinates."""
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float
    harmonics: tuple[tuple[int, float, float], ...] = ()  # (order, amplitude, phase)

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dy, dx = yy + 0.5 - self.cy, xx + 0.5 - self.cx
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        rho = np.hypot(u, v)
        limit = np.ones_like(rho)
        if self.harmonics:
            phi = np.arctan2(v, u)
            for k, amp, phase in self.harmonics:
                limit += amp * np.cos(k * phi + phase)
        return rho <= limit


def _split_class_counts(n: int, mix: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n images over the class mix."""
    mix = np.asarray(mix, dtype=np.float64)
    mix = mix / mix.sum()
    raw = n * mix
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([222, 178, 150], dtype=np.float64) + rng.uniform(-12, 12, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    shade = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, 2)
        shade += rng.uniform(3, 8) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return base[None, None, :] + shade[..., None]


def _lesion_shape(rng: np.random.Generator, size: int, label: int) -> LesionShape:
    area = rng.uniform(0.08, 0.28) * size * size
    ratio = rng.uniform(0.65, 1.0)
    a = math.sqrt(area / (math.pi * ratio))
    b = a * ratio
    harmonics: tuple = ()
    if label == 0:
        harmonics = tuple((int(k), float(rng.uniform(0.04, 0.08)), float(rng.uniform(0, 2 * math.pi)))
                          for k in rng.choice(np.arange(3, 8), size=2, replace=False))
    reach = a * (1 + sum(h[1] for h in harmonics)) + 2
    cy = rng.uniform(reach, size - reach)
    cx = rng.uniform(reach, size - reach)
    return LesionShape(cy, cx, a, b, float(rng.uniform(0, math.pi)), harmonics)


_LESION_COLOURS = {
    0: (58, 36, 34),     # dark, irregular border
    1: (136, 84, 52),    # smooth round brown
    2: (196, 156, 72),   # light ochre with speckle
}


def render_synthetic(rng: np.random.Generator, size: int, label: int) -> tuple[np.ndarray, np.ndarray, LesionShape]:
    """One (image, mask, shape) triple for the given class index."""
    img = _background(rng, size)
    shape = _lesion_shape(rng, size, label)
    mask = shape.mask(size)
    colour = np.array(_LESION_COLOURS[label], dtype=np.float64) + rng.uniform(-10, 10, 3)
    lesion = np.broadcast_to(colour, img.shape).copy()
    if label == 2:
        speckle = rng.random((size, size)) < 0.12
        lesion[speckle] *= rng.choice([0.55, 1.25], size=(int(speckle.sum()), 1))
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        r = np.hypot(yy + 0.5 - shape.cy, xx + 0.5 - shape.cx) / max(shape.a, 1.0)
        lesion *= (0.9 + 0.1 * np.clip(r, 0, 1))[..., None]
    img[mask] = lesion[mask]
    img += rng.normal(0, 3, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, shape


def synthetic_plan(spec: SynthSpec) -> list[tuple[str, int, int]]:
    """(split, index-within-split, class index) for every image, in file order."""
    plan = []
    for s, (split, n) in enumerate(zip(SPLITS, spec.counts)):
        labels = np.repeat(np.arange(3), _split_class_counts(n, spec.mix))
        order = np.random.default_rng([spec.seed, 1000 + s]).permutation(labels)
        plan += [(split, i, int(lab)) for i, lab in enumerate(order)]
    return plan


def gen_synthetic(spec: SynthSpec, out_dir) -> tuple[Manifest, list[LesionShape]]:
    """Write images, masks and ``manifest.jsonl`` under ``out_dir``.

    Each image draws from its own RNG stream keyed by (seed, split, index),
    so the corpus is a pure function of ``spec``.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records, shapes = [], []
    for split, idx, label in synthetic_plan(spec):
        rng = np.random.default_rng([spec.seed, SPLITS.index(split), idx])
        img, mask, shape = render_synthetic(rng, spec.size, label)
        stem = f"{split}_{idx:04d}"
        img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}_mask.png"
        (out / img_rel).write_bytes(imaging.encode_png(img))
        (out / mask_rel).write_bytes(imaging.encode_mask_png(mask))
        records.append(DatasetRecord(img_rel, mask_rel, CLASSES[label], split))
        shapes.append(shape)
    manifest = Manifest(records, out)
    save_manifest(manifest, out / "manifest.jsonl")
    return manifest, shapes


def require_masks(records: Sequence[DatasetRecord]) -> None:
    missing = [r.image for r in records if r.mask is None]
    if missing:
        raise ManifestError(f"{len(missing)} record(s) lack masks, e.g. {missing[0]}")

