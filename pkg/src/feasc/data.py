"""Dataset ingestion: labeled image folders, stratified subsets, synthetic data.

A manifest is the unit of dataset identity: class names in alphabetical order
with contiguous indices, per-file entries with train/test split assignment,
an errors section for undecodable files, and a content checksum over the
relative paths (so rebuilding the same tree yields a byte-identical manifest).

Two layouts are ingested:

* ``root/train/<class>/*`` and ``root/test/<class>/*`` -- splits as given.
* ``root/<class>/*`` -- a deterministic stride split (every 5th file of the
  alphabetical per-class listing goes to test).

The synthetic generator produces the "stacked ingredients" regime this
library targets: each image scatters many small textured blobs whose texture
statistics (hue plus grating frequency/orientation) determine the class, so
any reasonable crop carries class-relevant content.
"""

from __future__ import annotations

import hashlib
import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IngestionError, ValidationError

__all__ = [
    "ManifestEntry",
    "DatasetManifest",
    "SubsetSpec",
    "build_manifest",
    "stratified_subset",
    "generate_synthetic",
    "single_blob_image",
    "ImageStore",
]

MANIFEST_SCHEMA = "feasc.manifest.v1"
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
_TEST_STRIDE = 5  # flat layout: every 5th file per class is held out


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest root
    label: int
    split: str  # "train" | "test"


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    entries: list[ManifestEntry]
    errors: list[str] = field(default_factory=list)
    checksum: str = ""

    def __post_init__(self) -> None:
        if not self.checksum:
            self.checksum = _checksum(self.classes, self.entries)

    def train_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "train"]

    def test_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "test"]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def save(self, path: Path | str) -> None:
        payload = {
            "schema": MANIFEST_SCHEMA,
            "root": str(self.root),
            "classes": self.classes,
            "entries": [vars(e) for e in self.entries],
            "errors": self.errors,
            "checksum": self.checksum,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        if payload.get("schema") != MANIFEST_SCHEMA:
            raise IngestionError(f"{path} is not a {MANIFEST_SCHEMA} manifest")
        return cls(
            root=Path(payload["root"]),
            classes=list(payload["classes"]),
            entries=[ManifestEntry(**e) for e in payload["entries"]],
            errors=list(payload["errors"]),
            checksum=payload["checksum"],
        )


def _checksum(classes: list[str], entries: list[ManifestEntry]) -> str:
    canonical = json.dumps(
        {"classes": classes, "entries": [vars(e) for e in entries]},
        sort_keys=True,
    )
    return hashlib.sha256(canonical.encode()).hexdigest()


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except Exception:
        return False


def _scan_class_dir(class_dir: Path) -> list[str]:
    return sorted(
        p.name for p in class_dir.iterdir()
        if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
    )


def build_manifest(root: Path | str) -> DatasetManifest:
    """Scan a directory-per-class tree into a deterministic manifest."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")

    split_dirs = [d for d in ("train", "test") if (root / d).is_dir()]
    if split_dirs:
        class_names = sorted(
            {d.name for split in split_dirs for d in (root / split).iterdir() if d.is_dir()}
        )
    else:
        class_names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not class_names:
        raise ValidationError(f"no classes found under {root}")

    entries: list[ManifestEntry] = []
    errors: list[str] = []
    kept_classes: list[str] = []
    for name in class_names:
        class_entries: list[ManifestEntry] = []
        label = len(kept_classes)  # contiguous over kept classes only
        if split_dirs:
            for split in split_dirs:
                class_dir = root / split / name
                if not class_dir.is_dir():
                    continue
                for fname in _scan_class_dir(class_dir):
                    rel = f"{split}/{name}/{fname}"
                    if _decodable(root / rel):
                        class_entries.append(ManifestEntry(rel, label, split))
                    else:
                        errors.append(rel)
        else:
            files = _scan_class_dir(root / name)
            for i, fname in enumerate(files):
                rel = f"{name}/{fname}"
                split = "test" if i % _TEST_STRIDE == _TEST_STRIDE - 1 else "train"
                if _decodable(root / rel):
                    class_entries.append(ManifestEntry(rel, label, split))
                else:
                    errors.append(rel)
        if class_entries:
            kept_classes.append(name)
            entries.extend(class_entries)
        else:
            warnings.warn(f"class directory {name!r} is empty; excluded from manifest")
    if not kept_classes:
        raise ValidationError(f"no classes found under {root} (all class directories empty)")
    return DatasetManifest(root=root, classes=kept_classes, entries=entries, errors=errors)


@dataclass(frozen=True)
class SubsetSpec:
    fraction: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError(f"fraction must be in (0, 1], got {self.fraction}")


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_subset(manifest: DatasetManifest, spec: SubsetSpec) -> DatasetManifest:
    """Per-class stratified subset of the *train* split; test entries kept whole.

    Each class gets ``max(1, round(fraction * class_count))`` entries drawn as
    a prefix of one seed-determined per-class permutation, so for a fixed seed
    the 10% subset is contained in the 20% subset, and so on.
    """
    if spec.fraction == 1.0:
        return manifest
    kept: list[ManifestEntry] = []
    for label in range(manifest.num_classes):
        class_train = [e for e in manifest.train_entries() if e.label == label]
        take = max(1, _round_half_away(spec.fraction * len(class_train)))
        order = list(range(len(class_train)))
        random.Random((spec.seed, label)).shuffle(order)
        chosen = {order[i] for i in range(take)}
        kept.extend(e for i, e in enumerate(class_train) if i in chosen)
    kept.extend(manifest.test_entries())
    return DatasetManifest(
        root=manifest.root, classes=list(manifest.classes), entries=kept,
        errors=list(manifest.errors),
    )


# --- Synthetic "stacked ingredients" generator -----------------------------

def _class_signature(class_index: int, n_classes: int) -> tuple[np.ndarray, float, float]:
    """Hue, grating frequency (cycles/px), and orientation for one class."""
    hue = class_index / n_classes
    # crude HSV->RGB with s=0.75, v=0.95
    i = int(hue * 6.0) % 6
    f = hue * 6.0 - int(hue * 6.0)
    v, s = 0.95, 0.75
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    freq = 0.12 + 0.12 * class_index
    angle = np.pi * class_index / max(1, n_classes)
    return np.asarray(rgb), freq, angle


def _render_blob_image(rng: np.random.Generator, resolution: int,
                       color: np.ndarray, freq: float, angle: float) -> np.ndarray:
    canvas = np.full((resolution, resolution, 3), 0.5, dtype=np.float64)
    canvas += rng.normal(0.0, 0.02, size=canvas.shape)
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    n_blobs = max(10, (resolution * resolution) // 96)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, resolution, size=2)
        radius = rng.uniform(resolution / 16, resolution / 8)
        phase = rng.uniform(0, 2 * np.pi)
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
        grating = 0.5 + 0.45 * np.sin(
            2 * np.pi * freq * (xs * np.cos(angle) + ys * np.sin(angle)) + phase
        )
        shade = 0.55 + 0.45 * grating[inside]
        canvas[inside] = color * shade[:, None]
    return (np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)


def generate_synthetic(
    out_root: Path | str,
    n_classes: int = 4,
    n_per_class: int = 250,
    resolution: int = 64,
    seed: int = 0,
) -> DatasetManifest:
    """Write a synthetic blob-texture dataset tree and return its manifest.

    Deterministic given the seed: identical image bytes on regeneration. An
    80/20 train/test split is written as ``train/`` and ``test/`` subtrees and
    the manifest is saved to ``out_root/manifest.json``.
    """
    if n_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {n_classes}")
    out_root = Path(out_root)
    n_test = max(1, n_per_class // 5)
    for class_index in range(n_classes):
        name = f"class_{class_index:02d}"
        color, freq, angle = _class_signature(class_index, n_classes)
        for image_index in range(n_per_class):
            rng = np.random.default_rng((seed, class_index, image_index))
            pixels = _render_blob_image(rng, resolution, color, freq, angle)
            split = "test" if image_index < n_test else "train"
            target = out_root / split / name
            target.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(target / f"img_{image_index:04d}.png")
    manifest = build_manifest(out_root)
    manifest.save(out_root / "manifest.json")
    return manifest


def single_blob_image(resolution: int = 64, seed: int = 0) -> tuple[Image.Image, tuple[int, int, int, int]]:
    """One high-texture checkerboard blob on a flat background, with its bbox.

    Used to ground-truth response-map localization: the only structured
    content sits inside the returned (left, top, right, bottom) box.
    """
    rng = np.random.default_rng(seed)
    canvas = np.full((resolution, resolution, 3), 0.42, dtype=np.float64)
    side = resolution // 3
    left = int(rng.integers(resolution // 8, resolution - side - resolution // 8))
    top = int(rng.integers(resolution // 8, resolution - side - resolution // 8))
    ys, xs = np.mgrid[0:side, 0:side]
    checker = ((xs // 2 + ys // 2) % 2).astype(np.float64)
    patch = np.stack([checker, 1.0 - checker, checker], axis=-1)
    canvas[top : top + side, left : left + side] = patch
    image = Image.fromarray((np.clip(canvas, 0, 1) * 255).astype(np.uint8))
    return image, (left, top, left + side, top + side)


class ImageStore:
    """Decodes manifest images once and caches them as RGB PIL images."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, Image.Image] = {}

    def get(self, entry: ManifestEntry) -> Image.Image:
        image = self._cache.get(entry.path)
        if image is None:
            path = self.manifest.resolve(entry)
            try:
                with Image.open(path) as raw:
                    image = raw.convert("RGB")
            except Exception as exc:
                raise IngestionError(f"cannot decode image {path}") from exc
            self._cache[entry.path] = image
        return image
