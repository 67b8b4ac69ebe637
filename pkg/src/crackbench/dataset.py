"""Patch corpus handling: loading, patch extraction, seeded splits, normalization."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, EmptyDatasetError

log = logging.getLogger(__name__)

NEGATIVE = "negative"
POSITIVE = "positive"
LABELS = (NEGATIVE, POSITIVE)
# On-disk class directories, in the casing used by the public corpus.
CLASS_DIRS = {POSITIVE: "Positive", NEGATIVE: "Negative"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
DEFAULT_PATCH_SIZE = 227


@dataclass(frozen=True)
class ImagePatch:
    pixels: np.ndarray
    label: Optional[str] = None
    source_id: Optional[str] = None
    origin: Optional[tuple[int, int]] = None
    path: Optional[str] = None  # relative to the dataset root when loaded from disk

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] != px.shape[1]:
            raise DataError(f"patch must be square HxWx3, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise DataError(f"patch pixels must be uint8, got {px.dtype}")
        if self.label is not None and self.label not in LABELS:
            raise DataError(f"unknown label {self.label!r}")
        px.setflags(write=False)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def target(self) -> int:
        return 1 if self.label == POSITIVE else 0


@dataclass(frozen=True)
class SourceImage:
    pixels: np.ndarray
    identifier: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"source image must be HxWx3 with H, W >= 1, got {px.shape}")

    @classmethod
    def open(cls, path) -> "SourceImage":
        path = Path(path)
        with Image.open(path) as im:
            return cls(np.asarray(im.convert("RGB")), identifier=path.name)


@dataclass(frozen=True)
class PatchDataset:
    patches: tuple[ImagePatch, ...]
    root: str = ""
    loaded_at: float = 0.0
    skipped: int = 0
    patch_size: int = DEFAULT_PATCH_SIZE

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {POSITIVE: 0, NEGATIVE: 0}
        for p in self.patches:
            counts[p.label] += 1
        return counts

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.patches]

    def subset(self, indices: Iterable[int]) -> list[ImagePatch]:
        return [self.patches[i] for i in indices]

    def summary(self) -> str:
        c = self.class_counts
        return f"{len(self)} patches ({c[POSITIVE]}/{c[NEGATIVE]})"


def _list_images(d: Path) -> list[Path]:
    return sorted(
        (p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.relative_to(d).as_posix(),
    )


def _read_rgb(path: Path) -> Optional[np.ndarray]:
    try:
        with Image.open(path) as im:
            return np.asarray(im) if im.mode == "RGB" else None
    except OSError:
        return None


def load_patch_dataset(
    root_dir,
    patch_size: int = DEFAULT_PATCH_SIZE,
    limit_per_class: Optional[int] = None,
    seed: int = 0,
    workers: int = 4,
) -> PatchDataset:
    """Load ``root/Positive`` and ``root/Negative`` into a PatchDataset.

    Files whose decoded shape is not ``patch_size x patch_size x 3`` are
    skipped with a warning rather than resized. ``limit_per_class`` draws a
    seeded subset of files per class before decoding, which keeps balanced
    desk-scale runs cheap on memory. Patches are ordered by relative path.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")
    files: list[tuple[str, Path]] = []
    for label in (NEGATIVE, POSITIVE):
        d = root / CLASS_DIRS[label]
        if not d.is_dir():
            raise ConfigurationError(f"missing class directory: {d}")
        found = _list_images(d)
        if limit_per_class is not None and len(found) > limit_per_class:
            order = shuffled_indices(len(found), seed)
            found = sorted(found[i] for i in order[:limit_per_class])
        files.extend((label, p) for p in found)
    files.sort(key=lambda lp: lp[1].relative_to(root).as_posix())

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        arrays = list(pool.map(lambda lp: _read_rgb(lp[1]), files))

    patches, skipped = [], 0
    for (label, path), px in zip(files, arrays):
        rel = path.relative_to(root).as_posix()
        if px is None or px.shape != (patch_size, patch_size, 3):
            shape = None if px is None else px.shape
            log.warning("skipping %s: expected %dx%dx3, got %s", rel, patch_size, patch_size, shape)
            skipped += 1
            continue
        patches.append(ImagePatch(px, label=label, path=rel))
    if not patches:
        raise EmptyDatasetError(f"no loadable {patch_size}x{patch_size} RGB images under {root}")
    return PatchDataset(tuple(patches), root=str(root), loaded_at=time.time(),
                        skipped=skipped, patch_size=patch_size)


def grid_offsets(height: int, width: int, window: int, stride: int,
                 cover_edges: bool = False) -> list[tuple[int, int]]:
    """Top-left (row, col) offsets of every window fully inside the image.

    With ``cover_edges`` an extra row/column of windows clamped to the
    bottom/right border is added when the strict grid leaves a margin.
    """
    if stride < 1 or window < 1:
        raise ValueError("stride and window must be >= 1")
    if height < window or width < window:
        return []
    rows = list(range(0, height - window + 1, stride))
    cols = list(range(0, width - window + 1, stride))
    if cover_edges:
        if rows[-1] != height - window:
            rows.append(height - window)
        if cols[-1] != width - window:
            cols.append(width - window)
    return [(r, c) for r in rows for c in cols]


def grid_count(height: int, width: int, window: int, stride: int) -> int:
    if height < window or width < window:
        return 0
    return ((height - window) // stride + 1) * ((width - window) // stride + 1)


def extract_patches(image: SourceImage, patch_size: int = DEFAULT_PATCH_SIZE,
                    stride: Optional[int] = None) -> list[ImagePatch]:
    stride = patch_size if stride is None else stride
    h, w = image.pixels.shape[:2]
    px = np.ascontiguousarray(image.pixels, dtype=np.uint8)
    return [
        ImagePatch(px[r:r + patch_size, c:c + patch_size].copy(),
                   source_id=image.identifier, origin=(r, c))
        for r, c in grid_offsets(h, w, patch_size, stride)
    ]


def save_patches(patches: Sequence[ImagePatch], out_dir, label: str) -> list[Path]:
    """Write patches as PNG under ``out_dir/<ClassDir>/``; names encode source and origin."""
    d = Path(out_dir) / CLASS_DIRS[label]
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for p in patches:
        stem = Path(p.source_id or "patch").stem
        r, c = p.origin or (0, 0)
        path = d / f"{stem}_r{r:05d}_c{c:05d}.png"
        Image.fromarray(p.pixels).save(path)
        written.append(path)
    return written


# -- deterministic shuffling ------------------------------------------------
#
# Splits use SplitMix64 feeding a descending Fisher-Yates shuffle:
#   for i = n-1 .. 1:  j = next_u64() mod (i + 1); swap(a[i], a[j])
# The generator is part of the split contract so other tools can reproduce
# membership from (ordering, seed) alone.

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)


def shuffled_indices(n: int, seed: int) -> list[int]:
    rng = SplitMix64(seed)
    a = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        a[i], a[j] = a[j], a[i]
    return a


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction_of_train: float = 0.1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if not 0.0 <= self.val_fraction_of_train < 1.0:
            raise ValueError(f"val_fraction_of_train must be in [0, 1), got {self.val_fraction_of_train}")

    @property
    def test_fraction(self) -> float:
        return 1.0 - self.train_fraction


@dataclass(frozen=True)
class SplitResult:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    spec: SplitSpec = field(default_factory=SplitSpec)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _carve(indices: list[int], spec: SplitSpec) -> tuple[list[int], list[int], list[int]]:
    n = len(indices)
    n_trainval = _round_half_up(spec.train_fraction * n)
    n_val = _round_half_up(spec.val_fraction_of_train * n_trainval)
    trainval, test = indices[:n_trainval], indices[n_trainval:]
    return trainval[n_val:], trainval[:n_val], test


def split(dataset, spec: SplitSpec) -> SplitResult:
    """Partition dataset indices into train/val/test.

    ``dataset`` may be a PatchDataset or a plain sequence of labels. Each
    class (or the whole set when unstratified) is shuffled with
    ``shuffled_indices(n, seed)`` and cut at round-half-up boundaries.
    Index lists come back sorted.
    """
    labels = dataset.labels if isinstance(dataset, PatchDataset) else list(dataset)
    if not labels:
        raise EmptyDatasetError("cannot split an empty dataset")
    stratified = spec.stratified
    if stratified and len(set(labels)) < 2:
        log.warning("single-class dataset; splitting unstratified")
        stratified = False

    train, val, test = [], [], []
    if stratified:
        groups = [[i for i, lab in enumerate(labels) if lab == c] for c in sorted(set(labels))]
    else:
        groups = [list(range(len(labels)))]
    for members in groups:
        order = shuffled_indices(len(members), spec.seed)
        tr, va, te = _carve([members[k] for k in order], spec)
        train += tr
        val += va
        test += te
    if not train:
        raise DataError("split leaves the training set empty")
    return SplitResult(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)), spec)


def manifest_dict(dataset: PatchDataset, result: SplitResult) -> dict:
    s = result.spec
    paths = [p.path for p in dataset.patches]
    return {
        "seed": s.seed,
        "fractions": {
            "train": s.train_fraction,
            "val_of_train": s.val_fraction_of_train,
            "test": round(s.test_fraction, 12),
        },
        "stratified": s.stratified,
        "patch_size": dataset.patch_size,
        "train": [paths[i] for i in result.train],
        "val": [paths[i] for i in result.val],
        "test": [paths[i] for i in result.test],
    }


def write_split_manifest(dataset: PatchDataset, result: SplitResult, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest_dict(dataset, result), indent=2, sort_keys=True) + "\n")
    return out


def read_split_manifest(path, dataset: PatchDataset) -> SplitResult:
    """Resolve a manifest's relative paths back to indices of ``dataset``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read split manifest {path}: {e}") from e
    where = {p.path: i for i, p in enumerate(dataset.patches)}
    parts = {}
    for name in ("train", "val", "test"):
        missing = [rel for rel in doc[name] if rel not in where]
        if missing:
            raise DataError(f"{path}: {len(missing)} {name} entries not in dataset, e.g. {missing[0]}")
        parts[name] = tuple(sorted(where[rel] for rel in doc[name]))
    fr = doc["fractions"]
    spec = SplitSpec(fr["train"], fr["val_of_train"], doc["seed"], doc.get("stratified", True))
    return SplitResult(parts["train"], parts["val"], parts["test"], spec)


def normalize(patch, scheme: str = "unit_range") -> np.ndarray:
    """Map 8-bit pixels to floats.

    ``unit_range`` divides by 255. Any other value is taken as a backbone
    name and that backbone's registered preprocessing is applied (value
    scaling only; resizing happens at the model boundary).
    """
    px = patch.pixels if isinstance(patch, ImagePatch) else np.asarray(patch)
    x = px.astype(np.float64) / 255.0
    if scheme == "unit_range":
        return x
    from .model import get_backbone, PREPROCESSING

    mean, std = PREPROCESSING[get_backbone(scheme).preprocessing_id]
    return (x - np.asarray(mean)) / np.asarray(std)
