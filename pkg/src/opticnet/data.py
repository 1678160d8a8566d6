"""Image-tree ingestion, synthetic band datasets, and stratified splitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, h, w, 3), float32 in [0, 1]
    labels: np.ndarray          # (N,), int64
    class_names: list[str]
    split: str = "train"
    skipped: int = 0
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class list")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names),
                       split or self.split, 0, paths)

    def check_nonempty_classes(self):
        counts = self.class_counts()
        empty = [self.class_names[i] for i, c in enumerate(counts) if c == 0]
        if len(self) == 0 or empty:
            raise DatasetError(f"dataset has empty classes: {empty or self.class_names}")


def decode_image(path, target_h: int, target_w: int) -> np.ndarray:
    """Decode to float32 (h, w, 3) in [0, 1]; grayscale is replicated to three channels."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if im.mode.startswith("I;16") or arr.max() > 255 else 255.0
            chans = [arr / peak]
        elif im.mode == "F":
            chans = [np.clip(np.asarray(im, dtype=np.float64), 0, 1)]
        else:
            rgb = im.convert("L") if im.mode in ("L", "LA", "1") else im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
            chans = [arr] if arr.ndim == 2 else [arr[..., i] for i in range(3)]
    out = []
    for ch in chans:
        if ch.shape != (target_h, target_w):
            ch = np.asarray(Image.fromarray(ch.astype(np.float32), mode="F")
                            .resize((target_w, target_h), Image.BILINEAR), dtype=np.float64)
        out.append(np.clip(ch, 0.0, 1.0))
    if len(out) == 1:
        out = out * 3
    return np.stack(out, axis=-1).astype(np.float32)


def load_image_tree(root, target_h: int = 224, target_w: int | None = None, split: str = "train") -> Dataset:
    """Load ``root/<CLASS>/<images>``; classes are sorted by directory name."""
    target_w = target_w or target_h
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise DatasetError(f"{root} must contain at least two class directories")
    images, labels, paths = [], [], []
    skipped = 0
    for idx, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        loaded = 0
        for f in files:
            try:
                images.append(decode_image(f, target_h, target_w))
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                log.warning("skipping undecodable file %s (%s)", f, exc)
                skipped += 1
                continue
            labels.append(idx)
            paths.append(str(f))
            loaded += 1
        if loaded == 0:
            raise DatasetError(f"class directory {d} has no decodable images")
    return Dataset(np.stack(images), np.array(labels), [d.name for d in class_dirs], split, skipped, paths)


def save_image_tree(ds: Dataset, root, split: str | None = None) -> list[Path]:
    """Write 8-bit PNGs as ``root/<split>/<class>/<index>.png``."""
    base = Path(root) / (split or ds.split)
    written = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        d = base / ds.class_names[lab]
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{i:05d}.png"
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(p)
        written.append(p)
    return written


def make_synthetic(classes: int = 4, per_class: int = 16, h: int = 64, w: int | None = None,
                   seed: int = 0, noise: float = 0.15) -> Dataset:
    """Oriented sinusoidal bands, one orientation per class, plus seeded noise.

    Phase jitter is bounded so class means stay distinct; a nearest-centroid
    classifier on raw pixels beats chance.
    """
    if classes < 2 or per_class < 1:
        raise DatasetError("need classes >= 2 and per_class >= 1")
    w = w or h
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    images = np.empty((classes * per_class, h, w, 3), dtype=np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    for i, k in enumerate(labels):
        theta = np.pi * k / classes + rng.uniform(-0.08, 0.08)
        freq = 4.0 + rng.uniform(-0.5, 0.5)
        phase = rng.uniform(-np.pi / 4, np.pi / 4)
        amp = rng.uniform(0.3, 0.45)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        img = 0.5 + amp * np.sin(2 * np.pi * freq * proj + phase) + noise * rng.standard_normal((h, w))
        images[i] = np.clip(img, 0.0, 1.0)[..., None]
    return Dataset(images, labels, [f"class_{k}" for k in range(classes)], "train")


def split(ds: Dataset, fractions=(0.8, 0.2), seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified two-way split; the first part gets round(frac * class size) per class."""
    fractions = tuple(fractions)
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"fractions must be two non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        idx = rng.permutation(idx)
        cut = int(round(fractions[0] * len(idx)))
        if cut == 0 and fractions[0] > 0:
            raise DatasetError(f"class {ds.class_names[c]!r} would be empty in the first split")
        first.extend(idx[:cut])
        second.extend(idx[cut:])
    return ds.subset(np.sort(first)), ds.subset(np.sort(second), split="test")


def kfold_split(n_samples: int, k: int = 10, seed: int = 0) -> list[np.ndarray]:
    """Partition ``range(n_samples)`` into ``k`` shuffled folds whose sizes differ by at most one."""
    if k < 2 or k > n_samples:
        raise ValueError(f"need 2 <= k <= n_samples, got k={k}, n={n_samples}")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return [np.sort(f) for f in np.array_split(perm, k)]


def fold_datasets(ds: Dataset, folds: list[np.ndarray], i: int) -> tuple[Dataset, Dataset]:
    val = folds[i]
    train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
    return ds.subset(train), ds.subset(val, split="val")
