"""Dataset ingestion: image folders, a synthetic two-class generator,
and a deterministic stratified train/test split.

The synthetic generator draws class 0 as soft blobs and class 1 as
oriented stripes on a noisy background.  The contrast is tuned so a
small conv net separates the classes comfortably while staying
vulnerable to gradient attacks at moderate epsilon.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: list[str]
    source: str = ""

    def __post_init__(self):
        for c in (0, 1):
            if not np.any(self.train_labels == c):
                raise ValueError(f"training split lacks class {c}")


def load_image_folder(root):
    """Read `<root>/<class>/<image>.png` into float64 arrays in [0, 1].

    Returns (images, labels, class_names).  Every unreadable or
    mis-shaped file is collected and reported in one error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) != 2:
        raise ValueError(
            f"expected exactly 2 class folders under {root}, found "
            f"{[p.name for p in class_dirs]}"
        )

    images, labels, bad = [], [], []
    shape = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.png"))
        if not files:
            bad.append(f"{cdir}: no .png files")
        for path in files:
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"),
                                     dtype=np.float64) / 255.0
            except OSError as exc:
                bad.append(f"{path}: {exc}")
                continue
            if shape is None:
                shape = arr.shape
            if arr.shape != shape:
                bad.append(f"{path}: shape {arr.shape} != {shape}")
                continue
            images.append(arr)
            labels.append(label)
    if bad:
        raise ValueError("unreadable or inconsistent images:\n  "
                         + "\n  ".join(bad))
    return (np.stack(images), np.array(labels, dtype=np.int64),
            [p.name for p in class_dirs])


def synthetic_images(count, seed=0, size=32, noise=0.12, amplitude=0.35):
    """Two-class toy images: class 0 soft blobs, class 1 oriented stripes.

    Deterministic under seed; labels alternate so any prefix is roughly
    balanced.
    """
    if count < 2:
        raise ValueError("need at least two images (one per class)")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((count, size, size, 3))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % 2
        base = 0.5 + noise * rng.normal(size=(size, size, 3))
        if label == 0:
            pattern = np.zeros((size, size))
            for _ in range(rng.integers(2, 5)):
                cx, cy = rng.uniform(4, size - 4, size=2)
                sig = rng.uniform(2.5, 5.0)
                pattern += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2)
                                  / (2.0 * sig * sig))
            pattern = pattern / max(pattern.max(), 1e-9)
        else:
            theta = rng.uniform(0, math.pi)
            freq = rng.uniform(0.5, 0.9)
            phase = rng.uniform(0, 2 * math.pi)
            wave = np.sin(freq * (xx * math.cos(theta)
                                  + yy * math.sin(theta)) + phase)
            pattern = 0.5 * (wave + 1.0)
        tint = rng.uniform(0.8, 1.2, size=3)
        img = base + amplitude * pattern[:, :, None] * tint[None, None, :]
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return images, labels


def split(images, labels, ratio=0.8, seed=0, source="") -> Dataset:
    """Deterministic stratified split; each class sends floor(n*ratio)
    images to the training side."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(len(idx) * ratio)
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    train_idx = np.array(sorted(train_idx))
    test_idx = np.array(sorted(test_idx))
    return Dataset(images[train_idx], labels[train_idx],
                   images[test_idx], labels[test_idx],
                   class_names=["class0", "class1"], source=source)


def ingest(spec, split_ratio=0.8, split_seed=0) -> Dataset:
    """Build a Dataset from a source description.

    spec is either {"kind": "synthetic", "count": ..., "seed": ...,
    optional size/noise/amplitude} or {"kind": "folder", "path": ...};
    a plain string is shorthand for a folder path.
    """
    if isinstance(spec, (str, Path)):
        spec = {"kind": "folder", "path": str(spec)}
    kind = spec.get("kind")
    if kind == "synthetic":
        images, labels = synthetic_images(
            spec.get("count", 2000), seed=spec.get("seed", 0),
            size=spec.get("size", 32), noise=spec.get("noise", 0.12),
            amplitude=spec.get("amplitude", 0.35))
        source = f"synthetic(count={spec.get('count', 2000)}," \
                 f"seed={spec.get('seed', 0)})"
        ds = split(images, labels, split_ratio, split_seed, source=source)
        ds.class_names = ["blobs", "stripes"]
        return ds
    if kind == "folder":
        images, labels, names = load_image_folder(spec["path"])
        ds = split(images, labels, split_ratio, split_seed,
                   source=str(spec["path"]))
        ds.class_names = names
        return ds
    raise ValueError(f"unknown dataset kind {kind!r}")
