"""CIFAR binary-batch loading, CIFAR-style augmentation and synthetic datasets."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy import ndimage

CIFAR_FILES = {
    "cifar10": (["data_batch_%d.bin" % i for i in range(1, 6)], ["test_batch.bin"], 1, 10,
                "cifar-10-batches-bin"),
    "cifar100": (["train.bin"], ["test.bin"], 2, 100, "cifar-100-binary"),
}
IMAGE_BYTES = 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else order
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            yield idx, self.images[idx], self.labels[idx]


def data_dir(default: Optional[str] = None) -> Optional[Path]:
    root = os.environ.get("R2B_DATA_DIR", default)
    return Path(root) if root else None


def read_cifar_file(path, label_bytes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into uint8 images [n,3,32,32] and fine labels."""
    raw = np.fromfile(path, dtype=np.uint8)
    rec = label_bytes + IMAGE_BYTES
    if raw.size % rec:
        offset = (raw.size // rec) * rec
        raise DatasetFormatError(f"{path}: size {raw.size} is not a multiple of {rec}-byte records "
                                 f"(partial record at byte offset {offset})")
    recs = raw.reshape(-1, rec)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def _find_dir(root: Path, sub: str, names) -> Path:
    for cand in (root, root / sub):
        if all((cand / n).exists() for n in names):
            return cand
    raise FileNotFoundError(f"CIFAR files {names} not found under {root} (or {root / sub})")


def load_cifar(root, variant: str = "cifar10") -> Tuple[Dataset, Dataset]:
    """Load train/test splits, scaled to [0,1] and standardized with train statistics."""
    if variant not in CIFAR_FILES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    train_files, test_files, label_bytes, classes, sub = CIFAR_FILES[variant]
    root = _find_dir(Path(root), sub, train_files + test_files)

    def read(files):
        parts = [read_cifar_file(root / f, label_bytes) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    xtr, ytr = read(train_files)
    xte, yte = read(test_files)
    xtr = xtr.astype(np.float32) / 255.0
    xte = xte.astype(np.float32) / 255.0
    mean = xtr.mean(axis=(0, 2, 3)).astype(np.float32)
    std = xtr.std(axis=(0, 2, 3)).astype(np.float32)
    norm = lambda x: ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    return (Dataset(norm(xtr), ytr, classes, "train", mean, std),
            Dataset(norm(xte), yte, classes, "test", mean, std))


def augment(x: np.ndarray, rng: np.random.Generator, policy: str = "cifar-train", *,
            flip: Optional[bool] = None, angle: Optional[float] = None,
            crop: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Augment one [C,H,W] image.

    ``cifar-train``: reflect-pad by 4 and take a random crop of the original
    size, horizontal flip with p=0.5, rotation uniform in [-15, 15] degrees
    (bilinear, zero fill). ``eval`` returns the input unchanged. The keyword
    overrides pin individual random choices.
    """
    if policy == "eval":
        return x
    if policy != "cifar-train":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    c, h, w = x.shape
    if crop is None:
        crop = (int(rng.integers(0, 9)), int(rng.integers(0, 9)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if angle is None:
        angle = float(rng.uniform(-15.0, 15.0))
    padded = np.pad(x, ((0, 0), (4, 4), (4, 4)), mode="reflect")
    out = padded[:, crop[0]:crop[0] + h, crop[1]:crop[1] + w]
    if flip:
        out = out[:, :, ::-1]
    if angle:
        out = ndimage.rotate(out, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    return np.ascontiguousarray(out, dtype=x.dtype)


def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def augment_batch(images: np.ndarray, indices: np.ndarray, seed: int, epoch: int, policy: str) -> np.ndarray:
    """Augment a batch with one independent RNG stream per (seed, epoch, sample)."""
    if policy == "eval":
        return images
    return np.stack([augment(img, np.random.default_rng([seed, epoch, int(i)]), policy)
                     for img, i in zip(images, indices)])


def synthetic_dataset(seed: int, classes: int = 4, n: int = 2000, image_shape=(3, 16, 16),
                      noise: float = 1.0, smooth: float = 1.5, split: str = "train") -> Dataset:
    """Class-template images plus Gaussian noise, deterministic in ``seed``.

    Each class template is a spatially smoothed Gaussian field rescaled to
    unit variance; a sample is its class template plus ``noise`` times white
    Gaussian noise. Labels are balanced.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((classes,) + tuple(image_shape))
    if smooth > 0:
        templates = ndimage.gaussian_filter(templates, sigma=(0, 0, smooth, smooth))
    templates /= templates.std(axis=(1, 2, 3), keepdims=True)
    labels = rng.permutation(np.arange(n) % classes)
    images = templates[labels] + noise * rng.standard_normal((n,) + tuple(image_shape))
    ds = Dataset(images.astype(np.float32), labels, classes, split)
    ds.templates = templates.astype(np.float32)
    return ds


def split_synthetic(seed: int, classes: int = 4, n_train: int = 2000, n_test: int = 500, **kw) -> Tuple[Dataset, Dataset]:
    """Train/test draws sharing the same class templates."""
    full = synthetic_dataset(seed, classes, n_train + n_test, **kw)
    tr = Dataset(full.images[:n_train], full.labels[:n_train], classes, "train")
    te = Dataset(full.images[n_train:], full.labels[n_train:], classes, "test")
    tr.templates = te.templates = full.templates
    return tr, te


def save_dataset(ds: Dataset, path) -> None:
    from collections import OrderedDict

    from r2b import checkpoint

    entries = OrderedDict(images=ds.images, labels=ds.labels.astype(np.float32),
                          mean=ds.mean, std=ds.std,
                          class_count=np.array([ds.class_count], dtype=np.float32))
    checkpoint.save(path, checkpoint.Checkpoint(entries, f"dataset:{ds.split}", "{}"))


def load_dataset(path) -> Dataset:
    from r2b import checkpoint

    ck = checkpoint.load(path)
    e = ck.entries
    return Dataset(e["images"], e["labels"].astype(np.int64), int(e["class_count"][0]),
                   ck.variant.split(":", 1)[-1], e["mean"], e["std"])
