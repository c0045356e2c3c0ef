"""Datasets, IDX files and seeded minibatching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import gram_schmidt
from .rng import XorShift64Star

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs must be |D| x d with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, name or self.name)


@dataclass(frozen=True)
class Minibatch:
    indices: np.ndarray
    labels: np.ndarray
    num_classes: int

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def partition(self) -> list[np.ndarray]:
        """Row positions (within the batch) of each class."""
        return [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]

    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.size, self.num_classes))
        out[np.arange(self.size), self.labels] = 1.0
        return out

    def inputs(self, dataset: Dataset) -> np.ndarray:
        return dataset.inputs[self.indices]


def _require_all_classes(ds: Dataset) -> Dataset:
    missing = np.flatnonzero(ds.class_counts() == 0)
    if missing.size:
        raise ValueError(f"classes without examples: {missing.tolist()}")
    return ds


def generate_blobs(
    num_classes: int,
    per_class: int,
    dim: int,
    mean_scale: float = 4.0,
    sigma: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian blobs around ``mean_scale`` times near-orthogonal unit directions."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 input dimensions")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    rng = XorShift64Star(seed)
    raw = rng.normals(num_classes * dim).reshape(num_classes, dim)
    if num_classes <= dim:
        directions = gram_schmidt(raw)
    else:
        directions = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    means = mean_scale * directions
    noise = rng.normals(num_classes * per_class * dim).reshape(num_classes, per_class, dim)
    inputs = (means[:, None, :] + sigma * noise).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(inputs, labels, num_classes, f"blobs-C{num_classes}-d{dim}-s{seed}")


def _read_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise IdxTruncatedError(f"{path}: truncated header ({len(raw)} bytes, need {need})")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:need])
    body = int(np.prod(dims))
    if len(raw) < need + body:
        raise IdxTruncatedError(f"{path}: truncated body ({len(raw) - need} of {body} bytes)")
    return dims


def read_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    count, rows, cols = _read_header(raw, path, IDX_IMAGES_MAGIC, 3)
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(
        count, rows, cols
    )


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (count,) = _read_header(raw, path, IDX_LABELS_MAGIC, 1)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """IDX image/label pair as a dataset; pixels scaled to [0, 1] and flattened."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    c = num_classes if num_classes is not None else int(labels.max()) + 1 if labels.size else 0
    return _require_all_classes(Dataset(inputs, labels, c, Path(images_path).name))


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def split_holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    """Seeded train/validation split; ``fraction`` of examples held out."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must lie in [0, 1)")
    n_val = int(round(fraction * len(ds)))
    if n_val == 0:
        return ds, None
    perm = XorShift64Star(seed).permutation(len(ds))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx, ds.name + ":train"), ds.subset(val_idx, ds.name + ":val")


def minibatch_stream(ds: Dataset, batch_size: int, epoch_seed: int) -> list[Minibatch]:
    """One epoch of contiguous slices of a seeded permutation; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    perm = XorShift64Star(epoch_seed).permutation(len(ds))
    return [
        Minibatch(idx, ds.labels[idx], ds.num_classes)
        for idx in (perm[i:i + batch_size] for i in range(0, len(ds), batch_size))
    ]
