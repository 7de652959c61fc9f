"""Datasets: IDX ingestion, balanced subsampling, synthetic blobs, minibatching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import DTYPE, Rng, check_onehot

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed or inconsistent IDX file."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, 1, h, w]
    labels_onehot: np.ndarray  # [n, Q]
    class_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [n, channels, h, w], got {self.images.shape}")
        if self.images.shape[0] != self.labels_onehot.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels_onehot.shape[0]} labels")
        check_onehot(self.labels_onehot)
        self.images.flags.writeable = False
        self.labels_onehot.flags.writeable = False

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels_onehot.shape[1]

    @property
    def targets(self) -> np.ndarray:
        return self.labels_onehot.argmax(axis=1)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx].copy(), self.labels_onehot[idx].copy(), list(self.class_names), dict(self.meta))


def one_hot(targets, num_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), found range [{targets.min()}, {targets.max()}]")
    out = np.zeros((targets.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(targets.shape[0]), targets] = 1.0
    return out


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_u8_payload(path, magic: int, n_dims: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic number, expected 0x{magic:08x}, found 0x{found:08x}")
    dims = struct.unpack(f">{n_dims}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise IdxFormatError(f"{path}: payload has {len(raw) - header} bytes, header promises {size}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """uint8 array [count, rows, cols]."""
    _, pixels = _read_u8_payload(path, IMAGES_MAGIC, 3)
    return pixels


def read_idx_labels(path) -> np.ndarray:
    _, labels = _read_u8_payload(path, LABELS_MAGIC, 1)
    return labels


def write_idx_images(path, pixels) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">2I", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_idx_pair(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images_path} holds {pixels.shape[0]} images but {labels_path} holds {labels.shape[0]} labels")
    q = int(labels.max()) + 1 if num_classes is None else num_classes
    q = max(q, 2)
    images = (pixels.astype(DTYPE) / 255.0)[:, None, :, :]
    return Dataset(images, one_hot(labels, q), [str(k) for k in range(q)], {"source": str(images_path)})


# ---------------------------------------------------------------------------
# Subsampling and batching
# ---------------------------------------------------------------------------


def balanced_subsample(ds: Dataset, n: int, rng: Rng) -> Dataset:
    """``n / Q`` examples per class without replacement, in shuffled order."""
    q = ds.num_classes
    if n % q:
        raise ValueError(f"n = {n} is not divisible by the number of classes {q}")
    per = n // q
    targets = ds.targets
    chosen = []
    for k in range(q):
        members = np.flatnonzero(targets == k)
        if members.shape[0] < per:
            raise ValueError(f"class {k} has only {members.shape[0]} examples, {per} required")
        chosen.append(members[np.sort(rng.child(k).choice(members.shape[0], per))])
    idx = np.concatenate(chosen)
    idx = idx[rng.child("order").permutation(idx.shape[0])]
    return ds.subset(idx)


def minibatches(n: int, m: int, rng: Rng):
    """One epoch of index sets: a fresh permutation cut into chunks of m (last may be short)."""
    if m < 1:
        raise ValueError("batch size must be >= 1")
    perm = rng.permutation(n)
    for start in range(0, n, m):
        yield perm[start : start + m]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def blob_centers(Q: int, d: int, separation: float) -> np.ndarray:
    """Class k sits at ``separation * (+/- e_{k // 2})`` (needs Q <= 2d)."""
    if Q > 2 * d:
        raise ValueError(f"synthetic blobs support at most 2*d = {2 * d} classes, got {Q}")
    centers = np.zeros((Q, d), dtype=DTYPE)
    for k in range(Q):
        centers[k, k // 2] = separation * (1.0 if k % 2 == 0 else -1.0)
    return centers


def synthetic_blobs(n: int, Q: int, d: int, separation: float, rng: Rng) -> Dataset:
    """Unit-variance Gaussian clusters, balanced, rendered as [n, 1, 1, d] images.

    Pixel values are unbounded here; the [0, 1] range applies to IDX data only.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    targets = np.arange(n) % Q
    targets = targets[rng.child("order").permutation(n)]
    x = blob_centers(Q, d, separation)[targets] + rng.child("noise").normal((n, d))
    meta = {"source": "synthetic_blobs", "separation": separation}
    return Dataset(x[:, None, None, :], one_hot(targets, Q), [str(k) for k in range(Q)], meta)


def permuted_pixels(ds: Dataset, rng: Rng) -> Dataset:
    """Out-of-distribution stand-in: one fixed pixel permutation applied to every image."""
    n, c, h, w = ds.images.shape
    perm = rng.permutation(h * w)
    flat = ds.images.reshape(n, c, h * w)[:, :, perm]
    meta = dict(ds.meta, substitute="pixel-permuted in-distribution test set")
    return Dataset(flat.reshape(n, c, h, w).copy(), ds.labels_onehot.copy(), list(ds.class_names), meta)
