"""Image datasets: a procedural generator and two on-disk formats.

Supported sources:

* ``synthetic`` -- "two-blob" images generated from a seed, no files needed.
  Every class owns two blob positions and colours; samples jitter them and
  add noise.
* ``cifar10`` -- the 10-class 32x32 binary batch format. Each record is one
  label byte followed by 3072 pixel bytes (R, G, B planes of 32x32).
  Training split reads ``data_batch_{1..5}.bin``, test split ``test_batch.bin``.
* ``raw`` -- a directory with ``{split}_images.dgrt`` and ``{split}_labels.dgrt``
  raw tensors (see :func:`read_raw_tensor`).
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
RAW_MAGIC = b"DGRT"


@dataclass
class ArrayDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.labels)


@dataclass
class DatasetHandle:
    kind: str = "synthetic"
    path: str = None
    split: str = "train"
    subset: int = None
    num_classes: int = 10
    size: int = 32
    seed: int = 0
    mean: tuple = None
    std: tuple = None
    augment: bool = True
    synthetic_samples: int = 2048


def read_cifar_file(path, num_classes=10):
    """Parse one binary batch file into ``(uint8 images (N,3,32,32), int64 labels)``."""
    with open(path, "rb") as f:
        raw = f.read()
    whole = len(raw) // CIFAR_RECORD
    if len(raw) % CIFAR_RECORD:
        raise ParseError(f"{path}: truncated record {whole}", offset=whole * CIFAR_RECORD)
    if whole == 0:
        raise ParseError(f"{path}: file holds no records", offset=0)
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{path}: record {i} has label {labels[i]} outside [0, {num_classes})")
    return arr[:, 1:].reshape(whole, 3, 32, 32), labels


def write_cifar_file(path, images, labels):
    """Write uint8 images ``(N,3,32,32)`` and labels in the binary batch format."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def load_cifar10(root, split="train"):
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    paths = [os.path.join(root, n) for n in names]
    missing = [n for n, p in zip(names, paths) if not os.path.isfile(p)]
    if missing:
        raise FileNotFoundError(f"missing {split} batch files under {root}: {', '.join(missing)}")
    parts = [read_cifar_file(p) for p in paths]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def write_raw_tensor(path, array):
    """Raw tensor: ``b"DGRT"``, uint32 ndim, ndim x uint32 dims, then float32 data (all LE)."""
    array = np.asarray(array, dtype="<f4")
    header = RAW_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    with open(path, "wb") as f:
        f.write(header + array.tobytes())


def read_raw_tensor(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != RAW_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 8:
        raise ParseError(f"{path}: missing dimension count", offset=4)
    (ndim,) = struct.unpack_from("<I", raw, 4)
    body = 8 + 4 * ndim
    if len(raw) < body:
        raise ParseError(f"{path}: header declares {ndim} dims but is truncated", offset=len(raw))
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    expected = body + 4 * int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise ParseError(f"{path}: body is {len(raw) - body} bytes, dims {dims} need {expected - body}",
                         offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype="<f4", offset=body).reshape(dims).astype(np.float32)


def load_raw_dataset(root, split, num_classes):
    images = read_raw_tensor(os.path.join(root, f"{split}_images.dgrt"))
    labels_f = read_raw_tensor(os.path.join(root, f"{split}_labels.dgrt"))
    if images.ndim != 4 or labels_f.shape != (images.shape[0],):
        raise DataError(f"raw dataset shapes {images.shape} / {labels_f.shape} are inconsistent")
    labels = labels_f.astype(np.int64)
    if (labels != labels_f).any() or labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise DataError(f"raw labels must be integers in [0, {num_classes})")
    return images, labels


def synthetic_two_blob(n, num_classes=10, size=32, seed=0, noise=0.25):
    """Procedural images: each class is two coloured Gaussian blobs at class-specific spots.

    Class prototypes depend only on ``num_classes`` and ``size``; ``seed``
    drives the per-sample jitter and noise, so splits share prototypes.
    """
    proto = np.random.default_rng(12345 + num_classes)
    margin = size // 5
    centers = proto.uniform(margin, size - margin, size=(num_classes, 2, 2))
    colors = proto.uniform(-1.0, 1.0, size=(num_classes, 2, 3))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = rng.normal(0.0, noise, size=(n, 3, size, size)).astype(np.float32)
    jitter = rng.normal(0.0, size / 16, size=(n, 2, 2))
    radius = rng.uniform(size / 10, size / 6, size=(n, 2))
    for blob in range(2):
        cy = centers[labels, blob, 0] + jitter[:, blob, 0]
        cx = centers[labels, blob, 1] + jitter[:, blob, 1]
        d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
        bump = np.exp(-d2 / (2 * radius[:, blob, None, None] ** 2)).astype(np.float32)
        images += colors[labels, blob][:, :, None, None].astype(np.float32) * bump[:, None]
    return images, labels.astype(np.int64)


def load_dataset(handle):
    """Materialize a dataset as normalized float32 ``(N, C, H, W)`` images plus labels."""
    if handle.kind == "synthetic":
        seed = handle.seed + (0 if handle.split == "train" else 1_000_003)
        n = handle.subset or handle.synthetic_samples
        images, labels = synthetic_two_blob(n, handle.num_classes, handle.size, seed)
        mean, std = handle.mean or (0.0,) * 3, handle.std or (1.0,) * 3
    elif handle.kind == "cifar10":
        raw, labels = load_cifar10(handle.path, handle.split)
        images = raw.astype(np.float32) / 255.0
        mean, std = handle.mean or CIFAR_MEAN, handle.std or CIFAR_STD
    elif handle.kind == "raw":
        images, labels = load_raw_dataset(handle.path, handle.split, handle.num_classes)
        mean = handle.mean or (0.0,) * images.shape[1]
        std = handle.std or (1.0,) * images.shape[1]
    else:
        raise ValueError(f"unknown dataset kind {handle.kind!r}")
    if handle.subset is not None:
        if handle.subset > len(labels):
            raise DataError(f"subset {handle.subset} exceeds {len(labels)} available records")
        images, labels = images[: handle.subset], labels[: handle.subset]
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(std, dtype=np.float32)[None, :, None, None]
    images = ((images - mean) / std).astype(np.float32)
    return ArrayDataset(np.ascontiguousarray(images), labels, handle.num_classes)


def augment_batch(images, rng, pad=4, flip=True):
    """Random crop after zero padding, then random horizontal flip."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def iterate_batches(dataset, batch_size, seed=0, epoch=0, shuffle=True, augment=False):
    """Yield ``(images, labels)`` minibatches; order and augmentation depend only on (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    n = len(dataset)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if augment:
            x = augment_batch(x, rng)
        yield x, dataset.labels[idx]
