"""MNIST IDX loading, deterministic batching and synthetic samples."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "IdxError",
    "BadMagicError",
    "TruncatedError",
    "CountMismatchError",
    "Dataset",
    "read_idx_images",
    "read_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "load_idx",
    "load_mnist",
    "export_mnist_split",
    "batches",
    "synth_sample",
    "synth_dataset",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, n: int | None) -> "Dataset":
        if n is None:
            return self
        return Dataset(self.images[:n], self.labels[:n])


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the archive byte-reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 array of shape (count, rows, cols)."""
    buf = _read_bytes(path)
    if len(buf) < 16:
        raise TruncatedError(f"{path}: header needs 16 bytes, file has {len(buf)}")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    need = count * rows * cols
    if len(buf) - 16 < need:
        raise TruncatedError(f"{path}: expected {need} pixel bytes, found {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 8:
        raise TruncatedError(f"{path}: header needs 8 bytes, file has {len(buf)}")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if len(buf) - 8 < count:
        raise TruncatedError(f"{path}: expected {count} labels, found {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("images must be a uint8 array of shape (count, rows, cols)")
    header = struct.pack(">IIII", IMAGE_MAGIC, *images.shape)
    _write_bytes(path, header + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.dtype != np.uint8:
        raise ValueError("labels must be a 1-D uint8 array")
    _write_bytes(path, struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    """Images scaled to [0, 1] with shape (N, 1, rows, cols)."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    images = raw[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64))


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise FileNotFoundError(f"no {stem}[.gz] in {data_dir}")


def load_mnist(data_dir, train_size: int | None = 2000, test_size: int | None = 1000):
    """Load the standard MNIST file pair from ``data_dir``, keeping the first examples of each split."""
    data_dir = Path(data_dir)
    out = []
    for split, size in (("train", train_size), ("test", test_size)):
        img, lab = MNIST_FILES[split]
        out.append(load_idx(_find(data_dir, img), _find(data_dir, lab)).take(size))
    return tuple(out)


def export_mnist_split(out_dir, images: np.ndarray, labels: np.ndarray, train_size: int, test_size: int,
                       seed: int = 0, compress: bool = False) -> Path:
    """Shuffle uint8 digits with ``seed`` and write disjoint train/test IDX files under MNIST names."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim == 2:
        side = int(round(np.sqrt(images.shape[1])))
        images = images.reshape(-1, side, side)
    if train_size + test_size > len(labels):
        raise ValueError(f"requested {train_size} + {test_size} examples but only {len(labels)} exist")
    order = np.random.default_rng(seed).permutation(len(labels))
    parts = {"train": order[:train_size], "test": order[train_size : train_size + test_size]}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if compress else ""
    for split, idx in parts.items():
        img_name, lab_name = MNIST_FILES[split]
        write_idx_images(out_dir / (img_name + suffix), images[idx])
        write_idx_labels(out_dir / (lab_name + suffix), labels[idx])
    return out_dir


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple]:
    """Yield ``(images, labels)`` in a permutation fixed by ``(seed, epoch)``; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def synth_sample(kind: str, n: int, seed: int = 0, **params) -> np.ndarray:
    """Deterministic test samples.

    ``gaussian``          normal(loc, scale)
    ``lognormal``         lognormal(mean, sigma), heavy right tail
    ``two_point_outlier`` n - 1 bulk values with mean 0 and variance 1 taking
                          two levels (a fraction ``low_fraction`` at the lower
                          one), plus a final value ``outlier`` (default 100).
                          The upper bulk level stays below the overall mean,
                          so the outlier is the only value above it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        scale = params.get("scale", 1.0)
        if scale <= 0:
            raise ValueError("scale must be positive")
        return rng.normal(params.get("loc", 0.0), scale, size=n)
    if kind == "lognormal":
        sigma = params.get("sigma", 1.0)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return rng.lognormal(params.get("mean", 0.0), sigma, size=n)
    if kind == "two_point_outlier":
        outlier = float(params.get("outlier", 100.0))
        p = float(params.get("low_fraction", 0.2))
        if n == 1:
            return np.array([outlier])
        bulk = n - 1
        k = int(round(p * bulk))
        if bulk < 2 or not 0 < k < bulk:
            raise ValueError(f"cannot build a two-level bulk of {bulk} values with low_fraction={p}")
        p = k / bulk
        low, high = -np.sqrt((1 - p) / p), np.sqrt(p / (1 - p))
        values = np.concatenate([np.full(k, low), np.full(bulk - k, high)])
        rng.shuffle(values)
        return np.append(values, outlier)
    raise ValueError(f"unknown sample kind {kind!r}")


def synth_dataset(n: int, classes: int = 10, seed: int = 0, split: str = "train", shape=(1, 28, 28),
                  noise: float = 0.35) -> Dataset:
    """Noisy binary class prototypes clipped to [0, 1].

    A stand-in when no MNIST files are available. Prototypes depend only on
    ``seed``; ``split`` picks an independent stream of examples.
    """
    streams = {"train": 1, "test": 2}
    if split not in streams:
        raise ValueError(f"split must be one of {sorted(streams)}")
    protos = np.random.default_rng([seed, 0]).uniform(0.0, 1.0, size=(classes,) + tuple(shape)) > 0.6
    rng = np.random.default_rng([seed, streams[split]])
    labels = rng.integers(0, classes, size=n)
    images = np.clip(protos[labels] + rng.normal(0.0, noise, size=(n,) + tuple(shape)), 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64))
