"""Dataset loading: MNIST IDX files, CIFAR-10 binary batches and a synthetic task.

Every loader returns a :class:`Dataset` with float32 NCHW images normalized by
the training split's per-channel mean and standard deviation.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .utils import stream_rng

MNIST_IMAGES_MAGIC = 0x00000803
MNIST_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int
    name: str = ""

    @property
    def input_shape(self):
        return tuple(self.x_train.shape[1:])


# ---------------------------------------------------------------------- MNIST
def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(buf: bytes, expected_magic, source="<bytes>"):
    """Parse an IDX file holding unsigned bytes; returns a uint8 array."""
    if len(buf) < 8:
        raise DataFormatError(f"{source}: file is {len(buf)} bytes, too short for an IDX header (offset 0)")
    magic, = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{source}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{source}: header truncated at offset {len(buf)}, needs {header} bytes")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n_bytes = int(np.prod(dims))
    if len(buf) - header != n_bytes:
        raise DataFormatError(f"{source}: payload is {len(buf) - header} bytes from offset {header}, "
                              f"dims {dims} need {n_bytes}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def read_mnist(images_path, labels_path):
    x = parse_idx(_read_bytes(images_path), MNIST_IMAGES_MAGIC, str(images_path))
    y = parse_idx(_read_bytes(labels_path), MNIST_LABELS_MAGIC, str(labels_path))
    if x.ndim != 3 or y.ndim != 1:
        raise DataFormatError(f"{images_path}: expected (N, rows, cols) images and (N,) labels")
    if len(x) != len(y):
        raise DataFormatError(f"{images_path}: {len(x)} images but {len(y)} labels")
    if y.size and y.max() > 9:
        raise DataFormatError(f"{labels_path}: label {int(y.max())} out of range at offset "
                              f"{8 + int(np.argmax(y > 9))}")
    return x[:, None, :, :], y.astype(np.int64)


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        p = Path(directory) / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no '{stem}' (or .gz) in {directory}")


# -------------------------------------------------------------------- CIFAR-10
def parse_cifar_bin(buf: bytes, source="<bytes>"):
    """CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        full = len(buf) // CIFAR_RECORD
        raise DataFormatError(f"{source}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
                              f"record {full} truncated at offset {full * CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    y = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(y > 9)
    if bad.size:
        raise DataFormatError(f"{source}: label {int(y[bad[0]])} out of range at offset {int(bad[0]) * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), y


def read_cifar10(directory):
    d = Path(directory)
    train = [d / f"data_batch_{i}.bin" for i in range(1, 6)]
    test = d / "test_batch.bin"
    missing = [str(p) for p in train + [test] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 binary batches missing: {', '.join(missing)}")
    parts = [parse_cifar_bin(_read_bytes(p), str(p)) for p in train]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = parse_cifar_bin(_read_bytes(test), str(test))
    return x_tr, y_tr, x_te, y_te


# ------------------------------------------------------------------- synthetic
def synthetic_images(classes=10, size=1000, seed=0, shape=(3, 16, 16), noise=4.0, max_shift=2):
    """Class templates (smooth random patterns) plus shifts and Gaussian noise.

    The templates come from a fixed stream of ``seed`` so train and validation
    draws of the same seed share them.
    """
    c, h, w = shape
    rng = stream_rng(seed, "synthetic-templates")
    coarse = rng.normal(size=(classes, c, 4, 4))
    templates = np.kron(coarse, np.ones((1, 1, -(-h // 4), -(-w // 4))))[:, :, :h, :w]
    rng = stream_rng(seed, "synthetic-samples", size)
    y = rng.integers(classes, size=size)
    x = templates[y]
    if max_shift:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(size, 2))
        x = np.stack([np.roll(img, tuple(s), axis=(1, 2)) for img, s in zip(x, shifts)])
    x = x + noise * rng.normal(size=x.shape)
    return x.astype(np.float32), y.astype(np.int64)


# ------------------------------------------------------------------------ API
def _normalize(x_train, x_val):
    x_train = np.asarray(x_train, dtype=np.float32)
    x_val = np.asarray(x_val, dtype=np.float32)
    axes = (0, 2, 3) if x_train.ndim == 4 else (0,)
    mean = x_train.mean(axis=axes, keepdims=True)
    std = x_train.std(axis=axes, keepdims=True) + 1e-6
    return (x_train - mean) / std, (x_val - mean) / std


def _cap(x, y, n, rng):
    if n is None or n >= len(x):
        return x, y
    idx = np.sort(rng.choice(len(x), size=n, replace=False))
    return x[idx], y[idx]


def load_dataset(spec: dict) -> Dataset:
    """Load a dataset described by ``spec``.

    ``{"kind": "synthetic", "classes": 10, "size": 1000, "seed": 7, "val_size": 200}``,
    ``{"kind": "mnist-idx", "path": dir}`` or ``{"kind": "cifar10-bin", "path": dir}``.
    Optional ``train_size`` / ``val_size`` cap the splits by a seeded subset.
    """
    spec = dict(spec)
    kind = spec.get("kind")
    seed = int(spec.get("seed", 0))
    train_size, val_size = spec.get("train_size"), spec.get("val_size")
    if kind == "synthetic":
        classes = int(spec.get("classes", 10))
        size = int(spec.get("size", 1000))
        n_val = int(val_size if val_size is not None else size // 5)
        shape = tuple(spec.get("shape", (3, 16, 16)))
        x, y = synthetic_images(classes, size + n_val, seed, shape, float(spec.get("noise", 4.0)),
                                int(spec.get("max_shift", 2)))
        x_tr, y_tr, x_va, y_va = x[:size], y[:size], x[size:], y[size:]
        train_size = val_size = None
    elif kind == "mnist-idx":
        d = spec["path"]
        x_tr, y_tr = read_mnist(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
        x_va, y_va = read_mnist(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
        classes = 10
    elif kind == "cifar10-bin":
        x_tr, y_tr, x_va, y_va = read_cifar10(spec["path"])
        classes = 10
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected synthetic, mnist-idx or cifar10-bin")
    rng = stream_rng(seed, "data-subset")
    x_tr, y_tr = _cap(x_tr, y_tr, train_size, rng)
    x_va, y_va = _cap(x_va, y_va, val_size, rng)
    x_tr, x_va = _normalize(x_tr, x_va)
    return Dataset(x_tr, y_tr, x_va, y_va, classes, name=kind)
