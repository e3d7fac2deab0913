"""Image benchmark ingestion: IDX and CIFAR-10 binary readers, normalisation,
deterministic train/validation splits and batch iteration."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng, derive_seed

DATA_DIR_ENV = "MINPROF_DATA_DIR"
DATASET_NAMES = ("mnist", "fashion_mnist", "cifar10")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

IDX_FILES = {
    ("train", "images"): "train-images-idx3-ubyte",
    ("train", "labels"): "train-labels-idx1-ubyte",
    ("test", "images"): "t10k-images-idx3-ubyte",
    ("test", "labels"): "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class FormatError(ValueError):
    """Malformed container file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


class MissingDataError(FileNotFoundError):
    pass


def default_data_dir() -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "minprof" / "data"


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # float32 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def view(self, indices=None) -> "DatasetView":
        if indices is None:
            indices = np.arange(len(self), dtype=np.int64)
        return DatasetView(self, np.asarray(indices, dtype=np.int64))


@dataclass
class DatasetView:
    """A subset of a dataset addressed by index; no pixel copy."""

    dataset: Dataset
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)

    def gather(self, positions) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices[positions]
        return self.dataset.images[idx], self.dataset.labels[idx]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


@dataclass
class SplitPlan:
    validation_fraction: float
    seed: int
    train_indices: np.ndarray = field(repr=False)
    validation_indices: np.ndarray = field(repr=False)


# -- container readers --------------------------------------------------------
def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingDataError(f"missing data file {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(path) -> np.ndarray:
    """Parse a big-endian IDX file.

    Images (magic 0x803) come back as float32 ``[N, 1, rows, cols]`` holding
    the raw byte values 0-255; labels (magic 0x801) as int64 ``[N]``.
    """
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError("file shorter than the IDX header", len(raw), path)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise FormatError("truncated image header", len(raw), path)
        n, rows, cols = struct.unpack(">III", raw[4:16])
        need = 16 + n * rows * cols
        if len(raw) < need:
            raise FormatError(f"truncated pixel data, expected {need} bytes", len(raw), path)
        pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
        return pixels.reshape(n, 1, rows, cols).astype(np.float32)
    if magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack(">I", raw[4:8])
        if len(raw) < 8 + n:
            raise FormatError(f"truncated label data, expected {8 + n} bytes", len(raw), path)
        return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    raise FormatError(f"unknown IDX magic 0x{magic:08x}", 0, path)


def write_idx(path, array: np.ndarray):
    """Write uint8 images ``[N,rows,cols]`` (or ``[N,1,rows,cols]``) or labels ``[N]``."""
    arr = np.asarray(array)
    if arr.ndim == 4:
        arr = arr.reshape(arr.shape[0], arr.shape[2], arr.shape[3])
    arr = arr.astype(np.uint8)
    if arr.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape)
    elif arr.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, arr.shape[0])
    else:
        raise ValueError(f"cannot encode shape {arr.shape} as IDX")
    Path(path).write_bytes(header + arr.tobytes())


def load_cifar10_binary(paths: Sequence, split: str = "train") -> Dataset:
    """Concatenate CIFAR-10 binary batches (1 label byte + 3072 planar pixels per record)."""
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            whole = len(raw) - len(raw) % CIFAR_RECORD
            raise FormatError(f"length {len(raw)} is not a positive multiple of {CIFAR_RECORD}", whole, path)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] > 9)
        if bad.size:
            raise FormatError(f"label {rec[bad[0], 0]} outside 0..9", int(bad[0]) * CIFAR_RECORD, path)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32))
    if not images:
        raise MissingDataError("no CIFAR-10 batch files given")
    return Dataset("cifar10", np.concatenate(images), np.concatenate(labels), split)


def load_dataset(name: str, split: str, data_dir=None, normalized: bool = True) -> Dataset:
    """Read ``<data_dir>/<name>/...`` and return pixels scaled to [0,1] or normalised to [-1,1]."""
    if name not in DATASET_NAMES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(data_dir or default_data_dir()) / name
    if name == "cifar10":
        files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        ds = load_cifar10_binary([root / f for f in files], split)
    else:
        images = load_idx(root / IDX_FILES[(split, "images")])
        labels = load_idx(root / IDX_FILES[(split, "labels")])
        ds = Dataset(name, images, labels, split)
    ds.images /= 255.0
    return normalize(ds) if normalized else ds


def normalize(ds: Dataset) -> Dataset:
    """Channel-wise ``(x - 0.5) / 0.5`` on [0,1] pixels."""
    return Dataset(ds.name, ((ds.images - 0.5) / 0.5).astype(np.float32), ds.labels, ds.split)


# -- splitting and iteration ----------------------------------------------------
def split_train_validation(ds: Dataset | DatasetView, seed: int,
                           validation_fraction: float = 0.10) -> tuple[DatasetView, DatasetView, SplitPlan]:
    """Deterministic shuffled train/validation partition keyed by (seed, dataset name)."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(f"validation_fraction must lie in (0,1), got {validation_fraction}")
    view = ds if isinstance(ds, DatasetView) else ds.view()
    n = len(view)
    perm = Rng(derive_seed(seed, view.dataset.name), "split").permutation(n)
    n_val = int(round(validation_fraction * n))
    val_pos = np.sort(perm[:n_val])
    train_pos = np.sort(perm[n_val:])
    plan = SplitPlan(validation_fraction, seed, view.indices[train_pos], view.indices[val_pos])
    return (DatasetView(view.dataset, plan.train_indices),
            DatasetView(view.dataset, plan.validation_indices), plan)


def batches(view: DatasetView, batch_size: int, epoch_seed: int | None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; ``epoch_seed=None`` keeps index order."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(view)
    order = np.arange(n) if epoch_seed is None else Rng(epoch_seed, "shuffle").permutation(n)
    for start in range(0, n, batch_size):
        yield view.gather(order[start:start + batch_size])


def stratified_subsample(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Keep ``n`` examples with classes as balanced as the data allows."""
    if n >= len(ds):
        return ds
    perm = Rng(derive_seed(seed, ds.name, ds.split, n), "split").permutation(len(ds))
    classes = np.unique(ds.labels)
    quota = {c: n // len(classes) + (1 if i < n % len(classes) else 0) for i, c in enumerate(classes)}
    chosen = []
    for idx in perm:
        c = ds.labels[idx]
        if quota[c] > 0:
            quota[c] -= 1
            chosen.append(idx)
            if len(chosen) == n:
                break
    keep = np.sort(np.asarray(chosen, dtype=np.int64))
    return Dataset(ds.name, ds.images[keep], ds.labels[keep], ds.split)


# -- resampling -----------------------------------------------------------------
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def resize_bilinear_28(ds: Dataset) -> Dataset:
    """Bilinear resample of 32x32 images to 28x28; 28x28 input is returned unchanged."""
    n, c, h, w = ds.images.shape
    if (h, w) == (28, 28):
        return ds
    if (h, w) != (32, 32):
        raise ValueError(f"expected 32x32 images, got {h}x{w}")
    ry = _bilinear_matrix(h, 28)
    rx = _bilinear_matrix(w, 28)
    out = np.einsum("oh,nchw,pw->ncop", ry, ds.images.astype(np.float64), rx, optimize=True)
    return Dataset(ds.name, out.astype(np.float32), ds.labels, ds.split)
