"""Dataset containers and loaders (IDX, CIFAR-10 binary, synthetic blobs)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .errors import ConsistencyError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass(frozen=True)
class Dataset:
    """Inputs in [0, 1] stacked along axis 0, with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ConsistencyError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise InputError("dataset inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def take(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return Dataset(self.inputs[index], self.labels[index], self.name, self.split)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _idx_payload(blob: bytes, magic: int, what: str):
    if len(blob) < 8:
        raise IOError(f"{what} file truncated before header")
    got = struct.unpack_from(">I", blob)[0]
    if got != magic:
        raise FormatError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IOError(f"{what} file truncated inside header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    n = int(np.prod(dims))
    if len(blob) - header < n:
        raise IOError(f"{what} file truncated: expected {n} bytes of data, found {len(blob) - header}")
    return dims, np.frombuffer(blob, dtype=np.uint8, count=n, offset=header)


def load_idx(images_path, labels_path, name: str = "idx", split: str = "test") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    dims, pixels = _idx_payload(_read(images_path), IDX_IMAGES_MAGIC, "image")
    (n_labels,), labels = _idx_payload(_read(labels_path), IDX_LABELS_MAGIC, "label")
    if dims[0] != n_labels:
        raise ConsistencyError(f"{dims[0]} images but {n_labels} labels")
    images = pixels.reshape(dims[0], 1, dims[1], dims[2]).astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), name, split)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write ``dataset`` (values on the k/255 grid) as an IDX pair."""
    x = dataset.inputs
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise FormatError("IDX holds single-channel images only")
        x = x[:, 0]
    if x.ndim != 3:
        raise FormatError(f"IDX needs N x H x W images, got {dataset.inputs.shape}")
    pixels = np.rint(x * 255.0).astype(np.uint8)
    n, h, w = pixels.shape
    atomic_write_bytes(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    atomic_write_bytes(
        labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


def load_cifar10_bin(path, name: str = "cifar10", split: str = "test") -> Dataset:
    """Read one CIFAR-10 binary batch (label byte + 3072 channel-major pixels per record)."""
    blob = _read(path)
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise FormatError(f"{path}: length {len(blob)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, name, split)


def synthetic_blobs(
    n_per_class: int,
    K: int,
    dim: int,
    separation: float,
    seed: int = 0,
    name: str = "blobs",
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs mapped affinely into [0, 1]^dim.

    Class means are random directions scaled so neighbouring means sit
    ``separation`` noise standard deviations apart on average. The same
    scalar affine map is applied to every coordinate, so distances keep
    their ratios.
    """
    if K < 2 or dim < 2:
        raise InputError("synthetic_blobs needs K >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((K, dim))
    means *= separation / np.sqrt(2.0 * dim)
    labels = np.repeat(np.arange(K), n_per_class)
    raw = means[labels] + rng.standard_normal((K * n_per_class, dim))
    lo, hi = raw.min(), raw.max()
    inputs = (raw - lo) / (hi - lo)
    order = rng.permutation(len(labels))
    return Dataset(np.clip(inputs[order], 0.0, 1.0), labels[order], name, "train")


def _stratified_index(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    total = len(labels)
    if n > total or n < 0:
        raise InputError(f"cannot take {n} samples from a dataset of {total}")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    # largest-remainder apportionment of n across classes
    quota = counts * n / total
    take = np.floor(quota).astype(int)
    short = n - take.sum()
    if short:
        order = np.lexsort((classes, -(quota - take)))
        take[order[:short]] += 1
    picked = [rng.permutation(np.flatnonzero(labels == c))[:k] for c, k in zip(classes, take)]
    if not picked:
        return np.array([], dtype=np.intp)
    return rng.permutation(np.concatenate(picked))


def subset(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Seeded stratified sample of ``n`` items without replacement."""
    return dataset.take(_stratified_index(dataset.labels, n, seed))


def train_test_split(dataset: Dataset, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified partition into (train, test)."""
    test_index = _stratified_index(dataset.labels, n_test, seed)
    rest = np.ones(len(dataset), dtype=bool)
    rest[test_index] = False
    train, test = dataset.take(np.flatnonzero(rest)), dataset.take(test_index)
    return (
        Dataset(train.inputs, train.labels, dataset.name, "train"),
        Dataset(test.inputs, test.labels, dataset.name, "test"),
    )


def load_dataset(source: str) -> Dataset:
    """Resolve a CLI data argument.

    Accepts a directory holding an IDX pair or CIFAR-10 ``.bin`` batches, a
    single ``.bin`` file, or ``blobs:n=200,k=3,dim=20,sep=4,seed=0``; blobs take
    ``holdout=<count>,part=train|test`` to select one side of a stratified split.
    """
    if source.startswith("blobs:"):
        try:
            opts = dict(kv.split("=", 1) for kv in source[6:].split(",") if kv)
            ds = synthetic_blobs(
                int(opts.pop("n", 100)), int(opts.pop("k", 3)), int(opts.pop("dim", 20)),
                float(opts.pop("sep", 4.0)), int(opts.pop("seed", 0)),
            )
            holdout, part = int(opts.pop("holdout", 0)), opts.pop("part", "all")
        except ValueError as exc:
            raise InputError(f"bad blobs spec {source!r}: {exc}") from exc
        if opts:
            raise InputError(f"unknown blobs options {sorted(opts)}")
        if part not in ("all", "train", "test") or (part != "all" and holdout < 1):
            raise InputError("blobs part must be all, or train/test together with holdout >= 1")
        if part == "all":
            return ds
        train_part, test_part = train_test_split(ds, holdout, seed=0)
        return train_part if part == "train" else test_part
    path = Path(source)
    if path.is_file() and path.suffix == ".bin":
        return load_cifar10_bin(path)
    if path.is_dir():
        images = sorted(path.glob("*images*idx3*"))
        labels = sorted(path.glob("*labels*idx1*"))
        if images and labels:
            return load_idx(images[0], labels[0], name=path.name)
        bins = sorted(path.glob("*.bin"))
        if bins:
            parts = [load_cifar10_bin(b) for b in bins]
            return Dataset(
                np.concatenate([p.inputs for p in parts]),
                np.concatenate([p.labels for p in parts]),
                "cifar10", "test",
            )
    raise InputError(f"no dataset found at {source!r}")
