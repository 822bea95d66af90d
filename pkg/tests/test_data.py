import struct

import numpy as np
import pytest

from likeland.data import (
    Dataset, load_cifar10_bin, load_dataset, load_idx, subset, synthetic_blobs, train_test_split, write_idx,
)
from likeland.errors import ConsistencyError, FormatError, InputError


def idx_files(tmp_path, pixels, labels, n_labels=None, image_magic=0x803):
    n, h, w = pixels.shape
    img = tmp_path / "t10k-images-idx3-ubyte"
    lab = tmp_path / "t10k-labels-idx1-ubyte"
    img.write_bytes(struct.pack(">IIII", image_magic, n, h, w) + pixels.astype(np.uint8).tobytes())
    n_labels = len(labels) if n_labels is None else n_labels
    lab.write_bytes(struct.pack(">II", 0x801, n_labels) + np.asarray(labels, np.uint8).tobytes())
    return img, lab


def test_idx_endpoint_scaling(tmp_path):
    pixels = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]])
    ds = load_idx(*idx_files(tmp_path, pixels, [3, 7]))
    assert ds.inputs.shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(ds.inputs[:, 0], pixels / 255.0)
    assert set(np.unique(ds.inputs)) == {0.0, 1.0}
    assert list(ds.labels) == [3, 7]


def test_idx_count_mismatch(tmp_path):
    pixels = np.zeros((2, 2, 2))
    img, lab = idx_files(tmp_path, pixels, [1, 2, 3])
    with pytest.raises(ConsistencyError):
        load_idx(img, lab)


def test_idx_bad_magic_and_truncation(tmp_path):
    img, lab = idx_files(tmp_path, np.zeros((2, 2, 2)), [1, 2], image_magic=0x804)
    with pytest.raises(FormatError):
        load_idx(img, lab)
    img, lab = idx_files(tmp_path, np.zeros((2, 2, 2)), [1, 2])
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(IOError):
        load_idx(img, lab)


def test_idx_round_trip_is_bitwise(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(5, 4, 3))
    ds = load_idx(*idx_files(tmp_path, pixels, [0, 1, 2, 3, 4]))
    out = tmp_path / "out"
    write_idx(ds, out / "a-images-idx3-ubyte", out / "a-labels-idx1-ubyte")
    again = load_idx(out / "a-images-idx3-ubyte", out / "a-labels-idx1-ubyte")
    assert again.inputs.tobytes() == ds.inputs.tobytes()
    assert again.labels.tobytes() == ds.labels.tobytes()
    assert (out / "a-images-idx3-ubyte").read_bytes() == (tmp_path / "t10k-images-idx3-ubyte").read_bytes()


def test_cifar_single_record(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(bytes([3]) + bytes([255]) * 3072)
    ds = load_cifar10_bin(path)
    assert len(ds) == 1 and ds.labels[0] == 3
    assert ds.inputs.shape == (1, 3, 32, 32) and np.all(ds.inputs == 1.0)


def test_cifar_channel_major_layout(tmp_path):
    rec = np.zeros(3073, np.uint8)
    rec[0] = 1
    rec[1 + 1024 + 5] = 255  # green channel, row 0, column 5
    path = tmp_path / "b.bin"
    path.write_bytes(rec.tobytes())
    ds = load_cifar10_bin(path)
    assert ds.inputs[0, 1, 0, 5] == 1.0 and ds.inputs.sum() == 1.0


def test_cifar_bad_files(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(bytes(3072))
    with pytest.raises(FormatError):
        load_cifar10_bin(path)
    path.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(FormatError):
        load_cifar10_bin(path)


def test_dataset_invariants():
    with pytest.raises(InputError):
        Dataset(np.array([[1.5]]), np.array([0]))
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((2, 1)), np.array([0]))


def test_blobs_deterministic_and_in_range():
    a, b = synthetic_blobs(20, 3, 5, 4.0, seed=9), synthetic_blobs(20, 3, 5, 4.0, seed=9)
    assert a.inputs.tobytes() == b.inputs.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0
    assert np.bincount(a.labels).tolist() == [20, 20, 20]
    with pytest.raises(InputError):
        synthetic_blobs(5, 1, 5, 1.0)


def test_well_separated_blobs_are_linearly_separable():
    from likeland.attacks import clean_accuracy
    from likeland.models import ArchitectureConfig, build
    from likeland.training import TrainConfig, train

    ds = synthetic_blobs(30, 3, 10, 30.0, seed=1)
    model = build(ArchitectureConfig("mlp", (10, 3)), seed=0)
    trained, _ = train(model, ds, TrainConfig(epochs=30, learning_rate=0.01))
    assert clean_accuracy(trained, ds) == 1.0


def test_subset_stratified_and_seeded():
    ds = synthetic_blobs(10, 10, 3, 1.0, seed=0)
    sub = subset(ds, 10, seed=4)
    assert sorted(sub.labels.tolist()) == list(range(10))
    assert subset(ds, 10, seed=4).inputs.tobytes() == sub.inputs.tobytes()
    full = subset(ds, len(ds), seed=1)
    assert sorted(map(bytes, full.inputs)) == sorted(map(bytes, ds.inputs))
    with pytest.raises(InputError):
        subset(ds, len(ds) + 1)


def test_train_test_split_partitions():
    ds = synthetic_blobs(10, 3, 4, 2.0, seed=0)
    tr, te = train_test_split(ds, 9, seed=0)
    assert len(tr) == 21 and len(te) == 9
    assert np.bincount(te.labels).tolist() == [3, 3, 3]
    rows = {bytes(r) for r in tr.inputs} | {bytes(r) for r in te.inputs}
    assert len(rows) == 30


def test_load_dataset_sources(tmp_path):
    ds = load_dataset("blobs:n=10,k=2,dim=3,sep=2,seed=0,holdout=4,part=test")
    assert len(ds) == 4
    with pytest.raises(InputError):
        load_dataset("blobs:n=10,colour=red")
    with pytest.raises(InputError):
        load_dataset(str(tmp_path / "nothing"))
    idx_files(tmp_path, np.zeros((2, 2, 2)), [0, 1])
    assert len(load_dataset(str(tmp_path))) == 2
