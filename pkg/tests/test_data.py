import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mal.data import (Dataset, load_dataset, parse_cifar10, parse_cifar100, parse_idx_images, parse_idx_labels,
                      subsample)
from mal.errors import ConfigError, FormatError, LengthError


def idx_images_bytes(pixels):
    """Serialize an ``N x rows x cols`` uint8 array as an IDX image file."""
    n, r, c = pixels.shape
    return struct.pack(">IIII", 2051, n, r, c) + np.asarray(pixels, dtype=np.uint8).tobytes()


def idx_labels_bytes(labels):
    return struct.pack(">II", 2049, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


def features_to_idx(features, rows, cols):
    pix = np.rint(np.asarray(features, dtype=np.float64) * 255).astype(np.uint8)
    return idx_images_bytes(pix.reshape(-1, rows, cols))


def test_hand_built_idx_image():
    blob = idx_images_bytes(np.array([[[0, 255], [128, 64]]], dtype=np.uint8))
    x = parse_idx_images(blob)
    assert x.shape == (1, 4)
    np.testing.assert_array_equal(x[0], np.float32([0.0, 1.0, 128 / 255, 64 / 255]))


def test_idx_row_major_flattening():
    pix = np.arange(6, dtype=np.uint8).reshape(1, 2, 3)
    np.testing.assert_array_equal(parse_idx_images(idx_images_bytes(pix))[0] * 255, np.float32([0, 1, 2, 3, 4, 5]))


def test_idx_label_beyond_class_count_is_accepted_by_parser():
    np.testing.assert_array_equal(parse_idx_labels(idx_labels_bytes([3, 200, 11])), [3, 200, 11])


def test_idx_wrong_magic():
    blob = bytearray(idx_labels_bytes([1, 2]))
    blob[3] = 0x02
    with pytest.raises(FormatError, match="magic"):
        parse_idx_labels(bytes(blob))
    with pytest.raises(FormatError):
        parse_idx_images(idx_labels_bytes([1]))


def test_idx_truncated_and_trailing():
    blob = idx_images_bytes(np.zeros((2, 3, 3), dtype=np.uint8))
    with pytest.raises(LengthError):
        parse_idx_images(blob[:-1])
    with pytest.raises(LengthError):
        parse_idx_images(blob + b"\x00")
    with pytest.raises(LengthError):
        parse_idx_labels(b"\x00\x00")


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 5), r=st.integers(1, 6), c=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_idx_round_trip(n, r, c, seed):
    g = np.random.default_rng(seed)
    blob = idx_images_bytes(g.integers(0, 256, size=(n, r, c), dtype=np.uint8))
    x = parse_idx_images(blob)
    assert x.min() >= 0 and x.max() <= 1
    assert features_to_idx(x, r, c) == blob
    labels = idx_labels_bytes(g.integers(0, 256, size=n))
    assert idx_labels_bytes(parse_idx_labels(labels)) == labels


def cifar10_record(label, pixels):
    return bytes([label]) + np.asarray(pixels, dtype=np.uint8).tobytes()


def test_cifar10_single_record():
    d = parse_cifar10(cifar10_record(7, np.full(3072, 255)))
    assert len(d) == 1 and d.labels[0] == 7 and d.num_classes == 10 and d.d_in == 3072
    assert np.all(d.features == 1.0)


def test_cifar10_channel_major_order():
    pix = np.concatenate([np.full(1024, 10), np.full(1024, 20), np.full(1024, 30)])
    d = parse_cifar10(cifar10_record(0, pix))
    np.testing.assert_array_equal(np.rint(d.features[0, [0, 1024, 2048]] * 255), [10, 20, 30])


def test_cifar_bad_length_reports_remainder():
    with pytest.raises(FormatError, match="remainder 5"):
        parse_cifar10(cifar10_record(1, np.zeros(3072)) + b"12345")
    with pytest.raises(FormatError):
        parse_cifar100(b"\x00" * 3073)


def test_cifar100_label_kinds():
    rec = bytes([3, 42]) + bytes(3072)
    fine = parse_cifar100(rec + rec)
    coarse = parse_cifar100(rec, label_kind="coarse")
    assert fine.num_classes == 100 and list(fine.labels) == [42, 42]
    assert coarse.num_classes == 20 and coarse.labels[0] == 3
    with pytest.raises(ConfigError):
        parse_cifar100(rec, label_kind="medium")


def test_cifar_round_trip():
    g = np.random.default_rng(3)
    raw = b"".join(cifar10_record(int(g.integers(10)), g.integers(0, 256, 3072)) for _ in range(3))
    d = parse_cifar10(raw)
    back = b"".join(cifar10_record(int(y), np.rint(x * 255)) for x, y in zip(d.features, d.labels))
    assert back == raw


def labelled(n_per_class, k=10, seed=0):
    labels = np.repeat(np.arange(k), n_per_class)
    np.random.default_rng(seed).shuffle(labels)
    return Dataset("toy", np.random.default_rng(seed).random((len(labels), 3)), labels, k)


def test_subsample_one_per_class():
    s = subsample(labelled(5), 10, seed=1)
    assert sorted(s.labels) == list(range(10))


def test_subsample_full_is_a_reordering():
    d = labelled(3)
    s = subsample(d, len(d), seed=2)
    assert sorted(map(tuple, s.features)) == sorted(map(tuple, d.features))


def test_subsample_is_deterministic_and_seeded():
    d = labelled(20)
    a, b = subsample(d, 37, 5), subsample(d, 37, 5)
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(subsample(d, 37, 6).features, a.features)


def test_subsample_errors():
    with pytest.raises(ConfigError):
        subsample(labelled(2), 9, 0)
    with pytest.raises(ConfigError):
        subsample(labelled(2), 21, 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 200), seed=st.integers(0, 1000))
def test_subsample_histogram_within_one(n, seed):
    s = subsample(labelled(20), n, seed)
    hist = np.bincount(s.labels, minlength=10)
    assert len(s) == n and hist.max() - hist.min() <= 1
    # remainder goes to the lowest classes
    assert list(hist) == sorted(hist, reverse=True)


def test_dataset_invariants():
    with pytest.raises(ConfigError):
        Dataset("bad", np.zeros((2, 2)), [0, 3], 3)
    with pytest.raises(ConfigError):
        Dataset("empty", np.zeros((0, 2)), [], 3)


def test_load_gzip_and_plain(tmp_path):
    folder = tmp_path / "mnist"
    folder.mkdir()
    pix = np.random.default_rng(0).integers(0, 256, (4, 28, 28), dtype=np.uint8)
    (folder / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(idx_images_bytes(pix)))
    (folder / "t10k-labels-idx1-ubyte").write_bytes(idx_labels_bytes([0, 1, 2, 9]))
    d = load_dataset("mnist", tmp_path, "test")
    assert d.d_in == 784 and len(d) == 4 and d.num_classes == 10
    with pytest.raises(FileNotFoundError):
        load_dataset("mnist", tmp_path, "train")
    with pytest.raises(ConfigError):
        load_dataset("svhn", tmp_path)


def test_bundled_mnist_subset(mnist_train, mnist_test):
    assert (len(mnist_train), len(mnist_test), mnist_train.d_in) == (4000, 1000, 784)
    assert mnist_train.features.min() >= 0 and mnist_train.features.max() <= 1
    assert np.all(np.bincount(mnist_train.labels) == 400)


OFFICIAL = Path(os.environ.get("MAL_OFFICIAL_DATA", "/nonexistent"))


def _need(*parts):
    if not (OFFICIAL.joinpath(*parts).exists() or OFFICIAL.joinpath(*parts[:-1], parts[-1] + ".gz").exists()):
        pytest.skip("official dataset files not available (set MAL_OFFICIAL_DATA)")


def test_official_mnist_sizes():
    _need("mnist", "train-images-idx3-ubyte")
    d = load_dataset("mnist", OFFICIAL, "train")
    assert (len(d), d.d_in) == (60000, 784)


def test_official_cifar10_batch():
    _need("cifar-10-batches-bin", "data_batch_1.bin")
    raw = (OFFICIAL / "cifar-10-batches-bin" / "data_batch_1.bin").read_bytes()
    d = parse_cifar10(raw)
    assert (len(d), d.d_in) == (10000, 3072)


def test_official_cifar100_fine():
    _need("cifar-100-binary", "test.bin")
    assert load_dataset("cifar100", OFFICIAL, "test").num_classes == 100
