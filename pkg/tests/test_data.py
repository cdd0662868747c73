import struct

import numpy as np
import pytest

from advlab import data


# ------------------------------------------------------------------ Dataset

def test_dataset_validation():
    ok = np.zeros((2, 1, 4, 4), np.float32)
    data.Dataset(ok, np.array([0, 9]), "train")
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 4, 4)), np.array([0, 1]), "train")
    with pytest.raises(ValueError):
        data.Dataset(ok, np.array([0]), "train")
    with pytest.raises(ValueError):
        data.Dataset(ok + 1.5, np.array([0, 1]), "train")
    with pytest.raises(ValueError):
        data.Dataset(ok - 0.5, np.array([0, 1]), "train")
    with pytest.raises(ValueError):
        data.Dataset(ok, np.array([0, 10]), "train")
    with pytest.raises(ValueError):
        data.Dataset(ok, np.array([-1, 1]), "train")


def _tiny_ds(n=10):
    imgs = np.linspace(0, 1, n * 16, dtype=np.float32).reshape(n, 1, 4, 4)
    return data.Dataset(imgs, np.arange(n) % 10, "train")


def test_subset_first():
    ds = _tiny_ds()
    sub = data.subset(ds, "first:4")
    assert len(sub) == 4
    assert np.array_equal(sub.images, ds.images[:4])
    assert np.array_equal(sub.labels, ds.labels[:4])
    assert sub.subset == "first:4"


def test_subset_sample_deterministic_no_repeats():
    ds = _tiny_ds(50)
    a = data.subset(ds, "sample:20", seed=5)
    b = data.subset(ds, "sample:20", seed=5)
    c = data.subset(ds, "sample:20", seed=6)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)
    # sorted unique rows: every selected image occurs once in the source
    assert len(np.unique(a.images.reshape(20, -1), axis=0)) == 20


def test_subset_bad_specs():
    ds = _tiny_ds()
    for spec in ("first:x", "weird:3", "first:-1", "first:11", "first;3"):
        with pytest.raises(ValueError):
            data.subset(ds, spec)


# ---------------------------------------------------------------- IDX files

def test_idx_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(7, 5, 5), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    ip, lp = str(tmp_path / "t-images"), str(tmp_path / "t-labels")
    data.write_idx(imgs, labels, ip, lp)
    ds = data.load_idx(ip, lp)
    assert ds.images.shape == (7, 1, 5, 5)
    assert np.array_equal(ds.images, imgs[:, None].astype(np.float32) / 255.0)
    assert np.array_equal(ds.labels, labels.astype(np.int64))
    # write(load(write(x))) reproduces the files byte for byte
    ip2, lp2 = str(tmp_path / "u-images"), str(tmp_path / "u-labels")
    data.write_idx((ds.images[:, 0] * 255.0).round().astype(np.uint8),
                   ds.labels.astype(np.uint8), ip2, lp2)
    assert open(ip, "rb").read() == open(ip2, "rb").read()
    assert open(lp, "rb").read() == open(lp2, "rb").read()


def test_idx_all_255_single_image(tmp_path):
    ip, lp = str(tmp_path / "i"), str(tmp_path / "l")
    with open(ip, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 1, 2, 2) + b"\xff" * 4)
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 1) + b"\x07")
    ds = data.load_idx(ip, lp)
    assert np.all(ds.images == 1.0)
    assert ds.labels[0] == 7


def test_idx_wrong_magic(tmp_path):
    ip, lp = str(tmp_path / "i"), str(tmp_path / "l")
    with open(ip, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000804, 1, 2, 2) + b"\x00" * 4)
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 1) + b"\x00")
    with pytest.raises(data.DataFormatError, match="magic"):
        data.load_idx(ip, lp)


def test_idx_truncated_pixels(tmp_path):
    ip, lp = str(tmp_path / "i"), str(tmp_path / "l")
    with open(ip, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 5)
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 2) + b"\x00\x01")
    with pytest.raises(data.DataFormatError, match="expected 8 pixel bytes"):
        data.load_idx(ip, lp)


def test_idx_truncated_header(tmp_path):
    ip = str(tmp_path / "i")
    with open(ip, "wb") as fh:
        fh.write(b"\x00\x00\x08")
    with pytest.raises(data.DataFormatError):
        data.load_idx(ip, ip)


def test_idx_count_mismatch(tmp_path):
    ip, lp = str(tmp_path / "i"), str(tmp_path / "l")
    with open(ip, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 1, 2, 2) + b"\x00" * 4)
    with open(lp, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 2) + b"\x00\x01")
    with pytest.raises(data.DataFormatError, match="label count 2"):
        data.load_idx(ip, lp)


# -------------------------------------------------------------- CIFAR binary

def test_cifar_record_arithmetic(tmp_path):
    # record 0: label 3, red plane full on; record 1: label 5, all dark
    rec0 = bytes([3]) + b"\xff" * 1024 + b"\x00" * 2048
    rec1 = bytes([5]) + b"\x00" * 3072
    path = str(tmp_path / "train_batch.bin")
    with open(path, "wb") as fh:
        fh.write(rec0 + rec1)
    ds = data.load_cifar_binary(path)
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.split == "train"
    assert np.array_equal(ds.labels, [3, 5])
    assert np.all(ds.images[0, 0] == 1.0)      # red plane
    assert np.all(ds.images[0, 1:] == 0.0)     # green/blue planes
    assert np.all(ds.images[1] == 0.0)


def test_cifar_truncated_record(tmp_path):
    path = str(tmp_path / "test_batch.bin")
    with open(path, "wb") as fh:
        fh.write(b"\x00" * 3072)  # one byte short of a record
    with pytest.raises(data.DataFormatError, match="3073"):
        data.load_cifar_binary(path)


# --------------------------------------------------------- synthetic corpus

def test_synth_digits_shapes_and_determinism():
    a_i, a_l = data.synth_digits(30, seed=11)
    b_i, b_l = data.synth_digits(30, seed=11)
    c_i, _ = data.synth_digits(30, seed=12)
    assert a_i.shape == (30, 28, 28) and a_i.dtype == np.uint8
    assert np.array_equal(a_i, b_i) and np.array_equal(a_l, b_l)
    assert not np.array_equal(a_i, c_i)
    # all ten classes present and roughly balanced
    counts = np.bincount(a_l, minlength=10)
    assert counts.min() == 3 and counts.max() == 3


def test_synth_digits_are_distinguishable():
    """Same-class images correlate more than cross-class on average."""
    imgs, labels = data.synth_digits(100, seed=0)
    flat = imgs.reshape(100, -1).astype(np.float64)
    flat -= flat.mean(axis=1, keepdims=True)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    sim = flat @ flat.T
    same = sim[labels[:, None] == labels[None, :]]
    diff = sim[labels[:, None] != labels[None, :]]
    assert same.mean() > diff.mean() + 0.1


def test_synth_idx_round_trip_matches_memory(tmp_path):
    paths = data.write_synth_idx(str(tmp_path), 20, 8, seed=3)
    train = data.load_idx(*paths["train"])
    test = data.load_idx(*paths["test"])
    mem_train, mem_test = data.load_synth(20, 8, seed=3)
    assert np.array_equal(train.images, mem_train.images)
    assert np.array_equal(train.labels, mem_train.labels)
    assert np.array_equal(test.images, mem_test.images)
    assert np.array_equal(test.labels, mem_test.labels)
