import gzip
import struct

import numpy as np
import pytest

from countvae.data import (IMAGES_MAGIC, LABELS_MAGIC, Dataset, IdxFormatError, batch_indices,
                           load_idx, load_mnist, probe_split, read_idx, save_idx, split_and_batch,
                           subsample, synth_bars, write_idx)
from countvae.dist import RngStream


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


@pytest.fixture
def tiny_idx(tmp_path):
    imgs = np.array([[[0, 255], [128, 1]], [[255, 255], [0, 0]], [[7, 8], [9, 10]]], np.uint8)
    labels = np.array([3, 0, 9], np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(ip, imgs)
    write_idx(lp, labels)
    return ip, lp, imgs, labels


def test_load_idx_scaling(tiny_idx):
    ip, lp, imgs, labels = tiny_idx
    ds = load_idx(ip, lp)
    assert ds.images.shape == (3, 4)
    assert ds.image_shape == (2, 2)
    assert ds.images[0, 0] == 0.0 and ds.images[0, 1] == 1.0
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_header_layout(tiny_idx):
    ip, _, _, _ = tiny_idx
    raw = ip.read_bytes()
    assert struct.unpack(">I", raw[:4])[0] == IMAGES_MAGIC
    assert struct.unpack(">3I", raw[4:16]) == (3, 2, 2)


def test_labels_with_image_magic_rejected(tmp_path, tiny_idx):
    ip, _, _, _ = tiny_idx
    bad = tmp_path / "bad.idx"
    bad.write_bytes(idx_bytes(IMAGES_MAGIC, [3], [1, 2, 3]))
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(ip, bad)


def test_truncated_and_trailing(tmp_path):
    p = tmp_path / "t.idx"
    p.write_bytes(idx_bytes(LABELS_MAGIC, [5], [1, 2, 3]))
    with pytest.raises(IdxFormatError, match="truncated"):
        read_idx(p, LABELS_MAGIC)
    p.write_bytes(idx_bytes(LABELS_MAGIC, [2], [1, 2, 3]))
    with pytest.raises(IdxFormatError, match="trailing"):
        read_idx(p, LABELS_MAGIC)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError):
        read_idx(p)


def test_count_mismatch(tmp_path, tiny_idx):
    ip, _, _, _ = tiny_idx
    lp = tmp_path / "l.idx"
    write_idx(lp, np.array([1, 2], np.uint8))
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(ip, lp)


def test_roundtrip_byte_identical(tmp_path, tiny_idx):
    ip, lp, _, _ = tiny_idx
    ds = load_idx(ip, lp)
    ip2, lp2 = tmp_path / "i2.idx", tmp_path / "l2.idx"
    save_idx(ds, ip2, lp2)
    assert ip2.read_bytes() == ip.read_bytes()
    assert lp2.read_bytes() == lp.read_bytes()


def test_bundled_mnist(mnist_dir, tmp_path):
    for split in ("train", "test"):
        ds = load_mnist(mnist_dir, split)
        stem = "train" if split == "train" else "t10k"
        with gzip.open(mnist_dir / f"{stem}-images-idx3-ubyte.gz") as fh:
            raw = fh.read()
        n_header = struct.unpack(">I", raw[4:8])[0]
        assert len(ds) == n_header
        assert ds.n_features == 784 and ds.image_shape == (28, 28)
        assert set(np.unique(ds.labels)) == set(range(10))
        out_i, out_l = tmp_path / f"{split}-i", tmp_path / f"{split}-l"
        save_idx(ds, out_i, out_l)
        assert out_i.read_bytes() == raw


def test_load_mnist_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path / "nope")
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 4)), np.zeros(2, int), "x")
    with pytest.raises(ValueError):
        Dataset(np.zeros(3), np.zeros(3, int), "x")


def test_synth_bars_properties():
    ds = synth_bars(500, 6, RngStream(1))
    assert set(np.unique(ds.images)) <= {0.0, 1.0}
    imgs = ds.images.reshape(-1, 6, 6)
    full_rows = (imgs == 1).all(axis=2).sum(axis=1)
    full_cols = (imgs == 1).all(axis=1).sum(axis=1)
    np.testing.assert_array_equal(full_rows + full_cols, ds.labels + 1)


def test_synth_bars_deterministic():
    a, b = synth_bars(200, 8, RngStream(4)), synth_bars(200, 8, RngStream(4))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synth_bars_balance():
    ds = synth_bars(3000, 8, RngStream(2))
    freq = np.bincount(ds.labels, minlength=3) / 3000
    assert np.all(np.abs(freq - 1 / 3) < 0.1 / 3)


def test_synth_bars_side_check():
    with pytest.raises(ValueError):
        synth_bars(10, 3, RngStream(0))


def test_batches():
    ds = Dataset(np.arange(20.0).reshape(10, 2), np.zeros(10, int), "t")
    sizes = [len(x) for x, _ in split_and_batch(ds, 3, seed=5)]
    assert sizes == [3, 3, 3, 1]
    a = [x.copy() for x, _ in split_and_batch(ds, 3, seed=5)]
    b = [x.copy() for x, _ in split_and_batch(ds, 3, seed=5)]
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    c = np.concatenate([x for x, _ in split_and_batch(ds, 3, seed=5, epoch=1)])
    assert not np.array_equal(np.concatenate(a), c)
    assert sorted(np.concatenate(a)[:, 0]) == sorted(c[:, 0])
    with pytest.raises(ValueError):
        batch_indices(10, 0)


def test_probe_split_disjoint_and_covering():
    a, b = probe_split(10_000, RngStream(3))
    assert len(a) == len(b) == 5000
    assert not np.intersect1d(a, b).size
    np.testing.assert_array_equal(np.union1d(a, b), np.arange(10_000))
    with pytest.raises(ValueError):
        probe_split(100, RngStream(3), half=60)


def test_subsample():
    ds = synth_bars(300, 5, RngStream(0))
    sub = subsample(ds, 100, RngStream(1))
    assert len(sub) == 100
    again = subsample(ds, 100, RngStream(1))
    np.testing.assert_array_equal(sub.images, again.images)
    assert subsample(ds, 1000, RngStream(1)) is ds
