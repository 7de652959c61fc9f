import struct

import numpy as np
import pytest

from calgp import data
from calgp.data import IdxFormatError
from calgp.tensor_core import Rng

# two 2x2 images and their labels, byte by byte
IMAGES = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 102, 255, 255, 255, 255, 0])
LABELS = bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 1])


@pytest.fixture
def fixture_pair(tmp_path):
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    img.write_bytes(IMAGES)
    lab.write_bytes(LABELS)
    return img, lab


def test_hand_built_fixture(fixture_pair):
    ds = data.load_idx_pair(*fixture_pair, num_classes=10)
    assert ds.images.shape == (2, 1, 2, 2)
    assert np.array_equal(ds.images[0, 0], [[0.0, 0.2], [0.4, 1.0]])
    assert np.array_equal(ds.images[1, 0], [[1.0, 1.0], [1.0, 0.0]])
    assert ds.targets.tolist() == [7, 1]
    assert ds.labels_onehot.shape == (2, 10)


def test_round_trip_is_byte_exact(fixture_pair, tmp_path):
    img, lab = fixture_pair
    out_img, out_lab = tmp_path / "a", tmp_path / "b"
    data.write_idx_images(out_img, data.read_idx_images(img))
    data.write_idx_labels(out_lab, data.read_idx_labels(lab))
    assert out_img.read_bytes() == IMAGES and out_lab.read_bytes() == LABELS


def test_bad_magic_names_both(tmp_path, fixture_pair):
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">I", 0x00000801) + IMAGES[4:])
    with pytest.raises(IdxFormatError, match="0x00000803.*0x00000801"):
        data.read_idx_images(bad)


@pytest.mark.parametrize("cut", [3, 10, len(IMAGES) - 1])
def test_truncated_file(tmp_path, cut):
    p = tmp_path / "t"
    p.write_bytes(IMAGES[:cut])
    with pytest.raises(IdxFormatError):
        data.read_idx_images(p)


def test_count_mismatch(tmp_path, fixture_pair):
    img, _ = fixture_pair
    lab = tmp_path / "l3"
    data.write_idx_labels(lab, [1, 2, 3])
    with pytest.raises(IdxFormatError, match="2 images.*3 labels"):
        data.load_idx_pair(img, lab)


def test_full_white_image_is_ones(tmp_path):
    img, lab = tmp_path / "i", tmp_path / "l"
    data.write_idx_images(img, np.full((1, 3, 3), 255))
    data.write_idx_labels(lab, [0])
    assert np.all(data.load_idx_pair(img, lab).images == 1.0)


def _labelled(n_per, q):
    targets = np.repeat(np.arange(q), n_per)
    images = np.arange(targets.size, dtype=float).reshape(-1, 1, 1, 1) / targets.size
    return data.Dataset(images, data.one_hot(targets, q))


def test_balanced_subsample_full_is_permutation():
    ds = _labelled(5, 3)
    sub = data.balanced_subsample(ds, 15, Rng(0))
    assert sorted(sub.images.ravel().tolist()) == sorted(ds.images.ravel().tolist())


def test_balanced_subsample_one_per_class():
    sub = data.balanced_subsample(_labelled(5, 4), 4, Rng(1))
    assert sorted(sub.targets.tolist()) == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(5))
def test_balanced_subsample_histogram_exact(seed):
    rng = Rng(seed)
    targets = (rng.uniform(500) * 4).astype(int)
    ds = data.Dataset(rng.child("x").uniform((500, 1, 2, 2)), data.one_hot(targets, 4))
    sub = data.balanced_subsample(ds, 80, rng.child("s"))
    assert np.bincount(sub.targets, minlength=4).tolist() == [20, 20, 20, 20]


def test_balanced_subsample_errors():
    ds = _labelled(3, 2)
    with pytest.raises(ValueError, match="divisible"):
        data.balanced_subsample(ds, 5, Rng(0))
    with pytest.raises(ValueError, match="class 0"):
        data.balanced_subsample(ds, 8, Rng(0))


def test_subsample_deterministic_and_non_mutating():
    ds = _labelled(10, 2)
    before = ds.images.copy()
    a = data.balanced_subsample(ds, 6, Rng(3))
    b = data.balanced_subsample(ds, 6, Rng(3))
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(ds.images, before)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 5.0


def test_minibatches_partition():
    for epoch in range(3):
        batches = list(data.minibatches(103, 10, Rng(0).child(epoch)))
        idx = np.concatenate(batches)
        assert sorted(idx.tolist()) == list(range(103))
        assert [len(b) for b in batches] == [10] * 10 + [3]


def test_minibatches_deterministic():
    a = [b.tolist() for b in data.minibatches(20, 7, Rng(5))]
    b = [b.tolist() for b in data.minibatches(20, 7, Rng(5))]
    assert a == b


def test_blobs_separable():
    ds = data.synthetic_blobs(4000, 2, 2, 10.0, Rng(0))
    x = ds.images.reshape(ds.n, 2)
    centers = data.blob_centers(2, 2, 10.0)
    pred = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred != ds.targets) < 0.01
    assert np.bincount(ds.targets).tolist() == [2000, 2000]


def test_blobs_zero_separation_is_chance():
    ds = data.synthetic_blobs(20_000, 4, 2, 0.0, Rng(1))
    x = ds.images.reshape(ds.n, 2)
    # without separation any fixed rule is right about 1/Q of the time
    pred = (x[:, 0] > 0).astype(int) + 2 * (x[:, 1] > 0).astype(int)
    assert abs(np.mean(pred != ds.targets) - 0.75) < 0.02


def test_blobs_too_many_classes():
    with pytest.raises(ValueError):
        data.synthetic_blobs(10, 5, 2, 1.0, Rng(0))


def test_permuted_pixels_flagged_and_same_pixels():
    ds = _labelled(4, 2)
    ds = data.Dataset(Rng(0).uniform((8, 1, 4, 4)), ds.labels_onehot)
    p = data.permuted_pixels(ds, Rng(1))
    assert "substitute" in p.meta
    assert np.array_equal(np.sort(p.images.reshape(8, -1), axis=1), np.sort(ds.images.reshape(8, -1), axis=1))
    assert not np.array_equal(p.images, ds.images)


def test_one_hot_range_check():
    with pytest.raises(ValueError):
        data.one_hot([0, 3], 3)
