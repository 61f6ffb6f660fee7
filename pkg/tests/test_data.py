import struct

import numpy as np
import pytest

from m2d import data
from m2d.data import DataError, Dataset, SplitPlan


def test_blobs_vanishing_spread_sits_on_centers():
    d = data.gen_blobs(2, 5, [[1.0, 2.0], [-3.0, 0.5]], 1e-14, seed=4)
    assert len(d) == 10 and d.num_classes == 2
    for c, center in enumerate([[1.0, 2.0], [-3.0, 0.5]]):
        np.testing.assert_allclose(d.features[d.labels == c], np.broadcast_to(center, (5, 2)), atol=1e-12)
    with pytest.raises(DataError):
        data.gen_blobs(2, 5, [[1.0, 2.0], [-3.0, 0.5]], 0.0, seed=4)


def test_blob_means_near_centers():
    centers = np.array([[0.0, 0.0], [4.0, 0.0], [2.0, 3.5]])
    n, spread = 400, 0.7
    d = data.gen_blobs(3, n, centers, spread, 0)
    for c in range(3):
        err = np.abs(d.features[d.labels == c].mean(axis=0) - centers[c])
        assert np.all(err <= 3 * spread / np.sqrt(n))


def test_blobs_deterministic():
    a = data.gen_blobs(3, 20, [[0, 0], [4, 0], [2, 3]], 0.7, 11)
    b = data.gen_blobs(3, 20, [[0, 0], [4, 0], [2, 3]], 0.7, 11)
    c = data.gen_blobs(3, 20, [[0, 0], [4, 0], [2, 3]], 0.7, 12)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.features.tobytes() != c.features.tobytes()


def test_ood_blob():
    d = data.gen_ood_blob([9.0, 9.0], 7, 1e-14, 1)
    assert d.labels is None
    np.testing.assert_allclose(d.features, 9.0, atol=1e-12)
    assert data.gen_ood_blob([9.0, 9.0], 7, 0.5, 1).features.tobytes() == data.gen_ood_blob([9.0, 9.0], 7, 0.5, 1).features.tobytes()
    with pytest.raises(DataError):
        data.gen_ood_blob([0.0, 0.0], 5, 0.5, 1, in_centers=[[0.0, 0.0], [3.0, 1.0]])


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(DataError):
        Dataset(np.array([[np.inf]]), None)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), np.array([0, -1]))


def _write_fixture(tmp_path):
    img = tmp_path / "img.idx3"
    lab = tmp_path / "lab.idx1"
    img.write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 10, 20, 30, 40]))
    lab.write_bytes(struct.pack(">2I", 0x801, 2) + bytes([3, 7]))
    return img, lab


def test_idx_fixture(tmp_path):
    img, lab = _write_fixture(tmp_path)
    d = data.load_idx(img, lab)
    assert d.features.shape == (2, 2, 2, 1)
    np.testing.assert_array_equal(d.features[0, :, :, 0], [[0.0, 1.0], [0.2, 0.4]])
    np.testing.assert_array_equal(d.features[1, :, :, 0], np.array([[10, 20], [30, 40]]) / 255.0)
    assert list(d.labels) == [3, 7]


def test_idx_round_trip(tmp_path):
    img, lab = _write_fixture(tmp_path)
    d = data.load_idx(img, lab)
    pixels = np.round(d.features[..., 0] * 255).astype(np.uint8)
    data.write_idx(pixels, d.labels, tmp_path / "b.idx3", tmp_path / "b.idx1")
    assert (tmp_path / "b.idx3").read_bytes() == img.read_bytes()
    assert (tmp_path / "b.idx1").read_bytes() == lab.read_bytes()


def test_idx_errors(tmp_path):
    img, _ = _write_fixture(tmp_path)
    bad = tmp_path / "bad.idx1"
    bad.write_bytes(struct.pack(">2I", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(DataError, match="labels"):
        data.load_idx(img, bad)
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(DataError, match="magic"):
        data.load_idx(empty)
    short = tmp_path / "short"
    short.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(DataError, match="truncated"):
        data.load_idx(short)


def test_csv_round_trip(tmp_path):
    d = data.gen_blobs(2, 4, [[0, 0], [3, 3]], 0.5, 0)
    p = tmp_path / "d.csv"
    p.write_text(data.to_csv(d))
    back = data.load_csv(p)
    assert back.features.tobytes() == d.features.tobytes()
    assert np.array_equal(back.labels, d.labels)
    p.write_text("x0,x1\n1,oops\n")
    with pytest.raises(DataError):
        data.load_csv(p, labelled=False)


def test_normalize_constant_column():
    train = Dataset(np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]), None)
    other = Dataset(np.array([[3.0, 5.0]]), None)
    tn, on = data.normalize(train, other)
    assert np.all(tn.features[:, 1] == 0.0)
    assert tn.provenance["normalization"]["clamped_dims"] == [1]
    assert tn.features[:, 0].mean() == pytest.approx(0.0)
    assert on.features[0, 0] == pytest.approx(0.0)
    with pytest.raises(DataError, match="already"):
        data.normalize(tn)


def test_split_sizes_and_balance():
    d = data.gen_blobs(2, 50, [[0, 0], [5, 5]], 1.0, 0)
    parts = data.split(d, SplitPlan(0.8, 0.1, 0.1, 20), seed=3)
    assert [len(parts[k]) for k in ("train", "fit", "test", "detector_subset")] == [80, 10, 10, 20]
    for k in ("train", "fit", "test", "detector_subset"):
        counts = np.bincount(parts[k].labels, minlength=2)
        assert abs(counts[0] - counts[1]) <= 1, k
    again = data.split(d, SplitPlan(0.8, 0.1, 0.1, 20), seed=3)
    assert all(parts[k].features.tobytes() == again[k].features.tobytes() for k in parts)


def test_split_is_disjoint_and_subset_inside_train():
    d = data.gen_blobs(3, 30, [[0, 0], [5, 5], [9, 0]], 1.0, 0)
    parts = data.split(d, SplitPlan(0.6, 0.2, 0.2, 10), seed=0)
    rows = {k: {r.tobytes() for r in parts[k].features} for k in parts}
    assert not rows["train"] & rows["fit"] and not rows["train"] & rows["test"] and not rows["fit"] & rows["test"]
    assert rows["detector_subset"] <= rows["train"]
    assert sum(len(parts[k]) for k in ("train", "fit", "test")) == 90


def test_split_plan_validation():
    with pytest.raises(DataError):
        SplitPlan(0.5, 0.2, 0.2)
    with pytest.raises(DataError):
        data.split(data.gen_blobs(2, 5, [[0, 0], [1, 1]], 1.0, 0), SplitPlan(0.6, 0.2, 0.2, 50), 0)


def test_image_corpora(tmp_path):
    pytest.importorskip("sklearn")
    paths = data.write_image_corpora(tmp_path, n_ood=20, seed=0)
    d_in = data.load_idx(paths["in_images"], paths["in_labels"])
    d_out = data.load_idx(paths["ood_images"])
    assert d_in.features.shape[1:] == d_out.features.shape[1:] == (8, 8, 1)
    assert d_in.num_classes == 10 and len(d_out) == 20
