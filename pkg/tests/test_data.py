import struct

import numpy as np
import pytest

from prunix.data import DataError, load_dataset, read_csv, read_idx, split_dataset, write_digits_corpus


def write_csv(path, rows, header=True):
    lines = (["label,p0,p1,p2,p3"] if header else []) + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


FOUR = [[0, 0, 0, 0, 255], [1, 255, 0, 0, 0], [0, 10, 20, 30, 40], [1, 0, 0, 0, 0]]


def write_idx(path, array):
    array = np.asarray(array, np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.tobytes())
    return path


class TestCSV:
    def test_four_rows_split(self, tmp_path):
        ds = load_dataset(write_csv(tmp_path / "d.csv", FOUR), fractions=(0.75, 0.0, 0.25),
                          num_classes=2)
        assert ds.sizes == (3, 0, 1)
        assert ds.image_shape == (1, 2, 2)

    def test_normalization(self, tmp_path):
        X, y = read_csv(write_csv(tmp_path / "d.csv", FOUR))
        assert X[0, 0, 1, 1] == 1.0 and X[0].min() == 0.0
        assert X.dtype == np.float32
        np.testing.assert_array_equal(y, [0, 1, 0, 1])

    def test_header_optional(self, tmp_path):
        a = read_csv(write_csv(tmp_path / "a.csv", FOUR))
        b = read_csv(write_csv(tmp_path / "b.csv", FOUR, header=False))
        np.testing.assert_array_equal(a[0], b[0])

    def test_same_seed_same_split(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", FOUR * 5)
        a = load_dataset(path, seed=3, fractions=(0.5, 0.25, 0.25))
        b = load_dataset(path, seed=3, fractions=(0.5, 0.25, 0.25))
        c = load_dataset(path, seed=4, fractions=(0.5, 0.25, 0.25))
        np.testing.assert_array_equal(a.X_train, b.X_train)
        assert not np.array_equal(a.X_train, c.X_train)

    @pytest.mark.parametrize("rows, match", [
        ([[0, 1, 2, 3, 4], [1, 1, 2]], "expected 4 pixels"),
        ([[0, 1, 2, 3, 4], [1, "x", 2, 3, 4]], "non-numeric"),
        ([[0.5, 1, 2, 3, 4]], "not an integer"),
        ([[0, 1, 2, 3, 4], [5, 1, 2, 3, 4]], "out of range"),
        ([[-1, 1, 2, 3, 4]], "out of range"),
        ([[0, 1, 2, 3]], "square"),
    ])
    def test_malformed(self, tmp_path, rows, match):
        with pytest.raises(DataError, match=match):
            read_csv(write_csv(tmp_path / "d.csv", rows), num_classes=2)

    def test_empty(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            read_csv(write_csv(tmp_path / "d.csv", []))

    def test_missing_file_and_format(self, tmp_path):
        with pytest.raises(DataError, match="no such file"):
            load_dataset(tmp_path / "nope.csv")
        with pytest.raises(DataError, match="format"):
            load_dataset(write_csv(tmp_path / "d.csv", FOUR), format="png")


class TestIDX:
    def test_round_trip(self, tmp_path):
        imgs = np.arange(2 * 3 * 3).reshape(2, 3, 3) * 10
        write_idx(tmp_path / "train-images.idx", imgs)
        write_idx(tmp_path / "train-labels.idx", [1, 0])
        X, y = read_idx(tmp_path / "train-images.idx")
        np.testing.assert_allclose(X[:, 0], imgs / 255.0, rtol=1e-6)
        np.testing.assert_array_equal(y, [1, 0])

    def test_load_dataset_idx(self, tmp_path):
        write_idx(tmp_path / "images.idx", np.zeros((4, 2, 2)))
        write_idx(tmp_path / "labels.idx", [0, 1, 0, 1])
        ds = load_dataset(tmp_path / "images.idx", format="idx", fractions=(0.75, 0, 0.25))
        assert ds.sizes == (3, 0, 1)

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "images.idx", np.zeros((3, 2, 2)))
        write_idx(tmp_path / "labels.idx", [0, 1])
        with pytest.raises(DataError, match="counts differ"):
            read_idx(tmp_path / "images.idx")

    def test_bad_header(self, tmp_path):
        (tmp_path / "images.idx").write_bytes(b"\x00\x00\x0d\x01\x00\x00\x00\x01abcd")
        with pytest.raises(DataError, match="unsigned-byte"):
            read_idx(tmp_path / "images.idx", tmp_path / "images.idx")

    def test_truncated(self, tmp_path):
        (tmp_path / "images.idx").write_bytes(struct.pack(">HBBI", 0, 8, 1, 5) + b"ab")
        with pytest.raises(DataError, match="payload"):
            read_idx(tmp_path / "images.idx", tmp_path / "images.idx")


class TestSplit:
    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            split_dataset(np.zeros((4, 1, 2, 2)), np.zeros(4, int), (0.5, 0.2, 0.2))

    def test_partition(self):
        y = np.arange(10)
        ds = split_dataset(y[:, None, None, None].astype(float), y, (0.7, 0.1, 0.2), seed=1)
        assert ds.sizes == (7, 1, 2)
        assert sorted(np.concatenate([ds.y_train, ds.y_val, ds.y_test]).tolist()) == list(range(10))


def test_digits_corpus(tmp_path):
    X, y = read_csv(write_digits_corpus(tmp_path / "digits.csv"), num_classes=10)
    assert X.shape == (1797, 1, 8, 8)
    assert X.max() == 1.0 and X.min() == 0.0
    assert np.bincount(y).min() >= 170
