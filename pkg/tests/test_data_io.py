import gzip
import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpkan.data_io import (IMAGES_MAGIC, LABELS_MAGIC, BadMagic, DimensionOverflow, LabeledImageSet,
                           SplitError, TruncatedPayload, encode_idx, load_idx_images, load_idx_labels, load_mnist,
                           one_hot, parse_idx, split, toy_dataset, toy_target, write_idx)

# two 2x2 images, laid out byte by byte
TWO_IMAGES = bytes.fromhex(
    "00000803" "00000002" "00000002" "00000002"
    "00ff" "807f"
    "0102" "0304"
)
THREE_LABELS = bytes.fromhex("00000801" "00000003" "070009")

MNIST_DIR = Path(os.environ.get("GPKAN_MNIST_DIR", "/root/data/mnist"))


def image_set(n, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledImageSet(rng.uniform(0, 1, (n, 1, 2, 2)), rng.integers(0, 10, n))


class TestIDX:
    def test_hand_built_images(self, tmp_path):
        path = tmp_path / "img.idx"
        path.write_bytes(TWO_IMAGES)
        grids = load_idx_images(path)
        assert grids.shape == (2, 2, 2)
        np.testing.assert_array_equal(grids[0] * 255, [[0, 255], [128, 127]])
        np.testing.assert_array_equal(grids[1] * 255, [[1, 2], [3, 4]])
        assert grids[0, 0, 1] == 1.0

    def test_hand_built_labels(self, tmp_path):
        path = tmp_path / "lab.idx"
        path.write_bytes(THREE_LABELS)
        np.testing.assert_array_equal(load_idx_labels(path), [7, 0, 9])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.idx"
        path.write_bytes(b"")
        with pytest.raises(TruncatedPayload):
            load_idx_images(path)

    def test_label_loader_rejects_image_magic(self, tmp_path):
        path = tmp_path / "lab.idx"
        path.write_bytes(TWO_IMAGES)
        with pytest.raises(BadMagic):
            load_idx_labels(path)

    def test_short_payload(self):
        with pytest.raises(TruncatedPayload):
            parse_idx(TWO_IMAGES[:-1], IMAGES_MAGIC)

    def test_short_header(self):
        with pytest.raises(TruncatedPayload):
            parse_idx(TWO_IMAGES[:10], IMAGES_MAGIC)

    def test_overflowing_dimensions(self):
        raw = bytes.fromhex("00000803" "0000ffff" "0000ffff" "0000ffff")
        with pytest.raises(DimensionOverflow):
            parse_idx(raw, IMAGES_MAGIC)

    def test_trailing_bytes(self):
        with pytest.raises(DimensionOverflow):
            parse_idx(THREE_LABELS + b"\x00", LABELS_MAGIC)

    def test_errors_are_distinct(self):
        kinds = [BadMagic, TruncatedPayload, DimensionOverflow]
        assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)

    def test_gzip_by_suffix(self, tmp_path):
        path = tmp_path / "img.idx.gz"
        path.write_bytes(gzip.compress(TWO_IMAGES))
        np.testing.assert_array_equal(load_idx_images(path), load_idx_images_from_bytes(tmp_path, TWO_IMAGES))

    def test_encode_matches_hand_bytes(self):
        grids = np.array([[[0, 255], [128, 127]], [[1, 2], [3, 4]]], dtype=np.uint8)
        assert encode_idx(grids) == TWO_IMAGES

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=3), st.integers(0, 2**31))
    def test_round_trip_raw_bytes(self, shape, seed):
        data = np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)
        raw = encode_idx(data)
        back = parse_idx(raw, 0x0800 | len(shape))
        assert back.shape == tuple(shape)
        assert encode_idx(back) == raw

    def test_write_read(self, tmp_path):
        data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        write_idx(tmp_path / "x.idx", data)
        np.testing.assert_array_equal(load_idx_images(tmp_path / "x.idx") * 255, data)

    def test_load_mnist_adds_channel(self, tmp_path):
        (tmp_path / "i").write_bytes(TWO_IMAGES)
        (tmp_path / "l").write_bytes(bytes.fromhex("00000801" "00000002" "0305"))
        s = load_mnist(tmp_path / "i", tmp_path / "l")
        assert s.images.shape == (2, 1, 2, 2) and len(s) == 2

    def test_image_label_count_mismatch(self, tmp_path):
        (tmp_path / "i").write_bytes(TWO_IMAGES)
        (tmp_path / "l").write_bytes(THREE_LABELS)
        with pytest.raises(ValueError):
            load_mnist(tmp_path / "i", tmp_path / "l")


def load_idx_images_from_bytes(tmp_path, raw):
    path = tmp_path / "plain.idx"
    path.write_bytes(raw)
    return load_idx_images(path)


class TestOneHot:
    def test_rows(self):
        np.testing.assert_array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])

    @given(st.lists(st.integers(0, 9), min_size=1, max_size=50))
    def test_exactly_one_per_row(self, labels):
        enc = one_hot(labels)
        np.testing.assert_array_equal(enc.sum(axis=1), 1.0)
        np.testing.assert_array_equal(enc.argmax(axis=1), labels)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot([10])


class TestToy:
    def test_origin(self):
        assert toy_target(0.0, 0.0) == 1.0

    def test_quarter_turn(self):
        assert toy_target(0.5, 0.0) == pytest.approx(math.e, rel=1e-15)

    def test_corner(self):
        assert toy_target(-0.5, 0.5) == pytest.approx(math.exp(-0.75), rel=1e-15)
        assert toy_target(-0.5, 0.5) == pytest.approx(0.47237, abs=5e-6)

    def test_generation(self):
        data = toy_dataset(500, seed=3)
        assert data.inputs.shape == (500, 2)
        assert np.all(np.abs(data.inputs) <= 0.5)
        assert np.array_equal(data.targets, toy_target(data.inputs[:, 0], data.inputs[:, 1]))

    def test_seeded(self):
        assert np.array_equal(toy_dataset(10, 4).inputs, toy_dataset(10, 4).inputs)
        assert not np.array_equal(toy_dataset(10, 4).inputs, toy_dataset(10, 5).inputs)

    def test_empty(self):
        with pytest.raises(ValueError):
            toy_dataset(0, 0)


class TestSplit:
    def test_all_train(self):
        pool = image_set(20)
        train, val, test = split(pool, (20, 0, 0), seed=0)
        assert (len(train), len(val), len(test)) == (20, 0, 0)
        assert sorted(train.labels.tolist()) == sorted(pool.labels.tolist())

    def test_same_seed(self):
        pool = image_set(30)
        a, b = split(pool, (10, 5, 5), 7), split(pool, (10, 5, 5), 7)
        for x, y in zip(a, b):
            assert np.array_equal(x.images, y.images)

    def test_disjoint(self):
        pool = LabeledImageSet(np.arange(40.0).reshape(10, 1, 2, 2) / 40, np.arange(10))
        train, val, test = split(pool, (5, 3, 2), 1)
        ids = np.concatenate([train.labels, val.labels, test.labels])
        assert sorted(ids.tolist()) == list(range(10))

    def test_test_file_kept_apart(self):
        pool, test_file = image_set(30, 0), image_set(8, 1)
        train, val, test = split(pool, (20, 5, 6), 2, test_set=test_file)
        np.testing.assert_array_equal(test.images, test_file.images[:6])
        assert len(train) == 20 and len(val) == 5

    def test_overflow(self):
        with pytest.raises(SplitError):
            split(image_set(10), (8, 3, 0), 0)
        with pytest.raises(SplitError):
            split(image_set(10), (5, 5, 9), 0, test_set=image_set(4))

    @pytest.mark.skipif(not (MNIST_DIR / "train-images-idx3-ubyte").exists(), reason="MNIST files not present")
    def test_reference_split(self):
        pool = load_mnist(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")
        test_file = load_mnist(MNIST_DIR / "t10k-images-idx3-ubyte", MNIST_DIR / "t10k-labels-idx1-ubyte")
        train, val, test = split(pool, (55000, 5000, 10000), 0, test_set=test_file)
        assert (len(train), len(val), len(test)) == (55000, 5000, 10000)
        assert pool.images.shape[1:] == (1, 28, 28)
