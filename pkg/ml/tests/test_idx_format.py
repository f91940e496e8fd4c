"""
Tests for the IDX digit file reader and writer.
"""

import struct

import numpy as np
import pytest

from ml.data.attention_env import held_out_split, load_idx, load_idx_splits, make_glyph_dataset
from ml.data.idx_format import IMAGES_MAGIC, LABELS_MAGIC, read_idx_arrays, write_idx
from ml.errors import ConfigError, IdxFormatError, ShapeError


@pytest.fixture
def fixture_files(tmp_path):
    """Hand-built three-image file pair"""
    images = np.arange(3 * 28 * 28, dtype=np.int64).reshape(3, 28, 28) % 256
    images_path = tmp_path / 'images.idx'
    labels_path = tmp_path / 'labels.idx'
    images_path.write_bytes(struct.pack('>IIII', IMAGES_MAGIC, 3, 28, 28) + images.astype(np.uint8).tobytes())
    labels_path.write_bytes(struct.pack('>II', LABELS_MAGIC, 3) + bytes([7, 1, 4]))
    return str(images_path), str(labels_path), images


class TestReadIdx:
    def test_well_formed(self, fixture_files):
        images_path, labels_path, expected = fixture_files
        images, labels = read_idx_arrays(images_path, labels_path)
        assert images.shape == (3, 28, 28)
        np.testing.assert_array_equal(images, expected)
        assert labels.tolist() == [7, 1, 4]

    def test_wrong_magic(self, fixture_files, tmp_path):
        _, labels_path, _ = fixture_files
        bad = tmp_path / 'bad.idx'
        bad.write_bytes(struct.pack('>IIII', 0x00000802, 1, 2, 2) + bytes(4))
        with pytest.raises(IdxFormatError) as excinfo:
            read_idx_arrays(str(bad), labels_path)
        assert excinfo.value.code == 'bad_magic'
        assert excinfo.value.offset == 0

    def test_count_mismatch(self, fixture_files, tmp_path):
        images_path, _, _ = fixture_files
        labels = tmp_path / 'labels2.idx'
        labels.write_bytes(struct.pack('>II', LABELS_MAGIC, 2) + bytes([1, 2]))
        with pytest.raises(IdxFormatError) as excinfo:
            read_idx_arrays(images_path, str(labels))
        assert excinfo.value.code == 'count_mismatch'

    def test_truncated_payload(self, fixture_files, tmp_path):
        _, labels_path, _ = fixture_files
        short = tmp_path / 'short.idx'
        short.write_bytes(struct.pack('>IIII', IMAGES_MAGIC, 3, 28, 28) + bytes(100))
        with pytest.raises(IdxFormatError) as excinfo:
            read_idx_arrays(str(short), labels_path)
        assert excinfo.value.code == 'truncated'

    def test_trailing_bytes(self, fixture_files, tmp_path):
        images_path, _, _ = fixture_files
        labels = tmp_path / 'long.idx'
        labels.write_bytes(struct.pack('>II', LABELS_MAGIC, 3) + bytes([1, 2, 3, 4]))
        with pytest.raises(IdxFormatError) as excinfo:
            read_idx_arrays(images_path, str(labels))
        assert excinfo.value.code == 'trailing_bytes'
        assert excinfo.value.offset == 11


class TestWriteIdx:
    @pytest.mark.parametrize("suffix", ['.idx', '.idx.gz'])
    def test_dataset_survives_idx(self, tmp_path, suffix):
        dataset = make_glyph_dataset(seed=4, n_per_class=3, pixel_noise=0.1)
        images_path = str(tmp_path / f'images{suffix}')
        labels_path = str(tmp_path / f'labels{suffix}')
        write_idx(images_path, labels_path, dataset.images, dataset.labels)
        loaded = load_idx(images_path, labels_path)
        np.testing.assert_array_equal(loaded.images, dataset.images)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)

    def test_rejects_mismatched_lengths(self, tmp_path):
        with pytest.raises(ValueError):
            write_idx(str(tmp_path / 'i.idx'), str(tmp_path / 'l.idx'), np.zeros((2, 4, 4)), np.zeros(3))


class TestIdxSplits:
    @pytest.fixture
    def glyph_files(self, tmp_path):
        dataset = make_glyph_dataset(seed=4, n_per_class=5, pixel_noise=0.1)
        images_path, labels_path = str(tmp_path / 'glyph-images.idx'), str(tmp_path / 'glyph-labels.idx')
        write_idx(images_path, labels_path, dataset.images, dataset.labels)
        return images_path, labels_path, dataset

    def test_default_keeps_everything_for_training(self, glyph_files):
        images_path, labels_path, dataset = glyph_files
        loaded = load_idx(images_path, labels_path)
        assert len(loaded.train_idx) == len(dataset)
        assert len(loaded.test_idx) == 0

    def test_fraction_holds_out_every_class(self, glyph_files):
        images_path, labels_path, _ = glyph_files
        loaded = load_idx(images_path, labels_path, test_fraction=0.2, seed=3)
        _, test_labels = loaded.split('test')
        assert sorted(test_labels.tolist()) == list(range(10))
        assert len(loaded.train_idx) == 40
        assert np.intersect1d(loaded.train_idx, loaded.test_idx).size == 0

    def test_split_is_seeded(self, glyph_files):
        images_path, labels_path, _ = glyph_files
        a = load_idx(images_path, labels_path, test_fraction=0.4, seed=9)
        b = load_idx(images_path, labels_path, test_fraction=0.4, seed=9)
        np.testing.assert_array_equal(a.test_idx, b.test_idx)

    def test_single_image_class_stays_in_train(self):
        train_idx, test_idx = held_out_split(np.array([0, 1, 1, 1]), 0.5, np.random.default_rng(0))
        assert 0 in train_idx.tolist()
        assert len(test_idx) == 2

    def test_rejects_full_fraction(self):
        with pytest.raises(ConfigError):
            held_out_split(np.array([0, 0]), 1.0, np.random.default_rng(0))

    def test_separate_pairs(self, glyph_files, tmp_path):
        images_path, labels_path, dataset = glyph_files
        test_images, test_labels = str(tmp_path / 'test-images.idx.gz'), str(tmp_path / 'test-labels.idx.gz')
        write_idx(test_images, test_labels, dataset.images[:7], dataset.labels[:7])
        loaded = load_idx_splits(images_path, labels_path, test_images, test_labels)
        assert len(loaded) == 57
        np.testing.assert_array_equal(loaded.split('test')[1], dataset.labels[:7])
        np.testing.assert_array_equal(loaded.split('train')[0], dataset.images)

    def test_separate_pairs_need_matching_shapes(self, glyph_files, fixture_files):
        images_path, labels_path, _ = glyph_files
        other_images, other_labels, _ = fixture_files
        with pytest.raises(ShapeError):
            load_idx_splits(images_path, labels_path, other_images, other_labels)
