"""
Tests for dataset container module.
"""

import json

import numpy as np
import pytest

from src.graphalign.dataset_io import (
    MAGIC,
    config_digest,
    decode_sample,
    encode_sample,
    generate_dataset,
    load_dataset,
    load_manifest,
    sample_seeds,
    save_dataset,
    sidecar_path,
)
from src.graphalign.errors import DatasetFormatError, DatasetTruncatedError, DatasetVersionError, DigestMismatchError
from src.graphalign.shapes import ShapeConfig

from tests.helpers import TINY_SHAPES


@pytest.fixture(scope="module")
def tiny_dataset():
    """Two generated samples."""
    return generate_dataset(TINY_SHAPES, seed=3, count=2)


@pytest.fixture
def saved(tiny_dataset, tmp_path):
    """Path of the tiny dataset written to disk."""
    return save_dataset(tiny_dataset, tmp_path / "data" / "train.bin")


class TestSeeds:
    """Tests for seed derivation and config digests."""

    def test_sample_seeds_deterministic(self):
        """Test that the same run seed gives the same sample seeds."""
        assert sample_seeds(5, 10) == sample_seeds(5, 10)
        assert len(set(sample_seeds(5, 10))) == 10

    def test_prefix_stable(self):
        """Test that asking for more seeds keeps the earlier ones."""
        assert sample_seeds(5, 20)[:10] == sample_seeds(5, 10)

    def test_digest_tracks_config(self):
        """Test that changing any setting changes the digest."""
        assert config_digest(ShapeConfig()) == config_digest(ShapeConfig())
        assert config_digest(ShapeConfig()) != config_digest(ShapeConfig(n_pairs=4))


class TestEncoding:
    """Tests for the per-sample record codec."""

    def test_decode_reproduces_exact_values(self, tiny_dataset):
        """Test that a decoded sample carries bit-identical poses and clouds."""
        sample = tiny_dataset.samples[0]
        back = decode_sample(encode_sample(sample))

        assert back.part_anchor_id == sample.part_anchor_id
        assert back.sample_seed == sample.sample_seed
        for a, b in zip(sample.pairs, back.pairs):
            np.testing.assert_array_equal(a.cloud_a.points, b.cloud_a.points)
            np.testing.assert_array_equal(a.cloud_b.ids, b.cloud_b.ids)
            np.testing.assert_array_equal(a.gt_relative.to_vector12(), b.gt_relative.to_vector12())
            assert a.magnitude == b.magnitude
            assert b.shape_a is None

    def test_trailing_bytes_rejected(self, tiny_dataset):
        """Test that extra bytes after a record are a format error."""
        with pytest.raises(DatasetFormatError):
            decode_sample(encode_sample(tiny_dataset.samples[0]) + b"\0")

    def test_short_record_is_truncated(self, tiny_dataset):
        """Test that a cut record raises DatasetTruncatedError."""
        payload = encode_sample(tiny_dataset.samples[0])

        with pytest.raises(DatasetTruncatedError):
            decode_sample(payload[:-7])


class TestContainer:
    """Tests for save_dataset / load_dataset."""

    def test_roundtrip(self, tiny_dataset, saved):
        """Test that loading gives back config, seeds and samples."""
        loaded = load_dataset(saved)

        assert loaded.config == tiny_dataset.config
        assert loaded.seeds == tiny_dataset.seeds
        assert len(loaded) == len(tiny_dataset)
        np.testing.assert_array_equal(
            loaded.samples[1].pairs[2].cloud_b.points, tiny_dataset.samples[1].pairs[2].cloud_b.points
        )

    def test_save_is_reproducible(self, tiny_dataset, saved, tmp_path):
        """Test that saving twice writes identical bytes."""
        again = save_dataset(tiny_dataset, tmp_path / "again.bin")

        assert saved.read_bytes() == again.read_bytes()
        assert saved.read_bytes()[:4] == MAGIC

    def test_manifest(self, tiny_dataset, saved):
        """Test the sidecar's per-sample entries."""
        side = load_manifest(saved)

        assert side["config_digest"] == tiny_dataset.digest
        assert len(side["manifest"]) == 2
        entry = side["manifest"][0]
        assert entry["part_anchor_id"] == tiny_dataset.samples[0].part_anchor_id
        assert len(entry["pairs"]) == TINY_SHAPES.n_pairs
        assert {"category_a", "category_b", "instance_seed_a", "instance_seed_b"} <= set(entry["pairs"][0])

    def test_truncated_file(self, saved):
        """Test that a file cut inside the last record raises DatasetTruncatedError."""
        data = saved.read_bytes()
        saved.write_bytes(data[:-100])

        with pytest.raises(DatasetTruncatedError):
            load_dataset(saved)

    def test_bad_magic(self, saved):
        """Test that a foreign file raises DatasetVersionError."""
        data = saved.read_bytes()
        saved.write_bytes(b"XXXX" + data[4:])

        with pytest.raises(DatasetVersionError):
            load_dataset(saved)

    def test_empty_file(self, tmp_path):
        """Test that a file shorter than the header is rejected."""
        path = tmp_path / "empty.bin"
        path.write_bytes(b"GA")

        with pytest.raises(DatasetVersionError):
            load_dataset(path)

    def test_tampered_sidecar(self, saved):
        """Test that editing the sidecar config is detected."""
        side_path = sidecar_path(saved)
        side = json.loads(side_path.read_text())
        side["config"]["n_pairs"] = 9
        side_path.write_text(json.dumps(side))

        with pytest.raises(DigestMismatchError):
            load_dataset(saved)

    def test_missing_sidecar(self, saved):
        """Test that a dataset without its sidecar cannot be loaded."""
        sidecar_path(saved).unlink()

        with pytest.raises(DatasetFormatError):
            load_dataset(saved)
