"""
Tests for geometry encoder module.
"""

import numpy as np
import pytest
import torch

from src.graphalign.encoder import (
    QUERY_FAR,
    VNLeakyReLU,
    VNLinear,
    build_occupancy_dataset,
    encode_local,
    farthest_point_sample,
    group_and_center,
    invariant_readout,
    occupancy_accuracy,
    occupancy_decode,
    positional_encode,
    pretrain_encoder,
)
from src.graphalign.se3 import random_rotation, random_transform

from tests.helpers import TINY_ENCODER, TINY_SHAPES


@pytest.fixture(scope="module")
def cloud():
    """A random blob of 120 points."""
    return np.random.default_rng(0).normal(scale=0.05, size=(120, 3))


class TestSampling:
    """Tests for farthest point sampling and grouping."""

    def test_fps_distinct_and_deterministic(self, cloud):
        """Test that FPS returns k distinct indices, reproducibly."""
        a = farthest_point_sample(cloud, 10, start_seed=3)
        b = farthest_point_sample(cloud, 10, start_seed=3)

        assert len(set(a.tolist())) == 10
        np.testing.assert_array_equal(a, b)

    def test_fps_second_pick_is_farthest(self, cloud):
        """Test the greedy max-min rule for the second index."""
        idx = farthest_point_sample(cloud, 2, start_index=5)
        d = np.linalg.norm(cloud - cloud[5], axis=1)

        assert idx[0] == 5
        assert idx[1] == int(np.argmax(d))

    def test_fps_too_many(self, cloud):
        """Test that asking for more points than exist raises ValueError."""
        with pytest.raises(ValueError):
            farthest_point_sample(cloud[:3], 4)

    def test_groups_partition_cloud(self, cloud):
        """Test that every point lands in exactly one centred group."""
        centroids = cloud[farthest_point_sample(cloud, 6)]
        groups = group_and_center(cloud, centroids)

        assert sum(len(g) for g in groups) == len(cloud)
        for g in groups:
            assert np.any(np.all(np.abs(g) < 1e-15, axis=1))


class TestPositionalEncoding:
    """Tests for positional_encode."""

    def test_zero_vector(self):
        """Test that the zero vector encodes to alternating 0 and 1."""
        out = positional_encode(np.zeros(3), 2)

        np.testing.assert_allclose(out, np.tile([0.0, 1.0], 6))

    def test_width_and_torch_input(self):
        """Test the 6L output width for tensor input."""
        out = positional_encode(torch.ones((4, 3), dtype=torch.float64), 5)

        assert isinstance(out, torch.Tensor)
        assert out.shape == (4, 30)

    def test_rejects_zero_frequencies(self):
        """Test that l_freq must be positive."""
        with pytest.raises(ValueError):
            positional_encode(np.zeros(3), 0)


class TestEquivariance:
    """Tests for the vector-neuron layers and the encoder."""

    def test_layers_commute_with_rotation(self):
        """Test that VNLinear and VNLeakyReLU commute with a rotation."""
        torch.manual_seed(0)
        linear, act = VNLinear(5, 4).double(), VNLeakyReLU(4).double()
        x = torch.randn((7, 5, 3), dtype=torch.float64)
        r = torch.as_tensor(random_rotation(np.pi, 1))

        out = act(linear(x))
        rotated = act(linear(x @ r.T))

        torch.testing.assert_close(rotated, out @ r.T, atol=1e-10, rtol=0)

    def test_encoder_rotation_equivariance(self, tiny_encoder, cloud):
        """Test that features rotate with the cloud and positions follow the transform."""
        t = random_transform(0.3, np.pi, 2)
        base = tiny_encoder.encode(cloud)
        moved = tiny_encoder.encode(t.apply(cloud))
        r = torch.as_tensor(t.rotation)

        torch.testing.assert_close(moved.features, base.features @ r.T, atol=1e-8, rtol=0)
        torch.testing.assert_close(moved.positions, torch.as_tensor(t.apply(base.positions.numpy())), atol=1e-10, rtol=0)

    def test_encoder_translation_invariance(self, tiny_encoder, cloud):
        """Test that a pure translation leaves the features unchanged."""
        base = tiny_encoder.encode(cloud)
        moved = tiny_encoder.encode(cloud + np.array([0.4, -0.1, 0.2]))

        torch.testing.assert_close(moved.features, base.features, atol=1e-8, rtol=0)

    def test_output_shapes(self, tiny_encoder, cloud):
        """Test the (K, C, 3) feature and (K, 3) position shapes."""
        out = tiny_encoder.encode(cloud)

        assert out.features.shape == (TINY_ENCODER.n_groups, TINY_ENCODER.channels, 3)
        assert len(out) == TINY_ENCODER.n_groups
        assert out.features.dtype == torch.float64

    def test_empty_group_gives_zeros(self, tiny_encoder, cloud):
        """Test that an empty local cloud encodes to the zero feature."""
        feats = encode_local([cloud[:10] - cloud[:10].mean(0), np.zeros((0, 3))], tiny_encoder)

        assert torch.all(feats[1] == 0)
        assert torch.any(feats[0] != 0)

    def test_readout_is_invariant(self):
        """Test that the scalar readout ignores rotations."""
        x = torch.randn((3, 4, 3), dtype=torch.float64)
        r = torch.as_tensor(random_rotation(np.pi, 4))

        torch.testing.assert_close(invariant_readout(x @ r.T), invariant_readout(x), atol=1e-10, rtol=0)
        assert invariant_readout(x).shape == (3, 4 + 6)


@pytest.fixture(scope="module")
def examples():
    """Occupancy examples shared by the pretraining tests."""
    return build_occupancy_dataset(TINY_ENCODER.n_examples, TINY_ENCODER, TINY_SHAPES, seed=0)


class TestPretraining:
    """Tests for occupancy data and pretraining."""

    def test_dataset_shapes(self, examples):
        """Test query and label layout of an occupancy example."""
        e = examples[0]
        k, q = TINY_ENCODER.n_groups, TINY_ENCODER.queries_per_group

        assert e.queries.shape == (k, q, 3)
        assert e.labels.shape == (k, q)
        assert set(np.unique(e.labels)) <= {0.0, 1.0}

    def test_far_queries_are_empty(self, examples):
        """Test that queries far outside a group are almost never labelled surface."""
        labels = np.concatenate([e.labels[e.kinds == QUERY_FAR] for e in examples])

        assert labels.mean() < 0.5

    def test_pretraining_returns_frozen_modules(self, examples):
        """Test that a short run records history and freezes both modules."""
        result = pretrain_encoder(examples, TINY_ENCODER)

        assert len(result.history) == 2
        assert result.best_val_loss <= result.initial_val_loss
        assert not any(p.requires_grad for p in result.encoder.parameters())
        assert not any(p.requires_grad for p in result.decoder.parameters())
        surface_rate, far_rate = occupancy_accuracy(result.encoder, result.decoder, examples)
        assert 0.0 <= surface_rate <= 1.0 and 0.0 <= far_rate <= 1.0

    def test_history_holds_plain_floats(self, examples, recwarn):
        """Test that logged losses are detached Python floats with no grad-conversion warning."""
        result = pretrain_encoder(examples, TINY_ENCODER)

        assert all(type(h["train_loss"]) is float for h in result.history)
        assert not [w for w in recwarn if "requires_grad" in str(w.message)]

    def test_decode_probability(self, examples):
        """Test that occupancy_decode returns a probability."""
        result = pretrain_encoder(examples, TINY_ENCODER)
        feature = result.encoder.encode(np.random.default_rng(1).normal(scale=0.05, size=(50, 3))).features[0]

        assert 0.0 <= occupancy_decode(feature, [0.0, 0.0, 0.01], result.decoder) <= 1.0
