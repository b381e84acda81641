"""
Tests for synthetic shapes module.
"""

import numpy as np
import pytest

from src.graphalign.errors import CatalogError
from src.graphalign.se3 import RigidTransform, compose, random_transform
from src.graphalign.shapes import (
    CATALOG,
    DISPLACEMENT_CAP,
    DeformationParams,
    SampleSpec,
    ShapeConfig,
    align_deformed_pair,
    build_sample,
    category_id,
    deform_shape,
    generate_shape,
    is_symmetric,
    part_residual,
    reference_pair,
    render_partial_cloud,
    with_tier,
)

from tests.helpers import TINY_SHAPES


class TestCatalog:
    """Tests for the category catalog."""

    def test_names_resolve(self):
        """Test that category names map back to their ids."""
        for cid, spec in CATALOG.items():
            assert category_id(spec.name) == cid

    def test_unknown_name(self):
        """Test that an unknown name raises CatalogError."""
        with pytest.raises(CatalogError):
            category_id("teapot")

    def test_unknown_id(self):
        """Test that an unknown id raises CatalogError."""
        with pytest.raises(CatalogError):
            generate_shape(99, 0)

    def test_held_out_categories_excluded(self):
        """Test that the default held-out categories never appear in training."""
        training = ShapeConfig().training_categories()

        assert category_id("hook") not in training
        assert category_id("spatula") not in training
        assert category_id("mug") in training

    def test_symmetric_flags(self):
        """Test a couple of symmetry flags."""
        assert is_symmetric(category_id("bowl"))
        assert not is_symmetric(category_id("mug"))


class TestGenerateShape:
    """Tests for generate_shape."""

    def test_deterministic(self):
        """Test that the same (category, seed) gives identical surfaces."""
        a = generate_shape(0, 42)
        b = generate_shape(0, 42)

        np.testing.assert_array_equal(a.surface_points, b.surface_points)

    def test_size_and_ids(self):
        """Test the diagonal range and the dense correspondence ids."""
        for cid in CATALOG:
            shape = generate_shape(cid, 3)
            assert 0.12 - 1e-9 <= shape.scale <= 0.25 + 1e-9
            np.testing.assert_array_equal(shape.correspondence_ids, np.arange(len(shape)))
            np.testing.assert_allclose(np.linalg.norm(shape.surface_normals, axis=1), 1.0, atol=1e-9)

    def test_instances_share_grid(self):
        """Test that two instances of a category have the same number of points."""
        assert len(generate_shape(5, 1)) == len(generate_shape(5, 2))


class TestDeformShape:
    """Tests for deform_shape."""

    def test_zero_magnitude_is_identity(self):
        """Test that magnitude zero leaves every point in place."""
        shape = generate_shape(1, 0)
        out = deform_shape(shape, DeformationParams(magnitude=0.0, anisotropic_scale=(1.2, 0.9, 1.1)))

        np.testing.assert_array_equal(out.surface_points, shape.surface_points)

    def test_displacement_is_capped(self):
        """Test that no point moves further than magnitude * cap * scale."""
        shape = generate_shape(9, 4)
        params = DeformationParams(magnitude=0.3, anisotropic_scale=(1.3, 0.8, 1.1), warp_seed=5)
        out = deform_shape(shape, params)
        moved = np.linalg.norm(out.surface_points - shape.surface_points, axis=1)

        assert moved.max() <= 0.3 * DISPLACEMENT_CAP * shape.scale + 1e-12
        np.testing.assert_array_equal(out.correspondence_ids, shape.correspondence_ids)

    def test_normals_stay_unit(self):
        """Test that warped normals are renormalised."""
        out = deform_shape(generate_shape(0, 1), DeformationParams(magnitude=0.5, warp_seed=2))

        np.testing.assert_allclose(np.linalg.norm(out.surface_normals, axis=1), 1.0, atol=1e-9)


class TestAlignment:
    """Tests for reference placement and part-consistent alignment."""

    def test_undeformed_alignment_reproduces_reference(self):
        """Test that aligning undeformed shapes gives back the reference poses."""
        shape_a, shape_b = generate_shape(0, 11), generate_shape(9, 12)
        ref = reference_pair(shape_a, shape_b, anchor_id=10, contact_id=20, spin=0.4, gap=0.005)
        aligned = align_deformed_pair(ref, shape_a, shape_b, 10, neighborhood_radius=0.1)

        assert part_residual(ref, aligned, 10, 0.1) < 1e-9
        np.testing.assert_allclose(aligned.gt_relative.as_matrix(), ref.gt_relative.as_matrix(), atol=1e-9)

    def test_deformed_alignment_keeps_part_close(self):
        """Test the part-consistency residual for a mild deformation."""
        shape_a, shape_b = generate_shape(0, 11), generate_shape(9, 12)
        ref = reference_pair(shape_a, shape_b, anchor_id=10, contact_id=20, spin=0.4, gap=0.005)
        params = DeformationParams(magnitude=0.1, warp_seed=3)
        aligned = align_deformed_pair(ref, deform_shape(shape_a, params), deform_shape(shape_b, params), 10, 0.1)

        assert part_residual(ref, aligned, 10, 0.1) < 0.1 * 0.1 + 0.05


class TestRender:
    """Tests for render_partial_cloud."""

    def test_budget_and_dtypes(self):
        """Test the point budget and storage types of a rendered cloud."""
        shape = generate_shape(0, 0)
        cloud = render_partial_cloud(shape, random_transform(0.2, np.pi, 1), 3, 50, seed=2)

        assert 0 < len(cloud) <= 150
        assert cloud.points.dtype == np.float32
        assert cloud.ids.dtype == np.int32
        assert set(cloud.ids.tolist()) <= set(range(len(shape)))

    def test_points_lie_on_posed_surface(self):
        """Test that rendered points are posed surface points with matching ids."""
        shape = generate_shape(3, 0)
        pose = random_transform(0.2, np.pi, 4)
        cloud = render_partial_cloud(shape, pose, 2, 80, seed=5)

        np.testing.assert_allclose(cloud.points, pose.apply(shape.surface_points[cloud.ids]), atol=1e-5)

    def test_needs_a_view(self):
        """Test that zero views is rejected."""
        with pytest.raises(ValueError):
            render_partial_cloud(generate_shape(0, 0), RigidTransform.identity(), 0, 10, seed=0)


class TestBuildSample:
    """Tests for build_sample."""

    def test_structure(self, tiny_sample):
        """Test pair count and ground-truth consistency of a generated sample."""
        assert len(tiny_sample.pairs) == TINY_SHAPES.n_pairs
        assert len(tiny_sample.modes) == 1
        for pair in tiny_sample.pairs:
            rel = compose(pair.pose_b.inverse(), pair.pose_a)
            np.testing.assert_allclose(rel.as_matrix(), pair.gt_relative.as_matrix(), atol=1e-9)
            assert len(pair.alt_relatives) == 1

    def test_clouds_follow_poses(self, tiny_sample):
        """Test that each rendered grasped cloud sits at its pair's pose."""
        pair = tiny_sample.pairs[0]
        expected = pair.pose_a.apply(pair.shape_a.surface_points[pair.cloud_a.ids])

        np.testing.assert_allclose(pair.cloud_a.points, expected, atol=1e-5)

    def test_deterministic(self, tiny_sample):
        """Test that regenerating with the same seed reproduces the sample."""
        again = build_sample(TINY_SHAPES, 7)

        for a, b in zip(tiny_sample.pairs, again.pairs):
            np.testing.assert_array_equal(a.cloud_a.points, b.cloud_a.points)
            np.testing.assert_array_equal(a.pose_b.to_vector12(), b.pose_b.to_vector12())

    def test_category_pool(self):
        """Test that SampleSpec.categories restricts both objects."""
        sample = build_sample(TINY_SHAPES, 3, SampleSpec(categories=(0, 9)))

        for pair in sample.pairs:
            assert pair.category_a in (0, 9)
            assert pair.category_b in (0, 9)

    def test_multimodal_sample(self):
        """Test that a two-mode sample records both relative poses per pair."""
        sample = build_sample(TINY_SHAPES, 5, SampleSpec(multimodal=True))

        assert sample.is_multimodal
        assert len(sample.mode_anchors) == 2
        for pair in sample.pairs:
            assert len(pair.alt_relatives) == 2
            chosen = pair.alt_relatives[pair.mode_index]
            np.testing.assert_allclose(chosen.as_matrix(), pair.gt_relative.as_matrix(), atol=1e-9)


class TestTiers:
    """Tests for diversity tiers."""

    def test_known_tier(self):
        """Test that a tier sets the magnitude range."""
        assert with_tier(ShapeConfig(), "high").magnitude_range == (0.0, 0.6)

    def test_unknown_tier(self):
        """Test that an unknown tier raises ValueError."""
        with pytest.raises(ValueError):
            with_tier(ShapeConfig(), "extreme")
