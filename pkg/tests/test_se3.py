"""
Tests for SE(3) module.
"""

import numpy as np
import pytest

from src.graphalign.errors import DegenerateInputError, OutOfDomainError
from src.graphalign.se3 import (
    REORTHONORMALIZE_EVERY,
    RigidTransform,
    Twist,
    about_point,
    compose,
    expmap,
    kabsch_fit,
    logmap,
    random_rotation,
    random_transform,
    rotation_angle,
    rotation_distance,
    so3_exp,
)


def _random_twist(rng: np.random.Generator, max_angle: float = 2.5) -> Twist:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Twist(axis * rng.uniform(0.0, max_angle), rng.uniform(-1.0, 1.0, size=3))


class TestExpLog:
    """Tests for expmap and logmap."""

    def test_zero_twist_is_exact_identity(self):
        """Test that exp(0) is the exact identity, not merely close to it."""
        t = expmap(Twist.zero())

        assert t.is_identity()

    def test_log_inverts_exp(self):
        """Test that logmap recovers the twist for angles below pi."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            xi = _random_twist(rng)
            back = logmap(expmap(xi))
            np.testing.assert_allclose(back.as_vector(), xi.as_vector(), atol=1e-9)

    def test_small_angles_are_stable(self):
        """Test the series branch for tiny rotation angles."""
        xi = Twist([1e-10, -2e-10, 0.5e-10], [0.1, 0.2, 0.3])
        back = logmap(expmap(xi))

        np.testing.assert_allclose(back.as_vector(), xi.as_vector(), atol=1e-12)

    def test_exp_gives_valid_rotation(self):
        """Test that the rotation part is orthonormal with determinant one."""
        rng = np.random.default_rng(1)
        for _ in range(20):
            assert expmap(_random_twist(rng, 3.1)).is_valid(1e-9)

    def test_log_near_pi_raises(self):
        """Test that logmap refuses rotations within the margin of pi."""
        t = RigidTransform(so3_exp([np.pi, 0.0, 0.0]), np.zeros(3))

        with pytest.raises(OutOfDomainError):
            logmap(t)

    def test_twist_vector_order(self):
        """Test that from_vector splits (rot, trans) in that order."""
        xi = Twist.from_vector([1, 2, 3, 4, 5, 6])

        np.testing.assert_array_equal(xi.rot, [1, 2, 3])
        np.testing.assert_array_equal(xi.trans, [4, 5, 6])


class TestComposition:
    """Tests for compose, inverse and about_point."""

    def test_compose_applies_right_first(self):
        """Test that compose(a, b) applies b before a."""
        rng = np.random.default_rng(2)
        a, b = random_transform(0.5, 1.0, rng), random_transform(0.5, 1.0, rng)
        p = rng.normal(size=(5, 3))

        np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)

    def test_inverse_composes_to_identity(self):
        """Test that a transform composed with its inverse is the identity."""
        t = random_transform(0.8, np.pi, 3)
        ident = compose(t, t.inverse())

        np.testing.assert_allclose(ident.as_matrix(), np.eye(4), atol=1e-12)

    def test_about_point_fixes_pivot(self):
        """Test that a rotation about a pivot leaves the pivot where it is."""
        pivot = np.array([0.3, -0.2, 0.5])
        t = about_point(RigidTransform(random_rotation(np.pi, 4), np.zeros(3)), pivot)

        np.testing.assert_allclose(t.apply(pivot[None])[0], pivot, atol=1e-12)

    def test_long_chains_stay_orthonormal(self):
        """Test that repeated composition is re-orthonormalised."""
        step = RigidTransform(random_rotation(0.3, 5), np.zeros(3))
        t = RigidTransform.identity()
        for _ in range(4 * REORTHONORMALIZE_EVERY + 7):
            t = compose(step, t)

        assert t.is_valid(1e-9)
        assert t.compositions < REORTHONORMALIZE_EVERY

    def test_vector12_roundtrip_is_bitwise(self):
        """Test that the 12-number serialisation reproduces the exact floats."""
        t = random_transform(0.5, 2.0, 6)
        back = RigidTransform.from_vector12(t.to_vector12())

        np.testing.assert_array_equal(back.rotation, t.rotation)
        np.testing.assert_array_equal(back.translation, t.translation)


class TestKabsch:
    """Tests for kabsch_fit."""

    def test_recovers_known_transform(self):
        """Test that exact correspondences give back the generating transform."""
        rng = np.random.default_rng(7)
        truth = random_transform(0.5, np.pi, rng)
        source = rng.normal(size=(30, 3))
        fit = kabsch_fit(source, truth.apply(source))

        np.testing.assert_allclose(fit.as_matrix(), truth.as_matrix(), atol=1e-9)

    def test_never_returns_a_reflection(self):
        """Test that a mirrored target still yields a proper rotation."""
        rng = np.random.default_rng(8)
        source = rng.normal(size=(20, 3))
        target = source * np.array([1.0, 1.0, -1.0])
        fit = kabsch_fit(source, target)

        assert np.linalg.det(fit.rotation) == pytest.approx(1.0)

    def test_too_few_points(self):
        """Test that fewer than three points are rejected."""
        with pytest.raises(DegenerateInputError):
            kabsch_fit(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_points(self):
        """Test that collinear input is rejected."""
        line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])

        with pytest.raises(DegenerateInputError):
            kabsch_fit(line, line)

    def test_mismatched_shapes(self):
        """Test that unpaired point sets are rejected."""
        with pytest.raises(DegenerateInputError):
            kabsch_fit(np.zeros((5, 3)), np.zeros((4, 3)))


class TestRandomTransform:
    """Tests for bounded random sampling."""

    def test_zero_ranges_give_identity(self):
        """Test that ranges (0, 0) produce the exact identity."""
        assert random_transform(0.0, 0.0, 9).is_identity()

    def test_samples_respect_bounds(self):
        """Test that translation components and angles stay within their ranges."""
        rng = np.random.default_rng(10)
        for _ in range(200):
            t = random_transform(0.1, np.pi / 4, rng)
            assert np.all(np.abs(t.translation) <= 0.1)
            assert rotation_angle(t.rotation) <= np.pi / 4 + 1e-12

    def test_same_seed_same_sample(self):
        """Test determinism for an integer seed."""
        a = random_transform(0.8, np.pi, 11)
        b = random_transform(0.8, np.pi, 11)

        np.testing.assert_array_equal(a.to_vector12(), b.to_vector12())

    def test_negative_range_rejected(self):
        """Test that negative ranges raise ValueError."""
        with pytest.raises(ValueError):
            random_transform(-0.1, 0.0)

    def test_rotation_distance_is_symmetric(self):
        """Test that the geodesic distance does not depend on argument order."""
        a, b = random_transform(0.0, 2.0, 12), random_transform(0.0, 2.0, 13)

        assert rotation_distance(a, b) == pytest.approx(rotation_distance(b, a), abs=1e-12)
