"""
SE(3) Module

Exact rigid-body group operations: exponential and logarithm maps, composition,
least-squares rigid fitting and bounded random transform sampling.

Rotations are stored as orthonormal 3x3 matrices. A transform remembers how many
compositions produced it and is re-orthonormalised by polar decomposition every
``REORTHONORMALIZE_EVERY`` compositions.
"""

from dataclasses import dataclass, field
from typing import Iterable, Union

import numpy as np

from .errors import DegenerateInputError, OutOfDomainError

SMALL_ANGLE = 1e-8
PI_MARGIN = 1e-6
REORTHONORMALIZE_EVERY = 50

SeedLike = Union[None, int, np.random.Generator]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def skew(v: Iterable[float]) -> np.ndarray:
    """Return the 3x3 skew-symmetric (hat) matrix of a 3-vector."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew`."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Twist:
    """Tangent vector of SE(3): axis-angle rotation (rad) and translation (m)."""
    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=np.float64).reshape(3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v: Iterable[float]) -> "Twist":
        """Build a twist from a 6-vector ordered (rot, trans)."""
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rot)) and np.all(np.isfinite(self.trans)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3).

    Attributes:
        rotation: 3x3 orthonormal matrix with determinant +1.
        translation: 3-vector in meters.
        compositions: Number of compositions since the rotation was last
            re-orthonormalised.
    """
    rotation: np.ndarray
    translation: np.ndarray
    compositions: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        """Build a transform from a 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_translation(cls, t: Iterable[float]) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_vector12(cls, values: Iterable[float]) -> "RigidTransform":
        """Decode the 12-number serialisation (row-major rotation, then translation)."""
        v = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(v[:9].reshape(3, 3), v[9:])

    def to_vector12(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(9), self.translation])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Apply only the rotation part to an (..., 3) array of free vectors."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.compositions)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
            and np.all(np.isfinite(self.translation))
        )

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation))


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b`` (apply ``b`` first, then ``a``)."""
    rotation = a.rotation @ b.rotation
    translation = a.rotation @ b.translation + a.translation
    count = max(a.compositions, b.compositions) + 1
    if count >= REORTHONORMALIZE_EVERY:
        rotation = orthonormalize(rotation)
        count = 0
    return RigidTransform(rotation, translation, count)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def about_point(t: RigidTransform, pivot: Iterable[float]) -> RigidTransform:
    """Conjugate ``t`` so that its rotation acts about ``pivot`` instead of the origin.

    The result maps p to pivot + R (p - pivot) + t.translation.
    """
    c = np.asarray(pivot, dtype=np.float64).reshape(3)
    return RigidTransform(t.rotation, c - t.rotation @ c + t.translation, t.compositions)


def _so3_coefficients(theta: float):
    """Return (A, B, C) with A = sin/θ, B = (1-cos)/θ², C = (θ - sin)/θ³."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = np.sin(theta), np.cos(theta)
    return s / theta, (1.0 - c) / theta ** 2, (theta - s) / theta ** 3


def so3_exp(rot: Iterable[float]) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    w = np.asarray(rot, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    a, b, _ = _so3_coefficients(theta)
    W = skew(w)
    return np.eye(3) + a * W + b * (W @ W)


def expmap(xi: Twist) -> RigidTransform:
    """SE(3) exponential: Rodrigues rotation and V-coupled translation.

    Args:
        xi: Twist to map onto the group.

    Returns:
        The rigid transform exp(xi); exp(0) is the exact identity.
    """
    theta = float(np.linalg.norm(xi.rot))
    a, b, c = _so3_coefficients(theta)
    W = skew(xi.rot)
    W2 = W @ W
    rotation = np.eye(3) + a * W + b * W2
    v = np.eye(3) + b * W + c * W2
    return RigidTransform(rotation, v @ xi.trans)


def logmap(t: RigidTransform) -> Twist:
    """SE(3) logarithm, inverse of :func:`expmap` for rotation angles below pi.

    Raises:
        OutOfDomainError: If the rotation angle is within 1e-6 of pi.
    """
    r = t.rotation
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    skew_part = vee(r - r.T) / 2.0
    theta = float(np.arctan2(np.linalg.norm(skew_part), cos_theta))
    if theta >= np.pi - PI_MARGIN:
        raise OutOfDomainError(f"rotation angle {theta:.9f} rad is too close to pi for logmap")
    if theta < SMALL_ANGLE:
        w = skew_part
    else:
        w = skew_part * (theta / np.sin(theta))
    W = skew(w)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0
    else:
        coeff = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    v_inv = np.eye(3) - 0.5 * W + coeff * (W @ W)
    return Twist(w, v_inv @ t.translation)


def kabsch_fit(source, target) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    Args:
        source: (N, 3) points or an object exposing ``.points``.
        target: (N, 3) points paired with ``source`` by index.

    Returns:
        The transform T minimising sum ||T s_i - t_i||^2.

    Raises:
        DegenerateInputError: For fewer than 3 points, mismatched counts or
            (near) collinear input.
    """
    s = np.asarray(getattr(source, "points", source), dtype=np.float64)
    d = np.asarray(getattr(target, "points", target), dtype=np.float64)
    if s.shape != d.shape or s.ndim != 2 or s.shape[1] != 3:
        raise DegenerateInputError(f"paired point sets required, got {s.shape} and {d.shape}")
    if s.shape[0] < 3:
        raise DegenerateInputError(f"kabsch_fit needs at least 3 points, got {s.shape[0]}")

    mu_s = s.mean(axis=0)
    mu_d = d.mean(axis=0)
    s0 = s - mu_s
    d0 = d - mu_d

    spread = np.linalg.svd(s0, compute_uv=False)
    if spread[0] < 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise DegenerateInputError("source points are collinear or coincident")

    h = s0.T @ d0
    u, sv, vt = np.linalg.svd(h)
    if sv[0] < 1e-15 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateInputError("cross-covariance is rank deficient")
    sign = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return RigidTransform(rotation, mu_d - rotation @ mu_s)


def fit_residual(t: RigidTransform, source, target) -> float:
    """Root-mean-square distance between T(source) and target."""
    s = np.asarray(getattr(source, "points", source), dtype=np.float64)
    d = np.asarray(getattr(target, "points", target), dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum((t.apply(s) - d) ** 2, axis=1))))


def random_rotation(rot_range: float, seed: SeedLike = None) -> np.ndarray:
    """Rotation about a uniform random axis by an angle uniform in [-rot_range, rot_range]."""
    rng = _rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-rot_range, rot_range) if rot_range > 0 else 0.0
    return so3_exp(axis * angle)


def random_transform(trans_range: float, rot_range: float, seed: SeedLike = None) -> RigidTransform:
    """Sample a bounded random transform.

    Translation components are uniform in [-trans_range, trans_range]; the rotation
    uses a uniform axis and an angle uniform in [-rot_range, rot_range]. This is
    not the Haar measure on SO(3); it follows per-component range semantics.

    Args:
        trans_range: Translation bound in meters (>= 0).
        rot_range: Rotation angle bound in radians (>= 0).
        seed: Integer seed or an existing numpy Generator.

    Returns:
        The sampled transform; ranges (0, 0) give the exact identity.
    """
    if trans_range < 0 or rot_range < 0:
        raise ValueError("random_transform ranges must be non-negative")
    rng = _rng(seed)
    rotation = random_rotation(rot_range, rng)
    if trans_range > 0:
        translation = rng.uniform(-trans_range, trans_range, size=3)
    else:
        translation = np.zeros(3)
    return RigidTransform(rotation, translation)


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, computed with atan2 for accuracy near 0 and pi."""
    r = np.asarray(rotation, dtype=np.float64)
    sin_part = np.linalg.norm(vee(r - r.T)) / 2.0
    cos_part = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(sin_part, cos_part))


def rotation_distance(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic distance between the rotation parts of two transforms, in [0, pi]."""
    return rotation_angle(a.rotation.T @ b.rotation)


def translation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))
