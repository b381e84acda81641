"""
Synthetic Shapes Module

Procedural object categories with analytically known dense correspondences,
correspondence-preserving deformations, part-consistent pair alignment and
partial point-cloud rendering.

Every category is a union of parametric primitives sampled on a fixed grid, so a
surface point's correspondence id is its position in that grid and is identical
for every instance of the category.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CatalogError, DegenerateInputError, DegeneratePartError
from .se3 import (
    RigidTransform,
    compose,
    kabsch_fit,
    fit_residual,
    random_rotation,
    rotation_distance,
    so3_exp,
)

logger = logging.getLogger(__name__)

MIN_DIAGONAL = 0.08
MAX_DIAGONAL = 0.35
CANONICAL_DIAGONAL = (0.12, 0.25)
DISPLACEMENT_CAP = 0.25
CAMERA_DISTANCE = 1.5


@dataclass(eq=False)
class PointCloud:
    """Ordered 3D point set.

    Attributes:
        points: (N, 3) coordinates in meters.
        ids: Optional (N,) correspondence ids.
        normals: Optional (N, 3) unit outward normals.
    """
    points: np.ndarray
    ids: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def centroid(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64).mean(axis=0)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        """Return a copy moved by ``t`` (normals rotated), keeping the storage dtype."""
        dtype = self.points.dtype
        normals = None if self.normals is None else t.rotate(self.normals).astype(self.normals.dtype)
        return PointCloud(t.apply(self.points).astype(dtype), self.ids, normals)


@dataclass(eq=False)
class CanonicalShape:
    """One object instance in its canonical pose."""
    category_id: int
    instance_seed: int
    surface_points: np.ndarray
    surface_normals: np.ndarray
    correspondence_ids: np.ndarray
    scale: float

    def __len__(self) -> int:
        return int(self.surface_points.shape[0])

    def posed_cloud(self, pose: RigidTransform) -> PointCloud:
        """Full (unoccluded) surface moved into the world by ``pose``."""
        return PointCloud(
            pose.apply(self.surface_points),
            self.correspondence_ids.copy(),
            pose.rotate(self.surface_normals),
        )


@dataclass(frozen=True)
class DeformationParams:
    """Parameters of a smooth correspondence-preserving warp.

    ``magnitude`` bounds the displacement: points never move further than
    magnitude * 0.25 * scale, and magnitude 0 is the identity.
    """
    magnitude: float = 0.0
    anisotropic_scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    warp_seed: int = 0
    n_warp_kernels: int = 4
    kernel_width: float = 0.5


@dataclass(eq=False)
class AlignedPair:
    """A grasped object (A) and a target object (B) in a task-consistent relative pose.

    ``gt_relative`` is the pose of A expressed in B's frame; ``alt_relatives`` holds
    the relative pose these shapes would take under every mode of their sample.
    The canonical shapes are kept in memory for generation only and are not persisted.
    """
    cloud_a: PointCloud
    cloud_b: PointCloud
    pose_a: RigidTransform
    pose_b: RigidTransform
    gt_relative: RigidTransform
    category_a: int = -1
    category_b: int = -1
    instance_seed_a: int = -1
    instance_seed_b: int = -1
    mode_index: int = 0
    magnitude: float = 0.0
    alt_relatives: List[RigidTransform] = field(default_factory=list)
    shape_a: Optional[CanonicalShape] = field(default=None, repr=False)
    shape_b: Optional[CanonicalShape] = field(default=None, repr=False)


@dataclass(eq=False)
class AlignmentSample:
    """N pairs sharing one part-consistent alignment (or one of several modes)."""
    pairs: List[AlignedPair]
    part_anchor_id: int
    modes: List[RigidTransform]
    sample_seed: int = 0
    mode_anchors: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def is_multimodal(self) -> bool:
        return len(self.modes) > 1


@dataclass(frozen=True)
class ShapeConfig:
    """Dataset generation settings (section ``[shapes]``)."""
    n_samples: int = 2000
    n_pairs: int = 5
    magnitude_range: Tuple[float, float] = (0.0, 0.3)
    scale_jitter: float = 0.15
    n_warp_kernels: int = 4
    kernel_width: float = 0.5
    multimodal: bool = False
    neighborhood_radius: float = 0.05
    contact_gap: float = 0.005
    n_views: int = 3
    points_per_view: int = 200
    placement_range: float = 0.2
    target_rot_range: float = 0.0
    held_out_categories: Tuple[str, ...] = ("hook", "spatula")
    residual_tolerance: float = 0.1
    min_mode_separation_deg: float = 15.0
    min_mode_separation_m: float = 0.03
    max_retries: int = 5

    def training_categories(self) -> List[int]:
        held = {category_id(name) for name in self.held_out_categories}
        return [cid for cid in sorted(CATALOG) if cid not in held]


# Diversity tiers: (max magnitude, anisotropic scale jitter).
DIVERSITY_TIERS: Dict[str, Tuple[float, float]] = {
    "low": (0.1, 0.05),
    "mid": (0.3, 0.15),
    "high": (0.6, 0.30),
}


def with_tier(config: ShapeConfig, tier: str) -> ShapeConfig:
    """Return ``config`` with the deformation ranges of a diversity tier."""
    if tier not in DIVERSITY_TIERS:
        raise ValueError(f"unknown diversity tier '{tier}' (expected one of {sorted(DIVERSITY_TIERS)})")
    magnitude, jitter = DIVERSITY_TIERS[tier]
    return replace(config, magnitude_range=(0.0, magnitude), scale_jitter=jitter)


# ---------------------------------------------------------------------------
# Primitives. Each returns (points, normals) on a grid whose size never depends
# on the instance parameters.
# ---------------------------------------------------------------------------

Surface = Tuple[np.ndarray, np.ndarray]


def _cylinder(radius: float, height: float, n_around: int, n_along: int, z0: float = 0.0) -> Surface:
    u = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    v = z0 + (np.arange(n_along) + 0.5) / n_along * height
    uu, vv = np.meshgrid(u, v, indexing="ij")
    normals = np.stack([np.cos(uu), np.sin(uu), np.zeros_like(uu)], axis=-1).reshape(-1, 3)
    points = np.stack([radius * np.cos(uu), radius * np.sin(uu), vv], axis=-1).reshape(-1, 3)
    return points, normals


def _frustum(r0: float, r1: float, z0: float, z1: float, n_around: int, n_along: int) -> Surface:
    u = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    s = (np.arange(n_along) + 0.5) / n_along
    uu, ss = np.meshgrid(u, s, indexing="ij")
    r = r0 + (r1 - r0) * ss
    z = z0 + (z1 - z0) * ss
    points = np.stack([r * np.cos(uu), r * np.sin(uu), z], axis=-1).reshape(-1, 3)
    slope = (r0 - r1) / (z1 - z0)
    normals = np.stack([np.cos(uu), np.sin(uu), np.full_like(uu, slope)], axis=-1).reshape(-1, 3)
    return points, normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _disc(radius: float, n_rings: int, n_around: int, z: float, facing: float) -> Surface:
    u = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    r = (np.arange(n_rings) + 0.5) / n_rings * radius
    rr, uu = np.meshgrid(r, u, indexing="ij")
    points = np.stack([rr * np.cos(uu), rr * np.sin(uu), np.full_like(rr, z)], axis=-1).reshape(-1, 3)
    normals = np.tile([0.0, 0.0, facing], (points.shape[0], 1))
    return points, normals


def _torus_arc(major: float, minor: float, arc0: float, arc1: float, n_major: int, n_minor: int) -> Surface:
    """Tube of radius ``minor`` swept along an arc of radius ``major`` in the xz-plane."""
    phi = arc0 + (np.arange(n_major) + 0.5) / n_major * (arc1 - arc0)
    psi = np.linspace(0.0, 2 * np.pi, n_minor, endpoint=False)
    pp, ss = np.meshgrid(phi, psi, indexing="ij")
    radial = np.stack([np.cos(pp), np.zeros_like(pp), np.sin(pp)], axis=-1)
    side = np.array([0.0, 1.0, 0.0])
    normals = np.cos(ss)[..., None] * radial + np.sin(ss)[..., None] * side
    points = major * radial + minor * normals
    return points.reshape(-1, 3), normals.reshape(-1, 3)


def _sphere_cap(radius: float, theta_max: float, n_polar: int, n_around: int) -> Surface:
    """Cap around the -z pole, opening upward."""
    theta = (np.arange(n_polar) + 0.5) / n_polar * theta_max
    phi = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    normals = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), -np.cos(tt)], axis=-1).reshape(-1, 3)
    return radius * normals, normals


def _box(size: Sequence[float], counts: Sequence[int]) -> Surface:
    """Six faces of an axis-aligned box centred at the origin."""
    half = np.asarray(size, dtype=np.float64) / 2.0
    points, normals = [], []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        ua = (np.arange(counts[a]) + 0.5) / counts[a] * 2 - 1
        ub = (np.arange(counts[b]) + 0.5) / counts[b] * 2 - 1
        ga, gb = np.meshgrid(ua, ub, indexing="ij")
        for sign in (-1.0, 1.0):
            p = np.zeros(ga.shape + (3,))
            p[..., axis] = sign * half[axis]
            p[..., a] = ga * half[a]
            p[..., b] = gb * half[b]
            n = np.zeros_like(p)
            n[..., axis] = sign
            points.append(p.reshape(-1, 3))
            normals.append(n.reshape(-1, 3))
    return np.concatenate(points), np.concatenate(normals)


def _place(surface: Surface, offset=(0.0, 0.0, 0.0), rotvec=(0.0, 0.0, 0.0)) -> Surface:
    rotation = so3_exp(rotvec)
    points, normals = surface
    return points @ rotation.T + np.asarray(offset), normals @ rotation.T


# ---------------------------------------------------------------------------
# Category builders
# ---------------------------------------------------------------------------

def _mug(rng: np.random.Generator) -> List[Surface]:
    r = rng.uniform(0.035, 0.05)
    h = rng.uniform(0.08, 0.12)
    handle = rng.uniform(0.25, 0.35) * h
    tube = rng.uniform(0.006, 0.01)
    return [
        _cylinder(r, h, 24, 12),
        _disc(r, 3, 24, 0.0, -1.0),
        _place(_torus_arc(handle, tube, -np.pi / 2, np.pi / 2, 14, 6), offset=(r, 0.0, h / 2)),
    ]


def _pan(rng: np.random.Generator) -> List[Surface]:
    r = rng.uniform(0.07, 0.1)
    h = rng.uniform(0.025, 0.045)
    length = rng.uniform(0.08, 0.12)
    return [
        _cylinder(r, h, 32, 4),
        _disc(r, 4, 32, 0.0, -1.0),
        _place(_box((length, 0.022, 0.01), (10, 3, 2)), offset=(r + length / 2, 0.0, 0.7 * h)),
    ]


def _peg(rng: np.random.Generator) -> List[Surface]:
    r = rng.uniform(0.008, 0.015)
    h = rng.uniform(0.1, 0.16)
    return [
        _cylinder(r, h, 12, 20),
        _disc(r, 2, 12, h, 1.0),
        _disc(r, 2, 12, 0.0, -1.0),
    ]


def _bowl(rng: np.random.Generator) -> List[Surface]:
    r = rng.uniform(0.06, 0.09)
    return [_sphere_cap(r, np.deg2rad(rng.uniform(70.0, 85.0)), 10, 28)]


def _bottle(rng: np.random.Generator) -> List[Surface]:
    r = rng.uniform(0.03, 0.045)
    body = rng.uniform(0.1, 0.14)
    shoulder = rng.uniform(0.02, 0.035)
    neck_r = rng.uniform(0.01, 0.015)
    neck = rng.uniform(0.025, 0.04)
    return [
        _cylinder(r, body, 20, 12),
        _frustum(r, neck_r, body, body + shoulder, 20, 4),
        _cylinder(neck_r, neck, 10, 4, z0=body + shoulder),
        _disc(r, 3, 20, 0.0, -1.0),
    ]


def _brush(rng: np.random.Generator) -> List[Surface]:
    length = rng.uniform(0.12, 0.18)
    head = rng.uniform(0.04, 0.06)
    return [
        _box((length, 0.02, 0.015), (14, 3, 2)),
        _place(_box((head, 0.035, 0.025), (5, 4, 3)), offset=(length / 2 + head / 2, 0.0, -0.01)),
    ]


def _hook(rng: np.random.Generator) -> List[Surface]:
    r = rng.uniform(0.006, 0.01)
    h = rng.uniform(0.1, 0.15)
    bend = rng.uniform(0.025, 0.04)
    return [
        _cylinder(r, h, 10, 16),
        _disc(r * 3, 3, 16, 0.0, -1.0),
        _place(_torus_arc(bend, r, 0.0, np.pi, 12, 8), offset=(bend, 0.0, h)),
    ]


def _box_category(rng: np.random.Generator) -> List[Surface]:
    size = rng.uniform([0.06, 0.05, 0.04], [0.14, 0.1, 0.1])
    return [_box(size, (8, 6, 5))]


def _spatula(rng: np.random.Generator) -> List[Surface]:
    handle = rng.uniform(0.1, 0.15)
    blade = rng.uniform(0.05, 0.07)
    return [
        _place(_cylinder(0.008, handle, 10, 14), rotvec=(0.0, np.pi / 2, 0.0)),
        _place(_box((blade, 0.05, 0.004), (6, 6, 2)), offset=(handle + blade / 2, 0.0, -0.01)),
    ]


def _bracket(rng: np.random.Generator) -> List[Surface]:
    a = rng.uniform(0.08, 0.12)
    b = rng.uniform(0.05, 0.09)
    return [
        _box((a, 0.03, 0.008), (10, 3, 2)),
        _place(_box((0.008, 0.03, b), (2, 3, 8)), offset=(a / 2, 0.0, b / 2)),
    ]


@dataclass(frozen=True)
class CategorySpec:
    name: str
    builder: Callable[[np.random.Generator], List[Surface]]
    symmetric: bool


CATALOG: Dict[int, CategorySpec] = {
    0: CategorySpec("mug", _mug, False),
    1: CategorySpec("pan", _pan, False),
    2: CategorySpec("peg", _peg, True),
    3: CategorySpec("bowl", _bowl, True),
    4: CategorySpec("bottle", _bottle, True),
    5: CategorySpec("brush", _brush, False),
    6: CategorySpec("hook", _hook, False),
    7: CategorySpec("box", _box_category, True),
    8: CategorySpec("spatula", _spatula, False),
    9: CategorySpec("bracket", _bracket, False),
}


def category_id(name: str) -> int:
    for cid, spec in CATALOG.items():
        if spec.name == name:
            return cid
    raise CatalogError(f"unknown category name '{name}'")


def is_symmetric(cid: int) -> bool:
    return CATALOG[cid].symmetric


def bounding_diagonal(points: np.ndarray) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def generate_shape(category: int, instance_seed: int) -> CanonicalShape:
    """Build one instance of a catalog category.

    Args:
        category: Category id registered in :data:`CATALOG`.
        instance_seed: Seed for the instance dimensions.

    Returns:
        A canonical shape centred on its bounding box, uniformly scaled to a
        diagonal in [0.12, 0.25] m, with ids 0..N-1 given by the primitive grids.

    Raises:
        CatalogError: If the category is not registered.
    """
    if category not in CATALOG:
        raise CatalogError(f"unknown category id {category}")
    rng = np.random.default_rng([int(category), int(instance_seed)])
    surfaces = CATALOG[category].builder(rng)
    points = np.concatenate([s[0] for s in surfaces])
    normals = np.concatenate([s[1] for s in surfaces])

    center = (points.max(axis=0) + points.min(axis=0)) / 2.0
    points = points - center
    target = rng.uniform(*CANONICAL_DIAGONAL)
    points = points * (target / bounding_diagonal(points))

    return CanonicalShape(
        category_id=int(category),
        instance_seed=int(instance_seed),
        surface_points=points,
        surface_normals=normals / np.linalg.norm(normals, axis=1, keepdims=True),
        correspondence_ids=np.arange(points.shape[0], dtype=np.int64),
        scale=bounding_diagonal(points),
    )


def deform_shape(shape: CanonicalShape, params: DeformationParams) -> CanonicalShape:
    """Apply a smooth warp (anisotropic scale plus Gaussian-kernel displacements).

    The displacement field is rescaled so that no point moves further than
    ``params.magnitude * 0.25 * shape.scale``. Normals follow the warp through the
    inverse-transpose of its Jacobian. Correspondence ids are never touched.
    """
    if params.magnitude <= 0.0:
        return replace(
            shape,
            surface_points=shape.surface_points.copy(),
            surface_normals=shape.surface_normals.copy(),
            correspondence_ids=shape.correspondence_ids.copy(),
        )

    x = shape.surface_points
    n = x.shape[0]
    rng = np.random.default_rng(params.warp_seed)
    centers = x[rng.choice(n, size=min(params.n_warp_kernels, n), replace=False)]
    amplitudes = rng.normal(0.0, 0.1, size=centers.shape) * shape.scale
    sigma = params.kernel_width * shape.scale
    stretch = np.asarray(params.anisotropic_scale, dtype=np.float64) - 1.0

    diff = x[:, None, :] - centers[None, :, :]
    phi = np.exp(-np.sum(diff ** 2, axis=-1) / (2 * sigma ** 2))
    field_ = stretch * x + phi @ amplitudes

    # d field / dx, per point
    jac = np.broadcast_to(np.diag(stretch), (n, 3, 3)).copy()
    jac -= np.einsum("nk,kd,nke->nde", phi, amplitudes, diff) / sigma ** 2

    peak = float(np.max(np.linalg.norm(field_, axis=1)))
    cap = params.magnitude * DISPLACEMENT_CAP * shape.scale
    gain = 1.0 if peak <= cap else cap / peak

    points = x + gain * field_
    full_jac = np.eye(3)[None] + gain * jac
    normals = np.linalg.solve(np.transpose(full_jac, (0, 2, 1)), shape.surface_normals[..., None])[..., 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    return replace(
        shape,
        surface_points=points,
        surface_normals=normals,
        correspondence_ids=shape.correspondence_ids.copy(),
        scale=bounding_diagonal(points),
    )


def _neighborhood(points_world: np.ndarray, anchor: np.ndarray, radius: float) -> np.ndarray:
    return np.flatnonzero(np.linalg.norm(points_world - anchor, axis=1) <= radius)


def _require_shapes(pair: AlignedPair) -> Tuple[CanonicalShape, CanonicalShape]:
    if pair.shape_a is None or pair.shape_b is None:
        raise ValueError("aligned pair carries no canonical shapes (loaded pairs cannot be re-aligned)")
    return pair.shape_a, pair.shape_b


def anchor_neighborhoods(original: AlignedPair, part_anchor_id: int, radius: float):
    """Return (ids_a, ids_b, world_a, world_b) of the anchor neighbourhood of a pair."""
    shape_a, shape_b = _require_shapes(original)
    if not 0 <= part_anchor_id < len(shape_a):
        raise DegeneratePartError(f"anchor id {part_anchor_id} not present on grasped object")
    world_a = original.pose_a.apply(shape_a.surface_points)
    world_b = original.pose_b.apply(shape_b.surface_points)
    anchor = world_a[part_anchor_id]
    return _neighborhood(world_a, anchor, radius), _neighborhood(world_b, anchor, radius), world_a, world_b


def align_deformed_pair(
    original: AlignedPair,
    deformed_a: CanonicalShape,
    deformed_b: CanonicalShape,
    part_anchor_id: int,
    neighborhood_radius: float,
) -> AlignedPair:
    """Pose deformed shapes so their anchor neighbourhoods match the reference pair.

    Points of both objects lying within ``neighborhood_radius`` of the anchor (in
    the reference scene) are matched by correspondence id, and each deformed
    object is placed by a rigid fit of its own neighbourhood.

    Raises:
        DegeneratePartError: If either object has fewer than 3 usable
            neighbourhood correspondences.
    """
    ids_a, ids_b, world_a, world_b = anchor_neighborhoods(original, part_anchor_id, neighborhood_radius)
    if len(ids_a) < 3 or len(ids_b) < 3:
        raise DegeneratePartError(
            f"anchor {part_anchor_id} has {len(ids_a)}/{len(ids_b)} neighbourhood points (need 3 on each object)"
        )
    try:
        pose_a = kabsch_fit(deformed_a.surface_points[ids_a], world_a[ids_a])
        pose_b = kabsch_fit(deformed_b.surface_points[ids_b], world_b[ids_b])
    except DegenerateInputError as exc:
        raise DegeneratePartError(f"anchor {part_anchor_id} neighbourhood is degenerate: {exc}") from exc

    return replace(
        original,
        cloud_a=deformed_a.posed_cloud(pose_a),
        cloud_b=deformed_b.posed_cloud(pose_b),
        pose_a=pose_a,
        pose_b=pose_b,
        gt_relative=compose(pose_b.inverse(), pose_a),
        shape_a=deformed_a,
        shape_b=deformed_b,
        alt_relatives=[],
    )


def part_residual(original: AlignedPair, aligned: AlignedPair, part_anchor_id: int, radius: float) -> float:
    """Largest RMS deviation between aligned and original anchor neighbourhoods."""
    ids_a, ids_b, world_a, world_b = anchor_neighborhoods(original, part_anchor_id, radius)
    shape_a, shape_b = _require_shapes(aligned)
    res_a = fit_residual(aligned.pose_a, shape_a.surface_points[ids_a], world_a[ids_a])
    res_b = fit_residual(aligned.pose_b, shape_b.surface_points[ids_b], world_b[ids_b])
    return max(res_a, res_b)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(golden * i), r * np.sin(golden * i), z], axis=1)


def view_directions(n_views: int, seed) -> np.ndarray:
    """Unit vectors from the object towards each synthetic camera."""
    if n_views == 6:
        base = np.concatenate([np.eye(3), -np.eye(3)])
    else:
        base = _fibonacci_sphere(n_views)
    return base @ random_rotation(np.pi, seed).T


def render_partial_cloud(
    shape: CanonicalShape,
    pose: RigidTransform,
    n_views: int,
    points_per_view: int,
    seed,
) -> PointCloud:
    """Render a partial observation by back-face culling from synthetic viewpoints.

    Cameras sit on a sphere of radius 1.5 m around the object centre. A point is
    visible from a camera when its outward normal faces it (normal . view_dir < 0
    with view_dir pointing from camera to point).

    Returns:
        A float32 PointCloud (world frame) with int32 correspondence ids and at
        most ``points_per_view * n_views`` points, in surface order.
    """
    if n_views < 1:
        raise ValueError("render_partial_cloud needs at least one view")
    rng = np.random.default_rng(seed)
    points = pose.apply(shape.surface_points)
    normals = pose.rotate(shape.surface_normals)
    center = points.mean(axis=0)

    visible = np.zeros(points.shape[0], dtype=bool)
    for direction in view_directions(n_views, rng):
        camera = center + CAMERA_DISTANCE * direction
        view_dir = points - camera
        view_dir /= np.linalg.norm(view_dir, axis=1, keepdims=True)
        visible |= np.einsum("nd,nd->n", normals, view_dir) < 0.0

    keep = np.flatnonzero(visible)
    budget = points_per_view * n_views
    if keep.size > budget:
        keep = np.sort(rng.choice(keep, size=budget, replace=False))

    return PointCloud(
        points[keep].astype(np.float32),
        shape.correspondence_ids[keep].astype(np.int32),
        normals[keep].astype(np.float32),
    )


# ---------------------------------------------------------------------------
# Sample construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """Which objects and anchors a sample uses; ``None`` entries are drawn at random."""
    category_a: Optional[int] = None
    category_b: Optional[int] = None
    instance_seed_a: Optional[int] = None
    instance_seed_b: Optional[int] = None
    anchor_id: Optional[int] = None
    excluded_anchors: Tuple[int, ...] = ()
    categories: Optional[Tuple[int, ...]] = None
    multimodal: Optional[bool] = None


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` to unit vector ``b``."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return so3_exp(perp / np.linalg.norm(perp) * np.pi)
    return so3_exp(axis / s * math.atan2(s, c))


def reference_pair(
    shape_a: CanonicalShape,
    shape_b: CanonicalShape,
    anchor_id: int,
    contact_id: int,
    spin: float,
    gap: float,
) -> AlignedPair:
    """Place A so that its anchor point rests on B's contact point, normals opposed.

    B sits at the identity; ``spin`` rotates A about B's contact normal.
    """
    p_b = shape_b.surface_points[contact_id]
    n_b = shape_b.surface_normals[contact_id]
    p_a = shape_a.surface_points[anchor_id]
    n_a = shape_a.surface_normals[anchor_id]
    rotation = so3_exp(n_b * spin) @ _rotation_between(n_a, -n_b)
    translation = p_b + gap * n_b - rotation @ p_a
    pose_a = RigidTransform(rotation, translation)
    pose_b = RigidTransform.identity()
    return AlignedPair(
        cloud_a=shape_a.posed_cloud(pose_a),
        cloud_b=shape_b.posed_cloud(pose_b),
        pose_a=pose_a,
        pose_b=pose_b,
        gt_relative=pose_a,
        category_a=shape_a.category_id,
        category_b=shape_b.category_id,
        instance_seed_a=shape_a.instance_seed,
        instance_seed_b=shape_b.instance_seed,
        shape_a=shape_a,
        shape_b=shape_b,
    )


def _draw_deformation(config: ShapeConfig, rng: np.random.Generator) -> DeformationParams:
    lo, hi = config.magnitude_range
    jitter = config.scale_jitter
    return DeformationParams(
        magnitude=float(rng.uniform(lo, hi)),
        anisotropic_scale=tuple(float(v) for v in rng.uniform(1 - jitter, 1 + jitter, size=3)),
        warp_seed=int(rng.integers(2 ** 31)),
        n_warp_kernels=config.n_warp_kernels,
        kernel_width=config.kernel_width,
    )


def _check_size(shape: CanonicalShape) -> None:
    if not MIN_DIAGONAL <= shape.scale <= MAX_DIAGONAL:
        raise DegeneratePartError(f"deformed diagonal {shape.scale:.3f} m outside [{MIN_DIAGONAL}, {MAX_DIAGONAL}]")


def _build_attempt(config: ShapeConfig, spec: SampleSpec, rng: np.random.Generator, sample_seed: int) -> AlignmentSample:
    pool = list(spec.categories) if spec.categories is not None else config.training_categories()
    cat_a = spec.category_a if spec.category_a is not None else int(rng.choice(pool))
    cat_b = spec.category_b if spec.category_b is not None else int(rng.choice(pool))
    seed_a = spec.instance_seed_a if spec.instance_seed_a is not None else int(rng.integers(2 ** 31))
    seed_b = spec.instance_seed_b if spec.instance_seed_b is not None else int(rng.integers(2 ** 31))
    shape_a = generate_shape(cat_a, seed_a)
    shape_b = generate_shape(cat_b, seed_b)
    multimodal = config.multimodal if spec.multimodal is None else spec.multimodal

    n_modes = 2 if multimodal else 1
    references: List[AlignedPair] = []
    anchors: List[Tuple[int, int]] = []
    for mode in range(n_modes):
        if mode == 0 and spec.anchor_id is not None:
            anchor = spec.anchor_id
        else:
            candidates = np.setdiff1d(np.arange(len(shape_a)), np.asarray(spec.excluded_anchors, dtype=np.int64))
            anchor = int(rng.choice(candidates))
        contact = int(rng.integers(len(shape_b)))
        ref = reference_pair(shape_a, shape_b, anchor, contact, float(rng.uniform(-np.pi, np.pi)), config.contact_gap)
        ids_a, ids_b, _, _ = anchor_neighborhoods(ref, anchor, config.neighborhood_radius)
        if len(ids_a) < 3 or len(ids_b) < 3:
            raise DegeneratePartError(f"anchor {anchor} / contact {contact} neighbourhood too sparse")
        references.append(ref)
        anchors.append((anchor, contact))

    if multimodal:
        a, b = references[0].gt_relative, references[1].gt_relative
        apart_rot = np.rad2deg(rotation_distance(a, b)) >= config.min_mode_separation_deg
        apart_trans = np.linalg.norm(a.translation - b.translation) >= config.min_mode_separation_m
        if not (apart_rot or apart_trans):
            raise DegeneratePartError("the two alignment modes are too close")

    tolerance = config.residual_tolerance * config.neighborhood_radius
    pairs: List[AlignedPair] = []
    for _ in range(config.n_pairs):
        params_a = _draw_deformation(config, rng)
        params_b = replace(_draw_deformation(config, rng), magnitude=params_a.magnitude)
        deformed_a = deform_shape(shape_a, params_a)
        deformed_b = deform_shape(shape_b, params_b)
        _check_size(deformed_a)
        _check_size(deformed_b)
        mode = int(rng.integers(n_modes))

        per_mode: List[AlignedPair] = []
        for k, ref in enumerate(references):
            aligned = align_deformed_pair(ref, deformed_a, deformed_b, anchors[k][0], config.neighborhood_radius)
            if part_residual(ref, aligned, anchors[k][0], config.neighborhood_radius) >= tolerance:
                raise DegeneratePartError(f"anchor {anchors[k][0]} residual exceeds {tolerance:.4f} m")
            per_mode.append(aligned)

        chosen = per_mode[mode]
        placement = RigidTransform(
            random_rotation(config.target_rot_range, rng),
            rng.uniform(-config.placement_range, config.placement_range, size=3),
        )
        pose_a = compose(placement, chosen.pose_a)
        pose_b = compose(placement, chosen.pose_b)
        render_seed = int(rng.integers(2 ** 31))
        pairs.append(replace(
            chosen,
            cloud_a=render_partial_cloud(deformed_a, pose_a, config.n_views, config.points_per_view, render_seed),
            cloud_b=render_partial_cloud(deformed_b, pose_b, config.n_views, config.points_per_view, render_seed + 1),
            pose_a=pose_a,
            pose_b=pose_b,
            gt_relative=compose(pose_b.inverse(), pose_a),
            mode_index=mode,
            magnitude=params_a.magnitude,
            alt_relatives=[p.gt_relative for p in per_mode],
        ))

    return AlignmentSample(
        pairs=pairs,
        part_anchor_id=anchors[0][0],
        modes=[ref.gt_relative for ref in references],
        sample_seed=sample_seed,
        mode_anchors=anchors,
    )


def build_sample(config: ShapeConfig, sample_seed: int, spec: Optional[SampleSpec] = None) -> AlignmentSample:
    """Run the four generation steps for one sample.

    Object selection, deformation, correspondence-based alignment and rendering.
    A degenerate attempt (sparse anchor neighbourhood, out-of-range size, residual
    above tolerance, modes too close) is retried with a fresh derived seed.

    Args:
        config: Generation settings.
        sample_seed: Seed; generation is a pure function of (config, spec, seed).
        spec: Optional overrides for objects and anchors.

    Returns:
        The generated AlignmentSample.

    Raises:
        DegeneratePartError: If every retry failed.
        CatalogError: For unknown categories in ``spec``.
    """
    spec = spec or SampleSpec()
    last_error: Optional[DegeneratePartError] = None
    for attempt in range(config.max_retries):
        rng = np.random.default_rng([int(sample_seed), attempt])
        try:
            return _build_attempt(config, spec, rng, sample_seed)
        except DegeneratePartError as exc:
            logger.debug("sample %d attempt %d rejected: %s", sample_seed, attempt, exc)
            last_error = exc
    raise DegeneratePartError(
        f"sample {sample_seed} failed after {config.max_retries} attempts: {last_error}"
    )
