"""
ICP Module

Point-to-point iterative closest point and the registration baseline built on it.

The baseline registers the test target cloud onto each demonstration's target,
carries that demonstration's grasped cloud back into the test scene, then registers
the observed grasped cloud onto it. The demonstration with the lowest combined RMS
wins.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError
from .se3 import RigidTransform, about_point, compose, kabsch_fit, random_rotation
from .shapes import AlignedPair, PointCloud

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class IcpResult:
    """Registration of a source cloud onto a target cloud."""
    transform: RigidTransform
    rms: float
    history: List[float] = field(default_factory=list)
    converged: bool = True


def _points(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def icp(
    source,
    target,
    initial: Optional[RigidTransform] = None,
    max_iterations: int = 50,
    tolerance: float = 1e-7,
    tree: Optional[cKDTree] = None,
) -> IcpResult:
    """Register ``source`` onto ``target`` by point-to-point ICP.

    ``history[k]`` is the nearest-neighbour RMS at iteration k. It is non-increasing:
    each Kabsch fit cannot increase the error of the current matches, and re-matching
    cannot increase it either.
    """
    src = _points(source)
    dst = _points(target)
    tree = tree or cKDTree(dst)
    current = initial or RigidTransform.identity()
    history: List[float] = []
    converged = False
    for _ in range(max_iterations):
        moved = current.apply(src)
        dist, idx = tree.query(moved)
        history.append(float(np.sqrt(np.mean(dist ** 2))))
        if len(history) > 1 and history[-2] - history[-1] < tolerance:
            converged = True
            break
        try:
            step = kabsch_fit(moved, dst[idx])
        except DegenerateInputError:
            break
        current = compose(step, current)
    return IcpResult(current, history[-1], history, converged)


def icp_multi_start(source, target, n_starts: int = 8, seed: int = 0, max_iterations: int = 50) -> IcpResult:
    """Best of ``n_starts`` ICP runs; start 0 only aligns centroids, the others add a random rotation."""
    src = _points(source)
    dst = _points(target)
    tree = cKDTree(dst)
    rng = np.random.default_rng(seed)
    src_center, dst_center = src.mean(axis=0), dst.mean(axis=0)
    best: Optional[IcpResult] = None
    for k in range(n_starts):
        rotation = np.eye(3) if k == 0 else random_rotation(np.pi, rng)
        start = compose(RigidTransform.from_translation(dst_center - src_center), about_point(RigidTransform(rotation, np.zeros(3)), src_center))
        result = icp(src, dst, start, max_iterations=max_iterations, tree=tree)
        if best is None or result.rms < best.rms:
            best = result
    return best


@dataclass(eq=False)
class BaselineResult:
    """World transform to apply to the observed grasped cloud, with the chosen demo."""
    transform: RigidTransform
    demo_index: int
    rms: float
    converged: bool


def icp_baseline(
    demos: Sequence[AlignedPair],
    observed_a: PointCloud,
    observed_b: PointCloud,
    n_starts: int = 8,
    seed: int = 0,
) -> BaselineResult:
    """Align the observed grasped object by copying the closest demonstration.

    Args:
        demos: Demonstration pairs (clouds in their own world frames).
        observed_a: Grasped-object cloud in its observed pose.
        observed_b: Target-object cloud.
        n_starts: Random ICP starts per registration.
        seed: Seed for the starts.

    Returns:
        The transform for ``observed_a`` from the demo with the lowest combined RMS.
        ``converged`` is False if any registration of that demo hit the iteration
        limit; the result is returned anyway.
    """
    if not demos:
        raise ValueError("icp_baseline needs at least one demonstration")
    best: Optional[BaselineResult] = None
    for i, demo in enumerate(demos):
        target_fit = icp_multi_start(observed_b, demo.cloud_b, n_starts, seed + 2 * i)
        desired_a = target_fit.transform.inverse().apply(_points(demo.cloud_a))
        grasp_fit = icp_multi_start(observed_a, desired_a, n_starts, seed + 2 * i + 1)
        rms = target_fit.rms + grasp_fit.rms
        if best is None or rms < best.rms:
            best = BaselineResult(grasp_fit.transform, i, rms, target_fit.converged and grasp_fit.converged)
    if not best.converged:
        logger.warning("icp baseline: best registration (demo %d) did not converge", best.demo_index)
    return best
