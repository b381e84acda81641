"""
Langevin Module

Energy minimisation over SE(3) by Langevin dynamics.

Each step moves every candidate by

    expmap(-(step_scale / 2) * g) . expmap(eps),   eps ~ N(0, sigma_k^2)

about the centroid of its grasped-object nodes, where g is the pose gradient at
identity. A rotation pass zeroes the translation components of g and eps, a
translation pass zeroes the rotation components. Restarts are candidates of one
graph and are optimised together.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .alignment_graph import (
    AlignmentGraph,
    PairSubgraph,
    attach_candidates,
    attach_context,
    transform_candidates,
)
from .energy_model import ROTATION_MODE, TRANSLATION_MODE, energy_forward, pose_gradients
from .errors import DigestMismatchError, InconsistentWaypointsError, InferenceFailure
from .se3 import RigidTransform, Twist, about_point, compose, expmap, random_transform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    """Langevin sampler settings (section ``[sampler]``)."""
    n_steps: int = 150
    refine_steps: int = 30
    n_restarts: int = 8
    step_scale_rot: float = 1e-2
    step_scale_trans: float = 1e-3
    sigma0_rot_deg: float = 5.0
    sigma0_trans: float = 0.02
    sigma_decay: float = 0.98
    halve_after: int = 10
    mode_order: Tuple[str, ...] = (ROTATION_MODE, TRANSLATION_MODE)
    final_refine: bool = True
    init_trans_range: float = 0.8
    init_rot_range: float = float(np.pi)
    chunk_size: int = 8
    budget_seconds: Optional[float] = None
    seed: int = 0

    def validate(self) -> "SamplerConfig":
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.sigma0_rot_deg < 0 or self.sigma0_trans < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0.0 < self.sigma_decay <= 1.0:
            raise ValueError("sigma_decay must lie in (0, 1] so the noise schedule is non-increasing")
        for mode in self.mode_order:
            if mode not in (ROTATION_MODE, TRANSLATION_MODE):
                raise ValueError(f"unknown mode '{mode}' in mode_order")
        return self

    def step_scale(self, mode: str) -> float:
        return self.step_scale_rot if mode == ROTATION_MODE else self.step_scale_trans

    def sigma0(self, mode: str) -> float:
        return np.deg2rad(self.sigma0_rot_deg) if mode == ROTATION_MODE else self.sigma0_trans


def noise_schedule(sigma0: float, decay: float, n_steps: int) -> np.ndarray:
    """sigma_k = sigma0 * decay^k for k = 0 .. n_steps-1 (non-increasing)."""
    return sigma0 * decay ** np.arange(n_steps)


@dataclass(eq=False)
class RestartResult:
    """One restart: the world transform applied to the observed grasped cloud."""
    transform: RigidTransform
    energy: float
    energies: Dict[str, float] = field(default_factory=dict)
    trajectory: List[float] = field(default_factory=list)
    flagged: bool = False


@dataclass(eq=False)
class InferenceResult:
    best_transform: RigidTransform
    best_energy: float
    restarts: List[RestartResult]
    best_index: int = 0
    wall_time: float = 0.0
    truncated: bool = False

    def to_dict(self) -> Dict:
        return {
            "best_index": self.best_index,
            "best_energy": self.best_energy,
            "best_transform": self.best_transform.to_vector12().tolist(),
            "wall_time_s": self.wall_time,
            "truncated": self.truncated,
            "restarts": [
                {
                    "energy": r.energy,
                    "energies": r.energies,
                    "flagged": r.flagged,
                    "transform": r.transform.to_vector12().tolist(),
                    "final_trajectory_energy": r.trajectory[-1] if r.trajectory else None,
                }
                for r in self.restarts
            ],
        }


def _mask(vector: np.ndarray, mode: str) -> np.ndarray:
    out = np.array(vector, dtype=np.float64)
    if mode == ROTATION_MODE:
        out[3:] = 0.0
    else:
        out[:3] = 0.0
    return out


def langevin_increment(gradient: np.ndarray, step_scale: float, sigma: float, mode: str,
                       rng: np.random.Generator) -> RigidTransform:
    """expmap(-(step_scale/2) g) . expmap(eps) with both twists restricted to ``mode``."""
    drift = _mask(-0.5 * step_scale * np.asarray(gradient, dtype=np.float64), mode)
    noise = _mask(rng.normal(0.0, 1.0, size=6) * sigma, mode) if sigma > 0 else np.zeros(6)
    return compose(expmap(Twist.from_vector(drift)), expmap(Twist.from_vector(noise)))


class LangevinState:
    """Per-candidate bookkeeping for one pass: accumulated transforms, step scales, streaks."""

    def __init__(self, n: int, step_scale: float):
        self.totals = [RigidTransform.identity() for _ in range(n)]
        self.scales = np.full(n, step_scale)
        self.rising = np.zeros(n, dtype=int)
        self.last = np.full(n, np.inf)
        self.flagged = np.zeros(n, dtype=bool)
        self.trajectories: List[List[float]] = [[] for _ in range(n)]
        self.expired = False


def langevin_step(
    graph: AlignmentGraph,
    model,
    step_scale: Union[float, np.ndarray],
    sigma: float,
    mode: str,
    rng: np.random.Generator,
    flagged: Optional[np.ndarray] = None,
) -> Tuple[List[RigidTransform], np.ndarray, np.ndarray]:
    """One Langevin update of every candidate of ``graph`` (applied in place).

    Returns:
        (world increments, energies before the step, non-finite flags). A
        candidate whose gradient is not finite is flagged and left where it is.
    """
    m = graph.n_candidates
    scales = np.broadcast_to(np.asarray(step_scale, dtype=np.float64), (m,))
    energies, grads = pose_gradients(graph, model)
    energies = energies.cpu().numpy().astype(np.float64)
    grads = grads.cpu().numpy().astype(np.float64)
    bad = ~np.isfinite(grads).all(axis=1) | ~np.isfinite(energies)
    if flagged is not None:
        bad |= flagged
    increments = []
    centroids = graph.cand_positions[:, 0].mean(dim=1).detach().cpu().numpy().astype(np.float64)
    for i in range(m):
        if bad[i]:
            increments.append(RigidTransform.identity())
            continue
        local = langevin_increment(grads[i], float(scales[i]), sigma, mode, rng)
        increments.append(about_point(local, centroids[i]))
    transform_candidates(graph, increments)
    return increments, energies, bad


def run_pass(
    graph: AlignmentGraph,
    model,
    mode: str,
    n_steps: int,
    config: SamplerConfig,
    rng: np.random.Generator,
    state: Optional[LangevinState] = None,
    deadline: Optional[float] = None,
) -> LangevinState:
    """Run ``n_steps`` Langevin steps of one mode on every candidate.

    A candidate's step scale halves after ``config.halve_after`` consecutive energy
    increases. Once ``time.perf_counter()`` passes ``deadline`` the pass stops early
    and ``state.expired`` is set.
    """
    if state is None:
        state = LangevinState(graph.n_candidates, config.step_scale(mode))
    else:
        state.scales = np.full(graph.n_candidates, config.step_scale(mode))
        state.rising[:] = 0
        state.last[:] = np.inf
    sigmas = noise_schedule(config.sigma0(mode), config.sigma_decay, n_steps)
    for k in range(n_steps):
        if deadline is not None and time.perf_counter() >= deadline:
            state.expired = True
            break
        increments, energies, bad = langevin_step(graph, model, state.scales, float(sigmas[k]), mode, rng, state.flagged)
        state.flagged |= bad
        for i, inc in enumerate(increments):
            state.totals[i] = compose(inc, state.totals[i])
            if bad[i]:
                continue
            state.trajectories[i].append(float(energies[i]))
            state.rising[i] = state.rising[i] + 1 if energies[i] > state.last[i] else 0
            state.last[i] = energies[i]
            if state.rising[i] >= config.halve_after:
                state.scales[i] *= 0.5
                state.rising[i] = 0
                logger.debug("candidate %d: %s step scale halved to %.3g", i, mode, state.scales[i])
    return state


def _check_digests(models: Sequence) -> None:
    digests = {getattr(m, "encoder_digest", None) for m in models} - {None}
    if len(digests) > 1:
        raise DigestMismatchError("rotation and translation models were trained on different encoders")


def _graph_digest(models: Sequence) -> Optional[str]:
    for m in models:
        if getattr(m, "encoder_digest", None):
            return m.encoder_digest
    return None


def _initial_transforms(graph: AlignmentGraph, n: int, config: SamplerConfig,
                        rng: np.random.Generator) -> List[RigidTransform]:
    center = graph.test.positions[0].mean(dim=0).detach().cpu().numpy().astype(np.float64)
    return [
        about_point(random_transform(config.init_trans_range, config.init_rot_range, rng), center)
        for _ in range(n)
    ]


def optimize_alignment(
    demos: Sequence[PairSubgraph],
    test: PairSubgraph,
    rotation_model,
    translation_model,
    config: SamplerConfig,
    seed: Optional[int] = None,
    l_edge: int = 6,
) -> InferenceResult:
    """Find the transform of the grasped test object minimising both energies.

    Per restart: a random initial transform, a rotation pass, a translation pass,
    then (if ``config.final_refine``) a short rotation pass. The restart with the
    lowest sum of rotation- and translation-model energies wins.

    Args:
        demos: Encoded demonstration pairs.
        test: Encoded test observation (grasped object as observed).
        rotation_model: Energy model trained with rotation-only negatives.
        translation_model: Energy model trained with translation-only negatives.
        config: Sampler settings.
        seed: Seed for initial transforms and noise (defaults to ``config.seed``).

    Returns:
        InferenceResult whose transforms map the observed grasped cloud to its
        predicted placement in world coordinates.

    Raises:
        DigestMismatchError: If the two models were trained on different encoders.
        InferenceFailure: If every restart was flagged non-finite.
    """
    config.validate()
    models = {ROTATION_MODE: rotation_model, TRANSLATION_MODE: translation_model}
    _check_digests(list(models.values()))
    rng = np.random.default_rng(config.seed if seed is None else seed)
    start = time.perf_counter()
    digest = _graph_digest(list(models.values()))
    deadline = None if config.budget_seconds is None else start + config.budget_seconds

    restarts: List[RestartResult] = []
    truncated = False
    remaining = config.n_restarts
    while remaining > 0:
        if restarts and deadline is not None and time.perf_counter() >= deadline:
            truncated = True
            logger.warning("inference budget of %.1f s used; %d restarts skipped", config.budget_seconds, remaining)
            break
        chunk = min(config.chunk_size, remaining)
        graph = attach_context(demos, test, l_edge=l_edge, encoder_digest=digest)
        if chunk > 1:
            attach_candidates(graph, chunk - 1)
        inits = _initial_transforms(graph, chunk, config, rng)
        transform_candidates(graph, inits)

        state = LangevinState(chunk, config.step_scale_rot)
        state.totals = list(inits)
        passes = [(mode, config.n_steps) for mode in config.mode_order]
        if config.final_refine:
            passes.append((ROTATION_MODE, config.refine_steps))
        for mode, n_steps in passes:
            state = run_pass(graph, models[mode], mode, n_steps, config, rng, state, deadline=deadline)
            if state.expired:
                break

        finals = {mode: energy_forward(graph, model).cpu().numpy().astype(np.float64)
                  for mode, model in models.items()}
        for i in range(chunk):
            parts = {mode: float(finals[mode][i]) for mode in models}
            total = sum(parts.values())
            flagged = bool(state.flagged[i]) or not np.isfinite(total)
            restarts.append(RestartResult(
                transform=state.totals[i],
                energy=total if not flagged else float("inf"),
                energies=parts,
                trajectory=state.trajectories[i],
                flagged=flagged,
            ))
        remaining -= chunk
        if state.expired:
            truncated = True
            logger.warning("inference budget of %.1f s used mid-descent; best of %d partial restarts kept, "
                           "%d skipped", config.budget_seconds, chunk, remaining)
            break

    usable = [i for i, r in enumerate(restarts) if not r.flagged]
    if not usable:
        raise InferenceFailure(f"all {len(restarts)} restarts produced non-finite energies or gradients")
    best = min(usable, key=lambda i: restarts[i].energy)
    wall = time.perf_counter() - start
    logger.debug("inference: %d restarts, best energy %.4f, %.2f s", len(restarts), restarts[best].energy, wall)
    return InferenceResult(
        best_transform=restarts[best].transform,
        best_energy=restarts[best].energy,
        restarts=restarts,
        best_index=best,
        wall_time=wall,
        truncated=truncated,
    )


def infer_waypoints(
    demo_trajectories: Sequence[Sequence[PairSubgraph]],
    test_waypoints: Sequence[PairSubgraph],
    rotation_model,
    translation_model,
    config: SamplerConfig,
    seed: Optional[int] = None,
    l_edge: int = 6,
) -> List[InferenceResult]:
    """Solve each waypoint independently, conditioning on the demos' matching waypoint.

    Raises:
        InconsistentWaypointsError: If the demos (or the test) disagree on the number
            of waypoints.
    """
    lengths = {len(traj) for traj in demo_trajectories}
    if not demo_trajectories or len(lengths) != 1:
        raise InconsistentWaypointsError(f"demonstrations have waypoint counts {sorted(lengths)}")
    (n_waypoints,) = lengths
    if len(test_waypoints) != n_waypoints:
        raise InconsistentWaypointsError(
            f"test observation has {len(test_waypoints)} waypoints, demonstrations have {n_waypoints}"
        )
    base = config.seed if seed is None else seed
    results = []
    for w in range(n_waypoints):
        demos = [traj[w] for traj in demo_trajectories]
        results.append(optimize_alignment(demos, test_waypoints[w], rotation_model, translation_model,
                                          config, seed=base + w, l_edge=l_edge))
    return results


def write_inference_report(results: Union[InferenceResult, Sequence[InferenceResult]], path: Union[str, Path]) -> Path:
    """Write one or more inference results as JSON."""
    if isinstance(results, InferenceResult):
        results = [results]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"waypoints": [r.to_dict() for r in results]}
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path
