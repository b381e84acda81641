"""
Evaluation Module

Generalisation-mode datasets, error metrics, predictors and the experiments built
on them.

Error convention: the predicted transform acts on the observed grasped cloud. Its
composition with the random initial transform is compared with the ground truth
of every mode of the sample. Translation error is the distance between the
resulting grasped-cloud centroids (cm), rotation error the geodesic angle (deg),
and the reported mode is the one minimising t_cm + r_deg / 5.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from .alignment_graph import PairSubgraph, attach_candidates, attach_context, encode_pair
from .dataset_io import Dataset, config_from_dict, generate_dataset, sample_seeds
from .energy_model import EnergyModel, energy_forward
from .errors import ExclusionViolationError, InferenceFailure
from .icp import icp_baseline
from .langevin import SamplerConfig, optimize_alignment
from .se3 import RigidTransform, about_point, compose, random_transform, rotation_angle
from .shapes import (
    CATALOG,
    DIVERSITY_TIERS,
    AlignedPair,
    AlignmentSample,
    PointCloud,
    SampleSpec,
    ShapeConfig,
    build_sample,
    is_symmetric,
    with_tier,
)

logger = logging.getLogger(__name__)

CENSORED_TRANSLATION_CM = 50.0
CENSORED_ROTATION_DEG = 180.0


class EvalMode(Enum):
    SEEN_ALIGNMENTS = "SeenAlignments"
    UNSEEN_ALIGNMENTS = "UnseenAlignments"
    UNSEEN_INSTANCES = "UnseenInstances"
    UNSEEN_CATEGORIES = "UnseenCategories"
    MULTI_MODAL = "MultiModal"

    @classmethod
    def parse(cls, text: str) -> "EvalMode":
        for mode in cls:
            if text in (mode.value, mode.name, mode.name.lower(), mode.value.lower()):
                return mode
        raise ValueError(f"unknown evaluation mode '{text}' (expected one of {[m.value for m in cls]})")


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings (section ``[eval]``)."""
    n_samples: int = 100
    n_context: int = 4
    modes: Tuple[str, ...] = tuple(m.value for m in EvalMode)
    init_trans_range: float = 0.8
    init_rot_range: float = math.pi
    diversity_demos: Tuple[int, ...] = (2, 5, 10, 15)
    diversity_tiers: Tuple[str, ...] = ("low", "mid", "high")
    diversity_samples: int = 20
    bootstrap_samples: int = 1000
    confidence: float = 0.95
    icp_starts: int = 8
    baselines: Tuple[str, ...] = ("icp",)
    consistency_samples: int = 50
    consistency_tolerance: Tuple[float, float] = (1.0, 5.0)
    coverage_samples: int = 20
    coverage_restarts: int = 16
    coverage_min_hits: int = 2
    seed: int = 1000


# ---------------------------------------------------------------------------
# Training ledger and evaluation sets
# ---------------------------------------------------------------------------

@dataclass
class TrainingLedger:
    """What the training set used, read from its manifest."""
    config: ShapeConfig
    sample_seeds: Set[int] = field(default_factory=set)
    categories: Set[int] = field(default_factory=set)
    instances: Set[Tuple[int, int]] = field(default_factory=set)
    anchors: Dict[Tuple[int, int, int, int], Set[int]] = field(default_factory=dict)
    entries: List[Dict] = field(default_factory=list)

    @classmethod
    def from_manifest(cls, manifest: Dict) -> "TrainingLedger":
        ledger = cls(config=config_from_dict(ShapeConfig, manifest["config"]))
        for entry in manifest["manifest"]:
            ledger.entries.append(entry)
            ledger.sample_seeds.add(int(entry["sample_seed"]))
            pair = entry["pairs"][0]
            key = (pair["category_a"], pair["instance_seed_a"], pair["category_b"], pair["instance_seed_b"])
            ledger.anchors.setdefault(key, set()).add(int(entry["part_anchor_id"]))
            for p in entry["pairs"]:
                ledger.categories.update((p["category_a"], p["category_b"]))
                ledger.instances.update({(p["category_a"], p["instance_seed_a"]), (p["category_b"], p["instance_seed_b"])})
        return ledger


def _shape_key(sample: AlignmentSample) -> Tuple[int, int, int, int]:
    p = sample.pairs[0]
    return (p.category_a, p.instance_seed_a, p.category_b, p.instance_seed_b)


def _asymmetric(cats: Sequence[int]) -> bool:
    return not any(is_symmetric(c) for c in cats)


def check_exclusions(mode: EvalMode, sample: AlignmentSample, ledger: TrainingLedger) -> None:
    """Raise if ``sample`` breaks the exclusion rule of ``mode``.

    Raises:
        ExclusionViolationError: Carrying the offending sample seed.
    """
    seed = sample.sample_seed
    p = sample.pairs[0]
    cats = (p.category_a, p.category_b)
    if not _asymmetric(cats):
        raise ExclusionViolationError(f"sample {seed} uses a rotationally symmetric category", seed)
    key = _shape_key(sample)
    if mode is EvalMode.SEEN_ALIGNMENTS:
        if seed not in ledger.sample_seeds:
            raise ExclusionViolationError(f"sample {seed} is not in the training manifest", seed)
    elif mode is EvalMode.UNSEEN_ALIGNMENTS:
        if key not in ledger.anchors:
            raise ExclusionViolationError(f"sample {seed} uses shapes absent from training", seed)
        if sample.part_anchor_id in ledger.anchors[key]:
            raise ExclusionViolationError(f"sample {seed} reuses training anchor {sample.part_anchor_id}", seed)
    elif mode is EvalMode.UNSEEN_INSTANCES:
        if not set(cats) <= ledger.categories:
            raise ExclusionViolationError(f"sample {seed} uses an untrained category", seed)
        if {(p.category_a, p.instance_seed_a), (p.category_b, p.instance_seed_b)} & ledger.instances:
            raise ExclusionViolationError(f"sample {seed} reuses a training instance", seed)
    else:
        if set(cats) & ledger.categories:
            raise ExclusionViolationError(f"sample {seed} uses a training category", seed)
        if mode is EvalMode.MULTI_MODAL and not sample.is_multimodal:
            raise ExclusionViolationError(f"sample {seed} has a single mode", seed)


def build_eval_set(
    mode: EvalMode,
    n_samples: int,
    ledger: TrainingLedger,
    n_context: int = 4,
    seed: int = 1000,
) -> Dataset:
    """Generate ``n_samples`` samples of ``n_context + 1`` pairs obeying ``mode``'s exclusions.

    Raises:
        ExclusionViolationError: A generated sample broke the rule (build aborted).
        ValueError: The training manifest offers no usable shapes for the mode.
    """
    config = replace(ledger.config, n_pairs=n_context + 1)
    trained = sorted(c for c in ledger.categories if not is_symmetric(c))
    held_out = sorted(c for c in CATALOG if c not in ledger.categories and not is_symmetric(c))
    usable = [e for e in ledger.entries
              if _asymmetric((e["pairs"][0]["category_a"], e["pairs"][0]["category_b"]))]
    samples: List[AlignmentSample] = []
    seeds: List[int] = []

    if mode in (EvalMode.SEEN_ALIGNMENTS, EvalMode.UNSEEN_ALIGNMENTS):
        if not usable:
            raise ValueError(f"{mode.value}: training manifest has no non-symmetric samples")
        if mode is EvalMode.SEEN_ALIGNMENTS and len(usable) < n_samples:
            logger.warning("%s: only %d training samples qualify (asked for %d)", mode.value, len(usable), n_samples)
        fresh = sample_seeds(seed, n_samples)
        for i in range(min(n_samples, len(usable)) if mode is EvalMode.SEEN_ALIGNMENTS else n_samples):
            entry = usable[i % len(usable)]
            if mode is EvalMode.SEEN_ALIGNMENTS:
                s, spec = int(entry["sample_seed"]), None
            else:
                p = entry["pairs"][0]
                key = (p["category_a"], p["instance_seed_a"], p["category_b"], p["instance_seed_b"])
                s = fresh[i]
                spec = SampleSpec(
                    category_a=p["category_a"], category_b=p["category_b"],
                    instance_seed_a=p["instance_seed_a"], instance_seed_b=p["instance_seed_b"],
                    excluded_anchors=tuple(sorted(ledger.anchors[key])), multimodal=False,
                )
            samples.append(build_sample(config, s, spec))
            seeds.append(s)
    else:
        if mode is EvalMode.UNSEEN_INSTANCES:
            spec = SampleSpec(categories=tuple(trained), multimodal=False)
            pool = trained
        else:
            spec = SampleSpec(categories=tuple(held_out), multimodal=mode is EvalMode.MULTI_MODAL)
            pool = held_out
        if not pool:
            raise ValueError(f"{mode.value}: no non-symmetric categories available")
        seeds = sample_seeds(seed, n_samples)
        samples = generate_dataset(config, seed, seeds=seeds, spec=spec).samples

    for sample in samples:
        check_exclusions(mode, sample, ledger)
    logger.info("built %s eval set: %d samples", mode.value, len(samples))
    return Dataset(config=config, seeds=seeds, samples=samples)


# ---------------------------------------------------------------------------
# Trials and metrics
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Trial:
    """One evaluation problem: demos, and the held-out pair seen from a random start."""
    sample_id: int
    target: AlignedPair
    demos: List[AlignedPair]
    initial: RigidTransform
    observed_a: PointCloud
    seed: int = 0

    @property
    def observed_b(self) -> PointCloud:
        return self.target.cloud_b


def make_trial(sample: AlignmentSample, rng: np.random.Generator, init_ranges: Tuple[float, float] = (0.8, math.pi),
               n_context: Optional[int] = None) -> Trial:
    """Hold out the last pair and move its grasped cloud by a random transform about its centroid."""
    target = sample.pairs[-1]
    demos = list(sample.pairs[:-1])
    if n_context is not None:
        demos = demos[:n_context]
    initial = about_point(random_transform(init_ranges[0], init_ranges[1], rng), target.cloud_a.centroid())
    return Trial(
        sample_id=sample.sample_seed,
        target=target,
        demos=demos,
        initial=initial,
        observed_a=target.cloud_a.transformed(initial),
        seed=int(rng.integers(2 ** 31)),
    )


def mode_transforms(pair: AlignedPair) -> List[RigidTransform]:
    """World transforms taking the pair's grasped cloud to its pose under each mode."""
    relatives = pair.alt_relatives or [pair.gt_relative]
    to_canonical = pair.pose_a.inverse()
    return [compose(pair.pose_b, compose(rel, to_canonical)) for rel in relatives]


def mode_errors(pair: AlignedPair, predicted: RigidTransform, initial: RigidTransform) -> List[Tuple[float, float]]:
    """(translation error cm, rotation error deg) of a prediction against each mode in turn.

    ``predicted`` acts on the observed cloud, i.e. on ``initial`` applied to the
    ground-truth cloud.
    """
    pose = compose(predicted, initial)
    points = np.asarray(pair.cloud_a.points, dtype=np.float64)
    predicted_centroid = pose.apply(points).mean(axis=0)
    errors = []
    for gt in mode_transforms(pair):
        t_cm = 100.0 * float(np.linalg.norm(predicted_centroid - gt.apply(points).mean(axis=0)))
        r_deg = float(np.rad2deg(rotation_angle(pose.rotation @ gt.rotation.T)))
        errors.append((t_cm, r_deg))
    return errors


def alignment_errors(pair: AlignedPair, predicted: RigidTransform, initial: RigidTransform) -> Tuple[float, float, int]:
    """(translation error cm, rotation error deg, nearest mode) of a prediction."""
    errors = mode_errors(pair, predicted, initial)
    k = min(range(len(errors)), key=lambda i: errors[i][0] + errors[i][1] / 5.0)
    return errors[k][0], errors[k][1], k


@dataclass(eq=False)
class Prediction:
    transform: RigidTransform
    restarts: int = 1
    wall_time: float = 0.0
    candidates: List[RigidTransform] = field(default_factory=list)


@dataclass(eq=False)
class EvalRecord:
    sample_id: int
    mode: str
    transform: RigidTransform
    translation_cm: float
    rotation_deg: float
    wall_time: float = 0.0
    restarts: int = 0
    censored: bool = False
    nearest_mode: int = 0


class OraclePredictor:
    """Returns the ground truth; every error must come out as zero."""
    name = "oracle"

    def predict(self, trial: Trial) -> Prediction:
        return Prediction(trial.initial.inverse())


class RandomPredictor:
    """Places the grasped object at a uniform random offset from the truth (harness calibration)."""
    name = "random"

    def __init__(self, trans_range: float = 0.8, rot_range: float = math.pi, seed: int = 0):
        self.trans_range = trans_range
        self.rot_range = rot_range
        self.rng = np.random.default_rng(seed)

    def predict(self, trial: Trial) -> Prediction:
        offset = about_point(random_transform(self.trans_range, self.rot_range, self.rng), trial.target.cloud_a.centroid())
        return Prediction(compose(offset, trial.initial.inverse()))


class IcpPredictor:
    name = "icp"

    def __init__(self, n_starts: int = 8):
        self.n_starts = n_starts

    def predict(self, trial: Trial) -> Prediction:
        start = time.perf_counter()
        result = icp_baseline(trial.demos, trial.observed_a, trial.observed_b, self.n_starts, seed=trial.seed)
        return Prediction(result.transform, restarts=self.n_starts, wall_time=time.perf_counter() - start)


class ModelPredictor:
    """Langevin inference with the trained rotation and translation models."""
    name = "model"

    def __init__(self, encoder, rotation_model: EnergyModel, translation_model: EnergyModel, sampler: SamplerConfig):
        self.encoder = encoder
        self.rotation_model = rotation_model
        self.translation_model = translation_model
        self.sampler = sampler

    def predict(self, trial: Trial) -> Prediction:
        demos = [encode_pair(self.encoder, d.cloud_a, d.cloud_b) for d in trial.demos]
        test = encode_pair(self.encoder, trial.observed_a, trial.observed_b)
        result = optimize_alignment(
            demos, test, self.rotation_model, self.translation_model, self.sampler,
            seed=trial.seed, l_edge=self.rotation_model.config.l_edge,
        )
        return Prediction(result.best_transform, restarts=len(result.restarts), wall_time=result.wall_time,
                          candidates=[r.transform for r in result.restarts if not r.flagged])


def run_trial(trial: Trial, predictor, mode: str) -> EvalRecord:
    """Predict and score one trial; an inference failure becomes a censored record."""
    start = time.perf_counter()
    try:
        prediction = predictor.predict(trial)
    except InferenceFailure as exc:
        logger.warning("sample %d: inference failed (%s); recording censored error", trial.sample_id, exc)
        return EvalRecord(trial.sample_id, mode, RigidTransform.identity(), CENSORED_TRANSLATION_CM,
                          CENSORED_ROTATION_DEG, time.perf_counter() - start, 0, censored=True)
    t_cm, r_deg, k = alignment_errors(trial.target, prediction.transform, trial.initial)
    wall = prediction.wall_time or time.perf_counter() - start
    return EvalRecord(trial.sample_id, mode, prediction.transform, t_cm, r_deg, wall, prediction.restarts, nearest_mode=k)


def run_trials(
    samples: Sequence[AlignmentSample],
    predictor,
    seed: int = 0,
    mode: str = "",
    init_ranges: Tuple[float, float] = (0.8, math.pi),
    n_context: Optional[int] = None,
) -> List[EvalRecord]:
    """One trial per sample; trial ``i`` draws its start from the seed pair (seed, i)."""
    records = []
    for i, sample in enumerate(samples):
        trial = make_trial(sample, np.random.default_rng([seed, i]), init_ranges, n_context)
        records.append(run_trial(trial, predictor, mode))
        if (i + 1) % 10 == 0:
            logger.info("%s %s: %d/%d trials", getattr(predictor, "name", "predictor"), mode, i + 1, len(samples))
    return records


def evaluate(predictor, dataset: Dataset, mode: EvalMode, config: EvalConfig) -> Tuple[List[EvalRecord], Dict[str, float]]:
    """Run every sample of an eval set and summarise."""
    records = run_trials(dataset.samples, predictor, seed=config.seed, mode=mode.value,
                         init_ranges=(config.init_trans_range, config.init_rot_range), n_context=config.n_context)
    return records, summary(records)


def summary(records: Sequence[EvalRecord]) -> Dict[str, float]:
    """Mean and std of both errors (censored records included) plus counts."""
    t = np.array([r.translation_cm for r in records], dtype=np.float64)
    r = np.array([r.rotation_deg for r in records], dtype=np.float64)
    if len(records) == 0:
        nan = float("nan")
        return {"n": 0, "censored": 0, "trans_mean": nan, "trans_std": nan, "rot_mean": nan, "rot_std": nan}
    return {
        "n": len(records),
        "censored": int(sum(rec.censored for rec in records)),
        "trans_mean": float(t.mean()),
        "trans_std": float(t.std()),
        "rot_mean": float(r.mean()),
        "rot_std": float(r.std()),
    }


def bootstrap_ci(values: Sequence[float], n_boot: int = 1000, confidence: float = 0.95, seed: int = 0) -> Tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    means = values[rng.integers(values.size, size=(n_boot, values.size))].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def intervals_overlap(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class DiversityCell:
    tier: str
    n_demos: int
    n: int
    trans_mean: float
    rot_mean: float
    trans_ci: Tuple[float, float]
    rot_ci: Tuple[float, float]


def diversity_experiment(predictor, shape_config: ShapeConfig, config: EvalConfig) -> List[DiversityCell]:
    """Mean errors over the grid (number of demos) x (diversity tier)."""
    trained = tuple(c for c in shape_config.training_categories() if not is_symmetric(c))
    spec = SampleSpec(categories=trained, multimodal=False)
    cells = []
    for tier in config.diversity_tiers:
        if tier not in DIVERSITY_TIERS:
            raise ValueError(f"unknown diversity tier '{tier}'")
        for n_demos in config.diversity_demos:
            tier_config = replace(with_tier(shape_config, tier), n_pairs=n_demos + 1, multimodal=False)
            data = generate_dataset(tier_config, config.seed + n_demos, count=config.diversity_samples, spec=spec)
            records = run_trials(data.samples, predictor, seed=config.seed, mode=f"{tier}/{n_demos}",
                                 init_ranges=(config.init_trans_range, config.init_rot_range))
            t = [r.translation_cm for r in records]
            r = [r.rotation_deg for r in records]
            cells.append(DiversityCell(
                tier=tier,
                n_demos=n_demos,
                n=len(records),
                trans_mean=float(np.mean(t)),
                rot_mean=float(np.mean(r)),
                trans_ci=bootstrap_ci(t, config.bootstrap_samples, config.confidence, config.seed),
                rot_ci=bootstrap_ci(r, config.bootstrap_samples, config.confidence, config.seed),
            ))
            logger.info("diversity %s x %d demos: %.2f cm / %.2f deg", tier, n_demos, cells[-1].trans_mean, cells[-1].rot_mean)
    return cells


def self_consistency_experiment(predictor, samples: Sequence[AlignmentSample],
                                config: EvalConfig) -> Tuple[List[EvalRecord], Dict[str, float]]:
    """Trials whose held-out pair is also given as the first demonstration.

    A record succeeds when both errors are within ``config.consistency_tolerance``
    (cm, deg); censored records never succeed.

    Returns:
        Records and their :func:`summary` extended with ``success_rate``.
    """
    trans_tol, rot_tol = config.consistency_tolerance
    records = []
    for i, sample in enumerate(samples):
        trial = make_trial(sample, np.random.default_rng([config.seed, i]),
                           (config.init_trans_range, config.init_rot_range), config.n_context)
        trial.demos = [trial.target] + trial.demos[1:]
        records.append(run_trial(trial, predictor, "SelfConsistency"))
    stats = consistency_stats(records, config.consistency_tolerance)
    logger.info("self-consistency: %.0f%% of %d trials within (%.1f cm, %.1f deg)", 100.0 * stats["success_rate"],
                len(records), trans_tol, rot_tol)
    return records, stats


def consistency_stats(records: Sequence[EvalRecord], tolerance: Tuple[float, float]) -> Dict[str, float]:
    """:func:`summary` plus the share of uncensored records within ``tolerance`` (cm, deg)."""
    stats = summary(records)
    hits = [not r.censored and r.translation_cm <= tolerance[0] and r.rotation_deg <= tolerance[1] for r in records]
    stats["success_rate"] = float(np.mean(hits)) if hits else float("nan")
    return stats


@dataclass
class CoverageRow:
    """Per-sample mode coverage: restart hits per mode and the two ways of scoring the best pose."""
    sample_id: int
    hits: Tuple[int, ...]
    nearest_trans_cm: float
    nearest_rot_deg: float
    forced_trans_cm: float
    forced_rot_deg: float

    def covered(self, min_hits: int) -> bool:
        return len(self.hits) > 1 and min(self.hits) >= min_hits


def mode_coverage_experiment(predictor, samples: Sequence[AlignmentSample],
                             config: EvalConfig) -> Tuple[List[CoverageRow], Dict[str, float]]:
    """Count which mode each restart lands nearest to, on multimodal samples.

    The best pose is scored twice: against its nearest mode and forced against
    mode 0 alone. A failed inference counts as no hits at the censored error.

    Returns:
        One row per sample and ``{n, coverage_rate, nearest_trans_mean,
        nearest_rot_mean, forced_trans_mean, forced_rot_mean}``.
    """
    rows = []
    for i, sample in enumerate(samples):
        trial = make_trial(sample, np.random.default_rng([config.seed, i]),
                           (config.init_trans_range, config.init_rot_range), config.n_context)
        n_modes = len(mode_transforms(trial.target))
        try:
            prediction = predictor.predict(trial)
        except InferenceFailure as exc:
            logger.warning("sample %d: inference failed (%s); no mode reached", trial.sample_id, exc)
            rows.append(CoverageRow(trial.sample_id, (0,) * n_modes, CENSORED_TRANSLATION_CM, CENSORED_ROTATION_DEG,
                                    CENSORED_TRANSLATION_CM, CENSORED_ROTATION_DEG))
            continue
        hits = [0] * n_modes
        for candidate in prediction.candidates or [prediction.transform]:
            hits[alignment_errors(trial.target, candidate, trial.initial)[2]] += 1
        t_cm, r_deg, _ = alignment_errors(trial.target, prediction.transform, trial.initial)
        forced = mode_errors(trial.target, prediction.transform, trial.initial)[0]
        rows.append(CoverageRow(trial.sample_id, tuple(hits), t_cm, r_deg, forced[0], forced[1]))
    stats = coverage_stats(rows, config.coverage_min_hits)
    logger.info("mode coverage: %.0f%% of %d samples reach every mode; nearest %.2f cm vs forced %.2f cm",
                100.0 * stats["coverage_rate"], len(rows), stats["nearest_trans_mean"], stats["forced_trans_mean"])
    return rows, stats


def coverage_stats(rows: Sequence[CoverageRow], min_hits: int) -> Dict[str, float]:
    if not rows:
        nan = float("nan")
        return {"n": 0, "coverage_rate": nan, "nearest_trans_mean": nan, "nearest_rot_mean": nan,
                "forced_trans_mean": nan, "forced_rot_mean": nan}
    return {
        "n": len(rows),
        "coverage_rate": float(np.mean([r.covered(min_hits) for r in rows])),
        "nearest_trans_mean": float(np.mean([r.nearest_trans_cm for r in rows])),
        "nearest_rot_mean": float(np.mean([r.nearest_rot_deg for r in rows])),
        "forced_trans_mean": float(np.mean([r.forced_trans_cm for r in rows])),
        "forced_rot_mean": float(np.mean([r.forced_rot_deg for r in rows])),
    }


@dataclass
class ScalingRow:
    n_demos: int
    n_candidates: int
    nodes: int
    edges: int
    seconds: float


def _random_pair(k: int, channels: int, dtype: torch.dtype, gen: torch.Generator) -> PairSubgraph:
    return PairSubgraph(
        features=torch.randn((2, k, channels, 3), generator=gen, dtype=dtype),
        positions=0.1 * torch.randn((2, k, 3), generator=gen, dtype=dtype),
    )


def _linear_fit(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float, float]:
    """Least-squares ``y = slope * x + intercept``; returns (slope, intercept, r2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.unique(x).size < 2:
        return float("nan"), float("nan"), float("nan")
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - float((residual ** 2).sum() / total) if total > 0 else 1.0
    return float(slope), float(intercept), r2


def scaling_fit(rows: Sequence[ScalingRow]) -> Dict[str, float]:
    """Linear fits of forward time.

    ``slope``/``intercept``/``r2`` fit seconds against edge count over every row.
    ``*_demos`` fit seconds against N at the largest M, ``*_candidates`` against M
    at the largest N.
    """
    slope, intercept, r2 = _linear_fit([r.edges for r in rows], [r.seconds for r in rows])
    fit = {"slope": slope, "intercept": intercept, "r2": r2}
    m_fixed = max(r.n_candidates for r in rows)
    n_fixed = max(r.n_demos for r in rows)
    along_n = sorted((r for r in rows if r.n_candidates == m_fixed), key=lambda r: r.n_demos)
    along_m = sorted((r for r in rows if r.n_demos == n_fixed), key=lambda r: r.n_candidates)
    fit["slope_demos"], _, fit["r2_demos"] = _linear_fit([r.n_demos for r in along_n], [r.seconds for r in along_n])
    fit["slope_candidates"], _, fit["r2_candidates"] = _linear_fit(
        [r.n_candidates for r in along_m], [r.seconds for r in along_m])
    return fit


def scaling_probe(
    model: EnergyModel,
    k: int = 8,
    demo_counts: Sequence[int] = tuple(range(1, 9)),
    candidate_counts: Sequence[int] = (1, 16, 64, 256),
    repeats: int = 3,
    seed: int = 0,
) -> Tuple[List[ScalingRow], Dict[str, float]]:
    """Time energy_forward over a grid of demo counts N and candidate counts M.

    Returns:
        Rows and the fits of :func:`scaling_fit`.
    """
    gen = torch.Generator().manual_seed(seed)
    dtype = model.config.torch_dtype
    rows = []
    for n in demo_counts:
        demos = [_random_pair(k, model.config.channels, dtype, gen) for _ in range(n)]
        test = _random_pair(k, model.config.channels, dtype, gen)
        for m in candidate_counts:
            graph = attach_context(demos, test, l_edge=model.config.l_edge)
            if m > 1:
                attach_candidates(graph, m - 1)
            energy_forward(graph, model)
            times = []
            for _ in range(repeats):
                start = time.perf_counter()
                energy_forward(graph, model)
                times.append(time.perf_counter() - start)
            rows.append(ScalingRow(n, m, graph.num_nodes, graph.num_edges, float(np.median(times))))
    fit = scaling_fit(rows)
    logger.info("scaling: r2 %.3f along N (M=%d), %.3f along M (N=%d)", fit["r2_demos"], max(candidate_counts),
                fit["r2_candidates"], max(demo_counts))
    return rows, fit
