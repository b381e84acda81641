"""
Pipeline Module

Coordinates the stages of a run: data generation, encoder pretraining, energy
model training, inference, evaluation and plotting.

Each stage reads the artifacts of the previous one by path convention under the
run's output directory, so stages can be chained without editing files.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .alignment_graph import PairSubgraph, encode_pair
from .checkpoints import load_checkpoint, module_digest, save_checkpoint
from .config import RunConfig, write_resolved
from .dataset_io import generate_dataset, load_dataset, load_manifest, sample_seeds, save_dataset
from .encoder import (
    GeometryEncoder,
    PretrainResult,
    build_encoder,
    build_occupancy_dataset,
    freeze,
    occupancy_accuracy,
    pretrain_encoder,
)
from .energy_model import ROTATION_MODE, TRANSLATION_MODE, EnergyModel
from .errors import ConfigError, DatasetFormatError, DigestMismatchError, TrainingDivergenceError
from .evaluation import (
    EvalMode,
    EvalRecord,
    IcpPredictor,
    ModelPredictor,
    OraclePredictor,
    RandomPredictor,
    TrainingLedger,
    build_eval_set,
    diversity_experiment,
    evaluate,
    make_trial,
    consistency_stats,
    coverage_stats,
    mode_coverage_experiment,
    scaling_probe,
    self_consistency_experiment,
)
from .langevin import InferenceResult, infer_waypoints, optimize_alignment, write_inference_report
from .report import ReportFiles, ReportWriter, read_coverage, read_diversity, read_records, read_scaling
from .shapes import PointCloud, SampleSpec, build_sample
from .training import TrainResult, load_energy_model, train

logger = logging.getLogger(__name__)

Observation = Tuple[PointCloud, PointCloud]


def load_observation(path: Path) -> List[Observation]:
    """Read (grasped, target) clouds from an ``.npz`` file, one per waypoint.

    Keys are ``cloud_a`` / ``cloud_b`` for a single waypoint, or ``cloud_a_<w>`` /
    ``cloud_b_<w>`` for waypoints ``w = 0, 1, ...``.

    Raises:
        DatasetFormatError: Keys are missing or a cloud is not an (N, 3) array.
    """
    path = Path(path)
    try:
        with np.load(path) as archive:
            arrays = {name: np.asarray(archive[name], dtype=np.float64) for name in archive.files}
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: unreadable observation file ({exc})") from exc
    if "cloud_a" in arrays and "cloud_b" in arrays:
        names = [("cloud_a", "cloud_b")]
    else:
        names = []
        while f"cloud_a_{len(names)}" in arrays and f"cloud_b_{len(names)}" in arrays:
            names.append((f"cloud_a_{len(names)}", f"cloud_b_{len(names)}"))
    if not names:
        raise DatasetFormatError(f"{path}: expected keys cloud_a/cloud_b or cloud_a_0/cloud_b_0")
    observations = []
    for key_a, key_b in names:
        for key in (key_a, key_b):
            if arrays[key].ndim != 2 or arrays[key].shape[1] != 3 or len(arrays[key]) == 0:
                raise DatasetFormatError(f"{path}: '{key}' has shape {arrays[key].shape}, expected (N, 3)")
        observations.append((PointCloud(arrays[key_a]), PointCloud(arrays[key_b])))
    return observations


def save_observation(path: Path, observations: Sequence[Observation]) -> Path:
    """Inverse of :func:`load_observation`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if len(observations) == 1:
        arrays = {"cloud_a": observations[0][0].points, "cloud_b": observations[0][1].points}
    else:
        arrays = {}
        for w, (cloud_a, cloud_b) in enumerate(observations):
            arrays[f"cloud_a_{w}"] = cloud_a.points
            arrays[f"cloud_b_{w}"] = cloud_b.points
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    return path


class AlignmentPipeline:
    """
    Runs every stage of the alignment workflow against one output directory.

    Layout under ``config.output_dir``::

        data/train.bin, data/train.json      training set and manifest
        encoder/encoder.ckpt                 pretrained encoder + occupancy decoder
        models/{rotation,translation}.ckpt   energy models
        models/metrics_<mode>.csv            per-step training metrics
        eval/                                eval sets, per-mode CSVs, summary.md, SVGs
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = config.output_dir
        self._encoder: Optional[GeometryEncoder] = None
        self._models: Optional[Tuple[EnergyModel, EnergyModel]] = None

    # -- paths ----------------------------------------------------------------

    @property
    def data_path(self) -> Path:
        return self.root / "data" / "train.bin"

    @property
    def encoder_path(self) -> Path:
        return self.root / "encoder" / "encoder.ckpt"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    def model_path(self, mode: str) -> Path:
        return self.models_dir / f"{mode}.ckpt"

    def _require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run '{stage}' first")
        return path

    def record_config(self) -> Path:
        return write_resolved(self.config, self.root)

    # -- stages -------------------------------------------------------------------

    def generate_data(self, count: Optional[int] = None) -> Path:
        """Generate the training set and write it with its manifest."""
        dataset = generate_dataset(self.config.shapes, self.config.seed, count=count, jobs=self.config.run.jobs)
        path = save_dataset(dataset, self.data_path)
        logger.info("dataset digest %s", dataset.digest)
        return path

    def pretrain_encoder(self) -> PretrainResult:
        """Pretrain the encoder as an occupancy network and save both modules."""
        cfg = self.config.encoder
        examples = build_occupancy_dataset(cfg.n_examples, cfg, self.config.shapes, self.config.seed)
        encoder, decoder = build_encoder(cfg)
        try:
            result = pretrain_encoder(examples, cfg, encoder, decoder)
        except TrainingDivergenceError as exc:
            if exc.result is not None:
                self._save_encoder(exc.result, examples)
            raise
        self._save_encoder(result, examples)
        return result

    def _save_encoder(self, result: PretrainResult, examples) -> Path:
        n_val = max(1, int(round(len(examples) * self.config.encoder.val_fraction)))
        surface_rate, far_rate = occupancy_accuracy(result.encoder, result.decoder, examples[-n_val:])
        logger.info("held-out occupancy accuracy: surface %.3f, far %.3f", surface_rate, far_rate)
        return save_checkpoint(
            self.encoder_path,
            "encoder",
            self.config.encoder,
            {"encoder": result.encoder, "decoder": result.decoder},
            step=len(result.history),
            extra={
                "digest": module_digest(result.encoder),
                "initial_val_loss": result.initial_val_loss,
                "best_val_loss": result.best_val_loss,
                "surface_rate": surface_rate,
                "far_rate": far_rate,
                "diverged": result.diverged,
            },
        )

    def load_encoder(self) -> GeometryEncoder:
        """Frozen encoder from ``encoder/encoder.ckpt``.

        Raises:
            DigestMismatchError: The checkpoint was built with a different encoder config
                or its weights do not match the recorded digest.
        """
        if self._encoder is None:
            payload = load_checkpoint(self._require(self.encoder_path, "pretrain-encoder"), "encoder",
                                      expected_config=self.config.encoder)
            encoder = GeometryEncoder(self.config.encoder).to(self.config.encoder.torch_dtype)
            encoder.load_state_dict(payload["state"]["encoder"])
            if module_digest(encoder) != payload["extra"].get("digest"):
                raise DigestMismatchError(f"{self.encoder_path}: encoder weights do not match their digest")
            self._encoder = freeze(encoder)
        return self._encoder

    def smoke_samples(self) -> List:
        """Fixed validation samples for checkpoint selection (disjoint seed stream from training)."""
        shapes = self.config.shapes
        spec = SampleSpec(categories=tuple(shapes.training_categories()))
        seeds = sample_seeds(self.config.seed + 1, self.config.train.smoke_samples)
        return [build_sample(shapes, s, spec) for s in seeds]

    def train_models(self) -> TrainResult:
        dataset = load_dataset(self._require(self.data_path, "gen-data"))
        encoder = self.load_encoder()
        result = train(
            encoder,
            dataset.samples,
            self.smoke_samples(),
            self.config.model,
            self.config.train,
            self.config.sampler,
            out_dir=self.models_dir,
        )
        self._models = (result.models[ROTATION_MODE], result.models[TRANSLATION_MODE])
        return result

    def load_models(self) -> Tuple[EnergyModel, EnergyModel]:
        """Rotation and translation models, checked against the current encoder."""
        if self._models is None:
            digest = module_digest(self.load_encoder())
            self._models = tuple(
                load_energy_model(self._require(self.model_path(mode), "train"), mode, digest)
                for mode in (ROTATION_MODE, TRANSLATION_MODE)
            )
        return self._models

    # -- inference ----------------------------------------------------------------

    def infer(
        self,
        demos: Sequence[Sequence[Observation]],
        test: Sequence[Observation],
        budget_seconds: Optional[float] = None,
        report_path: Optional[Path] = None,
    ) -> List[InferenceResult]:
        """Align ``test`` given demonstration trajectories (one observation per waypoint).

        Args:
            demos: ``demos[d][w]`` is demo d's (grasped, target) clouds at waypoint w.
            test: ``test[w]`` is the observed (grasped, target) clouds at waypoint w.
            budget_seconds: Optional wall-time cap per waypoint.
            report_path: JSON report destination (default ``inference.json`` in the run dir).
        """
        encoder = self.load_encoder()
        rotation, translation = self.load_models()
        sampler = self.config.sampler
        if budget_seconds is not None:
            sampler = replace(sampler, budget_seconds=budget_seconds)
        demo_graphs: List[List[PairSubgraph]] = [[encode_pair(encoder, *obs) for obs in traj] for traj in demos]
        test_graphs = [encode_pair(encoder, *obs) for obs in test]
        l_edge = rotation.config.l_edge
        if len(test_graphs) == 1 and all(len(t) == 1 for t in demo_graphs):
            results = [optimize_alignment([t[0] for t in demo_graphs], test_graphs[0], rotation, translation,
                                          sampler, seed=self.config.seed, l_edge=l_edge)]
        else:
            results = infer_waypoints(demo_graphs, test_graphs, rotation, translation, sampler,
                                      seed=self.config.seed, l_edge=l_edge)
        write_inference_report(results, report_path or self.root / "inference.json")
        return results

    def observation_from_dataset(self, path: Path, index: int) -> Tuple[List[List[Observation]], List[Observation], object]:
        """Demos and a randomly posed test observation taken from one stored sample."""
        dataset = load_dataset(path)
        if not 0 <= index < len(dataset.samples):
            raise DatasetFormatError(f"{path}: sample index {index} out of range (0..{len(dataset.samples) - 1})")
        sample = dataset.samples[index]
        trial = make_trial(sample, np.random.default_rng([self.config.seed, index]),
                           (self.config.eval.init_trans_range, self.config.eval.init_rot_range))
        demos = [[(d.cloud_a, d.cloud_b)] for d in trial.demos]
        return demos, [(trial.observed_a, trial.observed_b)], trial

    # -- evaluation ---------------------------------------------------------------

    def _predictors(self) -> Dict[str, object]:
        cfg = self.config.eval
        rotation, translation = self.load_models()
        predictors: Dict[str, object] = {
            "model": ModelPredictor(self.load_encoder(), rotation, translation, self.config.sampler),
        }
        for name in cfg.baselines:
            if name == "icp":
                predictors["icp"] = IcpPredictor(cfg.icp_starts)
            elif name == "oracle":
                predictors["oracle"] = OraclePredictor()
            elif name == "random":
                predictors["random"] = RandomPredictor(cfg.init_trans_range, cfg.init_rot_range, cfg.seed)
            else:
                raise ConfigError(f"unknown baseline '{name}'", "eval.baselines")
        return predictors

    def evaluate(
        self,
        modes: Sequence[EvalMode],
        diversity: bool = False,
        scaling: bool = False,
        consistency: bool = False,
        coverage: bool = False,
    ) -> ReportFiles:
        """Build the eval sets, run every predictor and write the report under ``eval/``.

        The optional experiments use the trained model only: ``diversity`` runs the
        demo-count x diversity grid, ``scaling`` times forward passes, ``consistency``
        repeats a demo as the test pair and ``coverage`` counts the modes reached by
        ``eval.coverage_restarts`` restarts on multimodal samples.
        """
        cfg = self.config.eval
        ledger = TrainingLedger.from_manifest(load_manifest(self._require(self.data_path, "gen-data")))
        predictors = self._predictors()
        by_predictor: Dict[str, Dict[str, List[EvalRecord]]] = {name: {} for name in predictors}
        for mode in modes:
            eval_set = build_eval_set(mode, cfg.n_samples, ledger, cfg.n_context, cfg.seed)
            save_dataset(eval_set, self.eval_dir / f"{mode.value}.bin")
            for name, predictor in predictors.items():
                records, stats = evaluate(predictor, eval_set, mode, cfg)
                by_predictor[name][mode.value] = records
                logger.info("%s on %s: %.2f cm / %.2f deg (%d censored)", name, mode.value,
                            stats["trans_mean"], stats["rot_mean"], stats["censored"])
        cells = diversity_experiment(predictors["model"], self.config.shapes, cfg) if diversity else None
        rows, fit = (None, None)
        if scaling:
            rows, fit = scaling_probe(self.load_models()[0], k=self.config.graph.n_groups)
        consistent = None
        if consistency:
            samples = load_dataset(self.data_path).samples[:cfg.consistency_samples]
            consistent = self_consistency_experiment(predictors["model"], samples, cfg)
        covered = None
        if coverage:
            multimodal = build_eval_set(EvalMode.MULTI_MODAL, cfg.coverage_samples, ledger, cfg.n_context, cfg.seed)
            rotation, translation = self.load_models()
            sampler = replace(self.config.sampler, n_restarts=cfg.coverage_restarts)
            predictor = ModelPredictor(self.load_encoder(), rotation, translation, sampler)
            covered = mode_coverage_experiment(predictor, multimodal.samples, cfg)
        return ReportWriter().write(by_predictor, self.eval_dir, diversity=cells, scaling=rows, scaling_fit=fit,
                                    consistency=consistent, coverage=covered)

    def plot(self) -> ReportFiles:
        """Regenerate ``summary.md`` and the SVGs from the record CSVs under ``eval/``."""
        by_predictor: Dict[str, Dict[str, List[EvalRecord]]] = {}
        modes = {m.value for m in EvalMode}
        for path in sorted(self._require(self.eval_dir, "eval").glob("*.csv")):
            name, _, mode = path.stem.partition("_")
            if mode in modes:
                by_predictor.setdefault(name, {})[mode] = read_records(path)
        diversity_csv = self.eval_dir / "diversity.csv"
        cells = read_diversity(diversity_csv) if diversity_csv.exists() else None
        scaling_csv = self.eval_dir / "scaling.csv"
        rows = read_scaling(scaling_csv) if scaling_csv.exists() else None
        consistent = covered = None
        if (self.eval_dir / "consistency.csv").exists():
            records = read_records(self.eval_dir / "consistency.csv")
            consistent = (records, consistency_stats(records, self.config.eval.consistency_tolerance))
        if (self.eval_dir / "coverage.csv").exists():
            coverage_rows = read_coverage(self.eval_dir / "coverage.csv")
            covered = (coverage_rows, coverage_stats(coverage_rows, self.config.eval.coverage_min_hits))
        return ReportWriter().write(by_predictor, self.eval_dir, diversity=cells, scaling=rows,
                                    consistency=consistent, coverage=covered)


def run_all(config: RunConfig, modes: Sequence[EvalMode] = tuple(EvalMode)) -> ReportFiles:
    """Convenience function running every stage in order."""
    pipeline = AlignmentPipeline(config)
    pipeline.record_config()
    pipeline.generate_data()
    pipeline.pretrain_encoder()
    pipeline.train_models()
    return pipeline.evaluate(modes)
