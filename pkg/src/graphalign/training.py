"""
Training Module

Contrastive training of the rotation-mode and translation-mode energy models.

Each step holds one pair of a sample out as the test, attaches the remaining pairs
as context, and scores the ground-truth candidate against ``n_neg`` perturbed
copies with an InfoNCE loss. Negatives come from uniform sampling first and, after
``phase1_steps``, from narrower uniform sampling mixed with Langevin samples drawn
against the current parameters.
"""

import copy
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from .alignment_graph import AlignmentGraph, PairSubgraph, attach_candidates, attach_context, encode_pair, transform_candidates
from .checkpoints import load_checkpoint, module_digest, save_checkpoint
from .dataset_io import config_from_dict
from .encoder import GeometryEncoder
from .energy_model import (
    ROTATION_MODE,
    TRANSLATION_MODE,
    EnergyModel,
    ModelConfig,
    build_model,
    spectral_normalize,
)
from .errors import DigestMismatchError, NonFiniteLossError, TrainingDivergenceError
from .evaluation import ModelPredictor, run_trials
from .langevin import LangevinState, SamplerConfig, run_pass
from .se3 import RigidTransform, about_point, random_rotation, rotation_angle
from .shapes import AlignmentSample

logger = logging.getLogger(__name__)

MODES = (ROTATION_MODE, TRANSLATION_MODE)
METRIC_FIELDS = ["step", "loss", "e_pos", "e_neg_mean", "e_max", "e_min", "phase"]


@dataclass(frozen=True)
class TrainConfig:
    """Energy-model training settings (section ``[train]``).

    ``lr``, ``weight_decay`` and ``batch_size`` are desk defaults rather than
    published values.
    """
    n_neg: int = 256
    steps: int = 30000
    phase1_steps: int = 10000
    langevin_every: int = 5
    langevin_share: float = 0.5
    langevin_negative_steps: int = 20
    phase1_ranges: Tuple[float, float] = (0.8, math.pi)
    phase2_ranges: Tuple[float, float] = (0.1, math.pi / 4)
    l2_logit_coeff: float = 1e-4
    grad_penalty_coeff: float = 1e-2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 1
    subset_pretrain_size: int = 1000
    subset_pretrain_steps: int = 5000
    checkpoint_every: int = 1000
    ring_size: int = 10
    smoke_samples: int = 10
    smoke_restarts: int = 4
    sigma_check_every: int = 500
    guard_translation: float = 1e-3
    guard_rotation_deg: float = 0.1
    spread_jump_factor: float = 10.0
    log_every: int = 100
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if self.l2_logit_coeff < 0 or self.grad_penalty_coeff < 0:
            raise ValueError("regulariser coefficients must be non-negative")
        if not 0.0 <= self.langevin_share <= 1.0:
            raise ValueError("langevin_share must lie in [0, 1]")
        if self.phase2_ranges[0] > self.phase1_ranges[0] or self.phase2_ranges[1] > self.phase1_ranges[1]:
            raise ValueError("phase2_ranges must not exceed phase1_ranges")
        return self

    def phase(self, step: int) -> int:
        return 1 if step < self.phase1_steps else 2


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def infonce_loss(e_pos: torch.Tensor, e_negs: torch.Tensor) -> torch.Tensor:
    """-log(exp(-e_pos) / (exp(-e_pos) + sum exp(-e_negs))), batched over leading dims.

    Args:
        e_pos: Positive energy, shape () or (B,).
        e_negs: Negative energies, shape (n,) or (B, n), n >= 1.

    Returns:
        Mean loss over the batch. ``logsumexp`` applies the max shift.
    """
    e_negs = torch.as_tensor(e_negs)
    e_pos = torch.as_tensor(e_pos, dtype=e_negs.dtype)
    if e_negs.shape[-1] == 0:
        raise ValueError("infonce_loss needs at least one negative")
    logits = -torch.cat([e_pos[..., None], e_negs], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - logits[..., 0]).mean()


def gradient_penalty(graph: AlignmentGraph, model: EnergyModel) -> torch.Tensor:
    """Mean squared norm of dE/d(CrossObject edge features) of the positive candidate (index 0)."""
    out = model(graph.select_candidates([0]), track_cross_edges=True)
    (grad,) = torch.autograd.grad(out.energies.sum(), out.cross_edges, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=out.energies.dtype)
    return (grad ** 2).sum(-1).mean()


# ---------------------------------------------------------------------------
# Negatives
# ---------------------------------------------------------------------------

def _mode_transform(mode: str, trans_range: float, rot_range: float, rng: np.random.Generator) -> RigidTransform:
    if mode == ROTATION_MODE:
        return RigidTransform(random_rotation(rot_range, rng), np.zeros(3))
    return RigidTransform(np.eye(3), rng.uniform(-trans_range, trans_range, size=3))


def collides_with_positive(t: RigidTransform, pivot: np.ndarray, translation_tol: float, rotation_tol_deg: float) -> bool:
    """True if ``t`` moves ``pivot`` less than ``translation_tol`` and rotates less than ``rotation_tol_deg``."""
    moved = t.apply(np.asarray(pivot, dtype=np.float64)[None])[0]
    return (
        np.linalg.norm(moved - pivot) < translation_tol
        and np.rad2deg(rotation_angle(t.rotation)) < rotation_tol_deg
    )


def uniform_negatives(
    n: int,
    mode: str,
    ranges: Tuple[float, float],
    pivot: np.ndarray,
    rng: np.random.Generator,
    config: TrainConfig,
) -> List[RigidTransform]:
    """``n`` mode-restricted perturbations about ``pivot``, resampling any that hit the positive."""
    out = []
    while len(out) < n:
        t = about_point(_mode_transform(mode, ranges[0], ranges[1], rng), pivot)
        if not collides_with_positive(t, pivot, config.guard_translation, config.guard_rotation_deg):
            out.append(t)
    return out


def langevin_negatives(
    graph: AlignmentGraph,
    model: EnergyModel,
    n: int,
    mode: str,
    pivot: np.ndarray,
    rng: np.random.Generator,
    config: TrainConfig,
    sampler: SamplerConfig,
) -> List[RigidTransform]:
    """Run the inference sampler from random starts and return where it ended.

    Results that land on the positive are replaced by uniform draws.
    """
    scratch = graph.select_candidates([0])
    if n > 1:
        attach_candidates(scratch, n - 1)
    starts = uniform_negatives(n, mode, config.phase1_ranges, pivot, rng, config)
    transform_candidates(scratch, starts)
    state = LangevinState(n, sampler.step_scale(mode))
    state.totals = list(starts)
    state = run_pass(scratch, model, mode, config.langevin_negative_steps, sampler, rng, state)
    out = []
    for total, flagged in zip(state.totals, state.flagged):
        if flagged or collides_with_positive(total, pivot, config.guard_translation, config.guard_rotation_deg):
            out.extend(uniform_negatives(1, mode, config.phase2_ranges, pivot, rng, config))
        else:
            out.append(total)
    return out


def sample_negatives(
    step: int,
    graph: AlignmentGraph,
    model: EnergyModel,
    config: TrainConfig,
    rng: np.random.Generator,
    sampler: Optional[SamplerConfig] = None,
) -> List[RigidTransform]:
    """World-frame perturbations of the ground-truth candidate (index 0 of ``graph``).

    Phase 1 draws uniformly in ``phase1_ranges``. Phase 2 draws uniformly in
    ``phase2_ranges`` and, every ``langevin_every`` steps, replaces
    ``langevin_share`` of them with Langevin samples. The model's mode decides
    whether negatives rotate (about the grasped centroid) or translate.
    """
    mode = model.mode
    pivot = graph.grasped_centroid(0).detach().cpu().numpy().astype(np.float64)
    if config.phase(step) == 1:
        return uniform_negatives(config.n_neg, mode, config.phase1_ranges, pivot, rng, config)
    n_langevin = 0
    if config.langevin_every > 0 and step % config.langevin_every == 0:
        n_langevin = int(round(config.n_neg * config.langevin_share))
    negatives = uniform_negatives(config.n_neg - n_langevin, mode, config.phase2_ranges, pivot, rng, config)
    if n_langevin:
        negatives += langevin_negatives(graph, model, n_langevin, mode, pivot, rng, config, sampler or SamplerConfig())
    return negatives


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RingEntry:
    step: int
    score: float
    states: Dict[str, Dict[str, torch.Tensor]]


@dataclass(eq=False)
class TrainState:
    """Everything a training run mutates."""
    models: Dict[str, EnergyModel]
    optimizers: Dict[str, torch.optim.Optimizer]
    schedulers: Dict[str, torch.optim.lr_scheduler.LRScheduler]
    step: int = 0
    phase: int = 1
    ring: Deque[RingEntry] = field(default_factory=deque)
    metrics: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)
    last_good: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)


def _snapshot(models: Dict[str, EnergyModel]) -> Dict[str, Dict[str, torch.Tensor]]:
    return {mode: copy.deepcopy(m.state_dict()) for mode, m in models.items()}


def init_train_state(model_config: ModelConfig, config: TrainConfig, encoder_digest: Optional[str] = None) -> TrainState:
    models, optimizers, schedulers = {}, {}, {}
    for i, mode in enumerate(MODES):
        models[mode] = build_model(replace(model_config.with_mode(mode), seed=model_config.seed + i), encoder_digest)
        optimizers[mode] = torch.optim.AdamW(models[mode].parameters(), lr=config.lr, weight_decay=config.weight_decay)
        schedulers[mode] = torch.optim.lr_scheduler.CosineAnnealingLR(optimizers[mode], T_max=max(config.steps, 1))
    state = TrainState(models, optimizers, schedulers, ring=deque(maxlen=config.ring_size),
                       metrics={mode: [] for mode in MODES})
    state.last_good = _snapshot(models)
    return state


def training_graph(demos: Sequence[PairSubgraph], test: PairSubgraph, n_neg: int, l_edge: int,
                   encoder_digest: Optional[str]) -> AlignmentGraph:
    """Context plus one positive (candidate 0) and ``n_neg`` copies of it."""
    graph = attach_context(demos, test, l_edge=l_edge, encoder_digest=encoder_digest)
    return attach_candidates(graph, n_neg)


def split_sample(subgraphs: Sequence[PairSubgraph], target: int) -> Tuple[List[PairSubgraph], PairSubgraph]:
    demos = [g for i, g in enumerate(subgraphs) if i != target]
    return demos, subgraphs[target]


def mode_loss(
    graph: AlignmentGraph,
    model: EnergyModel,
    config: TrainConfig,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Regularised InfoNCE loss of one graph whose candidate 0 is the positive.

    Returns:
        (loss, energies of all candidates).
    """
    energies = model(graph).energies
    e_pos, e_neg = energies[0], energies[1:]
    loss = infonce_loss(e_pos, e_neg)
    loss = loss + config.l2_logit_coeff * (e_pos ** 2 + (e_neg ** 2).mean())
    if config.grad_penalty_coeff > 0:
        loss = loss + config.grad_penalty_coeff * gradient_penalty(graph, model)
    return loss, energies


def train_step(
    state: TrainState,
    batch: Sequence[Sequence[PairSubgraph]],
    config: TrainConfig,
    rng: np.random.Generator,
    sampler: Optional[SamplerConfig] = None,
) -> Dict[str, Dict[str, float]]:
    """One optimiser update of each mode model on a batch of encoded samples.

    Every sample contributes one held-out pair (chosen by ``rng``) as the test and
    its other pairs as context. After the update each model gets one spectral
    normalisation pass.

    Returns:
        Per-mode metrics: step, loss, e_pos, e_neg_mean, e_max, e_min, phase.

    Raises:
        NonFiniteLossError: The loss was NaN or infinite; both models are restored
            to the last good snapshot first.
        TrainingDivergenceError: A spectral-norm estimate left its band at a
            ``sigma_check_every`` step; both models are restored first.
    """
    phase = state.phase = config.phase(state.step)
    results: Dict[str, Dict[str, float]] = {}
    for mode in MODES:
        model = state.models[mode]
        model.train()
        losses, e_pos, e_neg, e_max, e_min = [], [], [], [], []
        for subgraphs in batch:
            target = int(rng.integers(len(subgraphs)))
            demos, test = split_sample(subgraphs, target)
            graph = training_graph(demos, test, config.n_neg, model.config.l_edge, model.encoder_digest)
            negatives = sample_negatives(state.step, graph, model, config, rng, sampler)
            transform_candidates(graph, negatives, start=1)
            loss, energies = mode_loss(graph, model, config)
            losses.append(loss)
            detached = energies.detach()
            e_pos.append(float(detached[0]))
            e_neg.append(float(detached[1:].mean()))
            e_max.append(float(detached.max()))
            e_min.append(float(detached.min()))
        loss = torch.stack(losses).mean()
        if not torch.isfinite(loss):
            _restore(state)
            logger.error("non-finite %s loss at step %d; restored last checkpoint", mode, state.step)
            raise NonFiniteLossError(f"non-finite {mode} loss at step {state.step}")
        optimizer = state.optimizers[mode]
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.schedulers[mode].step()
        sigmas = spectral_normalize(model)
        if config.sigma_check_every > 0 and state.step > 0 and state.step % config.sigma_check_every == 0:
            out = check_sigmas(sigmas, mode, state.step)
            if out:
                _restore(state)
                raise TrainingDivergenceError(
                    f"{mode} model step {state.step}: spectral norm out of band for {', '.join(out)}")
        results[mode] = {
            "step": state.step,
            "loss": float(loss.detach()),
            "e_pos": float(np.mean(e_pos)),
            "e_neg_mean": float(np.mean(e_neg)),
            "e_max": float(np.max(e_max)),
            "e_min": float(np.min(e_min)),
            "phase": phase,
        }
    state.step += 1
    return results


def _restore(state: TrainState) -> None:
    for mode, snapshot in state.last_good.items():
        state.models[mode].load_state_dict(snapshot)


def check_sigmas(sigmas: Dict[str, float], mode: str, step: int, band: Tuple[float, float] = (0.9, 1.1)) -> List[str]:
    """Names of weights whose spectral-norm estimate left ``band``."""
    out = [name for name, s in sigmas.items() if s > 1e-12 and not band[0] <= s <= band[1]]
    if out:
        logger.error("%s model step %d: %d sigma estimates outside [%.1f, %.1f]: %s",
                     mode, step, len(out), band[0], band[1], ", ".join(out[:5]))
    return out


class MetricLog:
    """Append-only CSV of per-step metrics, one file per mode."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._new = not self.path.exists() or self.path.stat().st_size == 0

    def append(self, row: Dict[str, float]) -> None:
        frame = pd.DataFrame([row], columns=METRIC_FIELDS)
        frame.to_csv(self.path, mode="a", header=self._new, index=False, lineterminator="\n")
        self._new = False

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainResult:
    models: Dict[str, EnergyModel]
    selected_step: int
    selected_score: float
    initial_score: float
    checkpoints: Dict[str, Path] = field(default_factory=dict)
    metrics: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)


class Trainer:
    """Drives both mode models through subset pretraining, the full set and checkpoint selection.

    Args:
        encoder: Frozen geometry encoder.
        samples: Training samples.
        val_samples: Fixed samples for the checkpoint smoke test.
        model_config: Shared architecture (mode is set per model).
        config: Training settings.
        sampler: Langevin settings for phase-2 negatives and the smoke test.
        out_dir: Where metric CSVs and the two checkpoints go (``None`` keeps everything in memory).
    """

    def __init__(
        self,
        encoder: GeometryEncoder,
        samples: Sequence[AlignmentSample],
        val_samples: Sequence[AlignmentSample],
        model_config: ModelConfig,
        config: TrainConfig,
        sampler: Optional[SamplerConfig] = None,
        out_dir: Optional[Union[str, Path]] = None,
    ):
        self.encoder = encoder
        self.encoder_digest = module_digest(encoder)
        self.samples = list(samples)
        self.val_samples = list(val_samples)[: config.smoke_samples]
        self.model_config = replace(model_config, channels=encoder.config.channels)
        self.config = config.validate()
        self.sampler = sampler or SamplerConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._cache: Dict[int, List[PairSubgraph]] = {}
        self.rng = np.random.default_rng(config.seed)
        torch.manual_seed(config.seed)
        self.state = init_train_state(self.model_config, config, self.encoder_digest)
        self.logs = {}
        if self.out_dir is not None:
            self.logs = {mode: MetricLog(self.out_dir / f"metrics_{mode}.csv") for mode in MODES}

    def encoded(self, index: int) -> List[PairSubgraph]:
        """Encoded pairs of training sample ``index`` (computed once; the encoder is frozen)."""
        if index not in self._cache:
            sample = self.samples[index]
            self._cache[index] = [encode_pair(self.encoder, p.cloud_a, p.cloud_b) for p in sample.pairs]
        return self._cache[index]

    def _pool_size(self, step: int) -> int:
        if step < self.config.subset_pretrain_steps:
            return min(self.config.subset_pretrain_size, len(self.samples))
        return len(self.samples)

    def smoke_score(self) -> float:
        """Median translation error (cm) plus median rotation error (deg) / 5 on the val samples."""
        if not self.val_samples:
            return float("nan")
        predictor = ModelPredictor(
            self.encoder,
            self.state.models[ROTATION_MODE],
            self.state.models[TRANSLATION_MODE],
            replace(self.sampler, n_restarts=self.config.smoke_restarts),
        )
        records = run_trials(self.val_samples, predictor, seed=self.config.seed, mode="smoke")
        return float(np.median([r.translation_cm for r in records]) + np.median([r.rotation_deg for r in records]) / 5.0)

    def evaluate_checkpoint(self) -> RingEntry:
        for model in self.state.models.values():
            model.eval()
        score = self.smoke_score()
        entry = RingEntry(self.state.step, score, _snapshot(self.state.models))
        self.state.ring.append(entry)
        self.state.last_good = entry.states
        logger.info("checkpoint at step %d: smoke score %.3f", entry.step, score)
        return entry

    def run(self) -> TrainResult:
        """Train for ``config.steps`` steps and keep the best evaluated checkpoint."""
        config = self.config
        if not self.samples:
            raise ValueError("training needs at least one sample")
        initial = self.evaluate_checkpoint()
        self.state.ring.clear()
        spreads: List[float] = []
        logger.info("training %d steps on %d samples (subset of %d for the first %d steps)",
                    config.steps, len(self.samples), self._pool_size(0), config.subset_pretrain_steps)

        while self.state.step < config.steps:
            step = self.state.step
            if step == config.phase1_steps and step > 0:
                logger.info("step %d: switching to phase-2 negatives", step)
            if step == config.subset_pretrain_steps and step > 0:
                logger.info("step %d: subset pretraining done, using all %d samples", step, len(self.samples))
            pool = self._pool_size(step)
            picks = self.rng.integers(pool, size=config.batch_size)
            batch = [self.encoded(int(i)) for i in picks]
            metrics = train_step(self.state, batch, config, self.rng, self.sampler)
            for mode, row in metrics.items():
                self.state.metrics[mode].append(row)
                if mode in self.logs:
                    self.logs[mode].append(row)
            spread = metrics[ROTATION_MODE]["e_max"] - metrics[ROTATION_MODE]["e_min"]
            if len(spreads) >= 10 and spread > config.spread_jump_factor * max(np.mean(spreads[-100:]), 1e-6):
                logger.warning("step %d: energy spread jumped to %.3f (recent mean %.3f)", step, spread, np.mean(spreads[-100:]))
            spreads.append(spread)
            if step % config.log_every == 0:
                logger.info(
                    "step %d phase %d: loss rot %.4f trans %.4f",
                    step, metrics[ROTATION_MODE]["phase"], metrics[ROTATION_MODE]["loss"], metrics[TRANSLATION_MODE]["loss"],
                )
            if config.checkpoint_every > 0 and self.state.step % config.checkpoint_every == 0:
                self.evaluate_checkpoint()

        if not self.state.ring or self.state.ring[-1].step != self.state.step:
            self.evaluate_checkpoint()
        best = min(self.state.ring, key=lambda e: (math.inf if math.isnan(e.score) else e.score, -e.step))
        for mode, snapshot in best.states.items():
            self.state.models[mode].load_state_dict(snapshot)
            self.state.models[mode].eval()
        logger.info("selected checkpoint from step %d (smoke score %.3f, initial %.3f)", best.step, best.score, initial.score)

        result = TrainResult(dict(self.state.models), best.step, best.score, initial.score, metrics=self.state.metrics)
        if self.out_dir is not None:
            for mode, model in self.state.models.items():
                result.checkpoints[mode] = save_checkpoint(
                    self.out_dir / f"{mode}.ckpt",
                    f"energy-{mode}",
                    model.config,
                    {"model": model},
                    step=best.step,
                    extra={"encoder_digest": self.encoder_digest, "smoke_score": best.score},
                )
        return result


def train(
    encoder: GeometryEncoder,
    samples: Sequence[AlignmentSample],
    val_samples: Sequence[AlignmentSample],
    model_config: ModelConfig,
    config: TrainConfig,
    sampler: Optional[SamplerConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Train the rotation and translation models; see :class:`Trainer`."""
    return Trainer(encoder, samples, val_samples, model_config, config, sampler, out_dir).run()


def load_energy_model(path: Union[str, Path], mode: str, encoder_digest: Optional[str] = None) -> EnergyModel:
    """Rebuild an energy model from a checkpoint written by :func:`train`.

    Raises:
        DigestMismatchError: ``encoder_digest`` is given and differs from the stored one.
    """
    payload = load_checkpoint(path, f"energy-{mode}")
    config = config_from_dict(ModelConfig, payload["config"])
    stored = payload["extra"].get("encoder_digest")
    if encoder_digest is not None and stored is not None and stored != encoder_digest:
        raise DigestMismatchError(f"{path}: model was trained on a different encoder")
    model = EnergyModel(config, stored).to(config.torch_dtype)
    model.load_state_dict(payload["state"]["model"])
    model.eval()
    return model
