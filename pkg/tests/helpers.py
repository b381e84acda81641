"""
Shared builders for the test suite: miniature configs, random subgraphs and a
closed-form energy model.
"""

from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from src.graphalign.alignment_graph import GRASPED, PairSubgraph
from src.graphalign.encoder import EncoderConfig
from src.graphalign.energy_model import ROTATION_MODE, TRANSLATION_MODE, EnergyOutput, ModelConfig, perturb_candidates
from src.graphalign.shapes import ShapeConfig

TINY_ENCODER = EncoderConfig(
    n_groups=4, channels=4, hidden=8, n_layers=4, query_freqs=2, decoder_width=16, decoder_layers=2,
    queries_per_group=8, n_examples=12, steps=4, batch_size=4, eval_every=2, log_every=2, val_fraction=0.25,
)
TINY_MODEL = ModelConfig(n_layers=1, n_heads=2, head_dim=4, mlp_dims=(8,), l_edge=2, channels=4)
TINY_SHAPES = ShapeConfig(
    n_samples=3, n_pairs=3, n_views=3, points_per_view=60, magnitude_range=(0.0, 0.1), scale_jitter=0.05, max_retries=10,
)


def random_pair(k: int = 4, channels: int = 4, seed: int = 0, offset=(0.0, 0.0, 0.0)) -> PairSubgraph:
    """A (grasped, target) subgraph with random float64 features and positions."""
    gen = torch.Generator().manual_seed(seed)
    positions = 0.05 * torch.randn((2, k, 3), generator=gen, dtype=torch.float64)
    positions = positions + torch.as_tensor(offset, dtype=torch.float64)
    return PairSubgraph(
        features=torch.randn((2, k, channels, 3), generator=gen, dtype=torch.float64),
        positions=positions,
    )


class QuadraticEnergy(nn.Module):
    """Closed-form energy over candidate grasped nodes.

    Translation mode: ``weight * |c - goal_center|^2`` with c the grasped centroid.
    Rotation mode: ``weight * sum_k |(p_k - c) - goal_offsets_k|^2``.
    """

    def __init__(self, mode: str, goal_center=None, goal_offsets=None, weight: float = 1.0,
                 config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = (config or TINY_MODEL).with_mode(mode)
        self.encoder_digest = None
        self.weight = weight
        self.goal_center = None if goal_center is None else torch.as_tensor(goal_center, dtype=torch.float64)
        self.goal_offsets = None if goal_offsets is None else torch.as_tensor(goal_offsets, dtype=torch.float64)

    @property
    def mode(self) -> str:
        return self.config.mode

    def forward(self, graph, twists=None, track_cross_edges=False) -> EnergyOutput:
        positions, features = graph.cand_positions, graph.cand_features
        if twists is not None:
            positions, features = perturb_candidates(positions, features, twists)
        grasped = positions[:, GRASPED]
        center = grasped.mean(dim=1)
        if self.mode == TRANSLATION_MODE:
            energies = self.weight * ((center - self.goal_center) ** 2).sum(-1)
        else:
            offsets = grasped - center[:, None]
            energies = self.weight * ((offsets - self.goal_offsets) ** 2).sum((-1, -2))
        return EnergyOutput(energies)


class ZeroEnergy(QuadraticEnergy):
    """Constant zero energy with zero pose gradients."""

    def forward(self, graph, twists=None, track_cross_edges=False) -> EnergyOutput:
        positions = graph.cand_positions
        if twists is not None:
            positions, _ = perturb_candidates(positions, graph.cand_features, twists)
        return EnergyOutput(0.0 * positions.sum((1, 2, 3)))


class TwoBasinEnergy(QuadraticEnergy):
    """Translation energy with one basin per goal: ``weight * min_j |c - goal_j|^2``."""

    def __init__(self, goals, weight: float = 1.0):
        super().__init__(TRANSLATION_MODE, weight=weight)
        self.goals = torch.as_tensor(np.asarray(goals), dtype=torch.float64)

    def forward(self, graph, twists=None, track_cross_edges=False) -> EnergyOutput:
        positions, features = graph.cand_positions, graph.cand_features
        if twists is not None:
            positions, features = perturb_candidates(positions, features, twists)
        center = positions[:, GRASPED].mean(dim=1)
        distances = ((center[:, None] - self.goals[None]) ** 2).sum(-1)
        return EnergyOutput(self.weight * distances.min(dim=1).values)


def grasped_centroid(pair: PairSubgraph) -> np.ndarray:
    return pair.positions[GRASPED].mean(dim=0).numpy()


__all__ = [
    "TINY_ENCODER", "TINY_MODEL", "TINY_SHAPES", "random_pair", "QuadraticEnergy", "TwoBasinEnergy", "ZeroEnergy",
    "grasped_centroid", "ROTATION_MODE", "TRANSLATION_MODE",
]
