"""
Encoder Module

Turns an object point cloud into K rotation-equivariant local (feature, position)
pairs and pretrains the encoder as a local implicit occupancy network.

Pipeline: farthest point sampling picks K centroids, every point joins its
nearest centroid, each group is re-centred on its centroid and encoded by a
Vector-Neuron network whose features are 3-vector channels. Rotating the cloud
rotates every feature vector; translating it leaves features untouched.
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial import cKDTree

from .errors import TrainingDivergenceError
from .se3 import RigidTransform, random_rotation
from .shapes import (
    DeformationParams,
    ShapeConfig,
    deform_shape,
    generate_shape,
    render_partial_cloud,
)

logger = logging.getLogger(__name__)

VN_EPS = 1e-9

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder architecture and pretraining settings (section ``[encoder]``)."""
    n_groups: int = 8
    channels: int = 32
    hidden: int = 64
    n_layers: int = 8
    negative_slope: float = 0.2
    query_freqs: int = 10
    decoder_width: int = 128
    decoder_layers: int = 4
    surface_band: float = 0.005
    queries_per_group: int = 32
    fps_seed: int = 0
    dtype: str = "float64"
    n_examples: int = 20000
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    val_fraction: float = 0.1
    eval_every: int = 100
    divergence_patience: int = 5
    log_every: int = 100
    seed: int = 0

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


@dataclass(eq=False)
class LocalFeatureSet:
    """K (feature, position) pairs describing one object.

    Attributes:
        features: (K, C, 3) tensor of 3-vector channels.
        positions: (K, 3) tensor of group centroids in meters.
    """
    features: torch.Tensor
    positions: torch.Tensor

    def __len__(self) -> int:
        return int(self.positions.shape[0])


# ---------------------------------------------------------------------------
# Sampling and grouping
# ---------------------------------------------------------------------------

def _as_points(cloud) -> np.ndarray:
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def farthest_point_sample(cloud, k: int, start_seed=0, start_index: Optional[int] = None) -> np.ndarray:
    """Greedy max-min selection of ``k`` point indices.

    Args:
        cloud: (N, 3) points or a PointCloud.
        k: Number of indices to select.
        start_seed: Seed that fixes the first index when ``start_index`` is not given.
        start_index: Explicit first index.

    Returns:
        int64 array of ``k`` distinct indices, the first one being the start index.

    Raises:
        ValueError: If ``k`` exceeds the number of points.
    """
    points = _as_points(cloud)
    n = points.shape[0]
    if k > n:
        raise ValueError(f"cannot sample {k} points from a cloud of {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    first = start_index if start_index is not None else int(np.random.default_rng(start_seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    dists = np.linalg.norm(points - points[first], axis=1)
    for i in range(1, k):
        chosen[i] = int(np.argmax(dists))
        dists = np.minimum(dists, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


def assign_groups(cloud, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for every point (ties go to the lower index)."""
    points = _as_points(cloud)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if centroids.shape[0] == 0:
        raise ValueError("group_and_center needs at least one centroid")
    d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=-1)
    return np.argmin(d, axis=1)


def group_and_center(cloud, centroids: np.ndarray) -> List[np.ndarray]:
    """Partition points by nearest centroid and express each group relative to its centroid."""
    points = _as_points(cloud)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    labels = assign_groups(points, centroids)
    return [points[labels == g] - centroids[g] for g in range(centroids.shape[0])]


def pad_groups(groups: Sequence[np.ndarray], width: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Stack variable-size groups into (K, P, 3) with a (K, P) validity mask."""
    width = width or max(1, max((g.shape[0] for g in groups), default=1))
    local = np.zeros((len(groups), width, 3))
    mask = np.zeros((len(groups), width))
    for i, g in enumerate(groups):
        n = min(g.shape[0], width)
        local[i, :n] = g[:n]
        mask[i, :n] = 1.0
    return local, mask


def prepare_groups(cloud, k: int, start_seed=0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FPS, grouping and padding for one cloud; returns (local, mask, centroids)."""
    points = _as_points(cloud)
    centroids = points[farthest_point_sample(points, k, start_seed)]
    groups = group_and_center(points, centroids)
    empty = [i for i, g in enumerate(groups) if g.shape[0] == 0]
    if empty:
        logger.warning("encoder groups %s are empty; their features are zero", empty)
    local, mask = pad_groups(groups)
    return local, mask, centroids


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def positional_encode(v: ArrayLike, l_freq: int) -> ArrayLike:
    """Sin/cos features of a (..., 3) vector at frequencies 2^0 pi .. 2^(l_freq-1) pi.

    The output has 6 * l_freq entries ordered (frequency, coordinate, sin|cos), so a
    zero vector encodes to 0, 1, 0, 1, ...
    """
    if l_freq < 1:
        raise ValueError("positional_encode needs l_freq >= 1")
    as_numpy = not isinstance(v, torch.Tensor)
    t = torch.as_tensor(np.asarray(v, dtype=np.float64)) if as_numpy else v
    freqs = (2.0 ** torch.arange(l_freq, dtype=t.dtype, device=t.device)) * np.pi
    angles = t[..., None, :] * freqs[:, None]
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    out = out.reshape(*t.shape[:-1], 6 * l_freq)
    return out.numpy() if as_numpy else out


# ---------------------------------------------------------------------------
# Vector-Neuron network
# ---------------------------------------------------------------------------

class VNLinear(nn.Module):
    """Linear map over 3-vector channels: (..., C_in, 3) -> (..., C_out, 3)."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.map = nn.Linear(dim_in, dim_out, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.einsum("oi,...id->...od", self.map.weight, x)


class VNLeakyReLU(nn.Module):
    """Equivariant leaky ReLU: clips each channel against a learned direction."""

    def __init__(self, channels: int, negative_slope: float = 0.2):
        super().__init__()
        self.direction = VNLinear(channels, channels)
        self.negative_slope = negative_slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.direction(x)
        dot = (x * d).sum(-1, keepdim=True)
        d_sq = (d * d).sum(-1, keepdim=True)
        clipped = torch.where(dot >= 0, x, x - dot / (d_sq + VN_EPS) * d)
        return self.negative_slope * x + (1.0 - self.negative_slope) * clipped


def _masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over the point axis of (B, K, P, C, 3) restricted to valid points."""
    weights = mask[..., None, None]
    count = mask.sum(dim=2).clamp(min=1.0)[..., None, None]
    return (x * weights).sum(dim=2) / count


class GeometryEncoder(nn.Module):
    """Eight-layer Vector-Neuron point network with residual and local-global skips.

    Per-point input channels are the re-centred point, the group mean and their
    cross product. The middle layer sees each point's features concatenated with
    the group-pooled features.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        h = config.hidden
        self.fuse_at = config.n_layers // 2 - 1
        self.inp = VNLinear(3, h)
        self.inp_act = VNLeakyReLU(h, config.negative_slope)
        self.layers = nn.ModuleList()
        self.acts = nn.ModuleList()
        for i in range(config.n_layers - 2):
            self.layers.append(VNLinear(2 * h if i == self.fuse_at else h, h))
            self.acts.append(VNLeakyReLU(h, config.negative_slope))
        self.out = VNLinear(h, config.channels)

    def forward(self, local: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Encode padded groups.

        Args:
            local: (B, K, P, 3) re-centred points.
            mask: (B, K, P) validity mask.

        Returns:
            (B, K, C, 3) features; empty groups give zeros.
        """
        count = mask.sum(dim=2).clamp(min=1.0)[..., None]
        mean = (local * mask[..., None]).sum(dim=2) / count
        mean = mean[:, :, None, :].expand_as(local)
        x = torch.stack([local, mean, torch.cross(local, mean, dim=-1)], dim=-2)
        x = self.inp_act(self.inp(x))
        for i, (layer, act) in enumerate(zip(self.layers, self.acts)):
            if i == self.fuse_at:
                pooled = _masked_mean(x, mask)[:, :, None].expand_as(x)
                x = act(layer(torch.cat([x, pooled], dim=-2)))
            else:
                x = x + act(layer(x))
        return _masked_mean(self.out(x), mask)

    def encode(self, cloud) -> LocalFeatureSet:
        """Encode a single cloud into a LocalFeatureSet (no autograd)."""
        return self.encode_many([cloud])[0]

    def encode_many(self, clouds: Sequence) -> List[LocalFeatureSet]:
        prepared = [prepare_groups(c, self.config.n_groups, self.config.fps_seed) for c in clouds]
        width = max(p[0].shape[1] for p in prepared)
        dtype = self.config.torch_dtype
        local = np.zeros((len(prepared), self.config.n_groups, width, 3))
        mask = np.zeros((len(prepared), self.config.n_groups, width))
        for i, (loc, msk, _) in enumerate(prepared):
            local[i, :, :loc.shape[1]] = loc
            mask[i, :, :msk.shape[1]] = msk
        with torch.no_grad():
            feats = self(torch.as_tensor(local, dtype=dtype), torch.as_tensor(mask, dtype=dtype))
        return [
            LocalFeatureSet(feats[i], torch.as_tensor(p[2], dtype=dtype))
            for i, p in enumerate(prepared)
        ]


def encode_local(local_clouds: Sequence[np.ndarray], encoder: GeometryEncoder) -> torch.Tensor:
    """Encode K already re-centred local clouds into a (K, C, 3) feature tensor."""
    local, mask = pad_groups(local_clouds)
    empty = [i for i, g in enumerate(local_clouds) if len(g) == 0]
    if empty:
        logger.warning("encoder groups %s are empty; their features are zero", empty)
    dtype = encoder.config.torch_dtype
    with torch.no_grad():
        return encoder(torch.as_tensor(local[None], dtype=dtype), torch.as_tensor(mask[None], dtype=dtype))[0]


# ---------------------------------------------------------------------------
# Occupancy decoder
# ---------------------------------------------------------------------------

def invariant_readout(features: torch.Tensor) -> torch.Tensor:
    """Rotation-invariant scalars of (..., C, 3): channel norms and off-diagonal Gram entries."""
    gram = features @ features.transpose(-1, -2)
    c = features.shape[-2]
    rows, cols = torch.triu_indices(c, c, offset=1)
    norms = torch.sqrt(torch.diagonal(gram, dim1=-2, dim2=-1) + 1e-12)
    return torch.cat([norms, gram[..., rows, cols]], dim=-1)


class OccupancyDecoder(nn.Module):
    """Maps (local feature, query relative to its centroid) to an occupancy logit."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.channels
        in_dim = c + c * (c - 1) // 2 + c + 6 * config.query_freqs
        dims = [in_dim] + [config.decoder_width] * config.decoder_layers
        layers: List[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        layers.append(nn.Linear(dims[-1], 1))
        self.mlp = nn.Sequential(*layers)

    def forward(self, features: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Logits for (..., Q, 3) queries against (..., C, 3) features."""
        readout = invariant_readout(features)[..., None, :].expand(*queries.shape[:-1], -1)
        projections = torch.einsum("...cd,...qd->...qc", features, queries)
        pe = positional_encode(queries, self.config.query_freqs)
        x = torch.cat([readout, projections, pe], dim=-1)
        return self.mlp(x).squeeze(-1)


def occupancy_decode(feature: torch.Tensor, query, decoder: OccupancyDecoder) -> float:
    """Probability that ``query`` (relative to the feature's centroid) lies on the surface."""
    q = torch.as_tensor(np.asarray(query, dtype=np.float64), dtype=feature.dtype).reshape(1, 3)
    with torch.no_grad():
        return float(torch.sigmoid(decoder(feature, q))[0])


# ---------------------------------------------------------------------------
# Pretraining data
# ---------------------------------------------------------------------------

QUERY_NEAR, QUERY_BALL, QUERY_FAR = 0, 1, 2


@dataclass(eq=False)
class OccupancyExample:
    """One partial cloud with labelled queries around each of its K groups."""
    local: np.ndarray
    mask: np.ndarray
    queries: np.ndarray
    labels: np.ndarray
    kinds: np.ndarray


def _group_queries(
    group: np.ndarray,
    centroid: np.ndarray,
    tree: cKDTree,
    n_queries: int,
    band: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    radius = max(float(np.linalg.norm(group, axis=1).max()) if len(group) else 0.0, 0.01)
    n_near = n_queries // 2 if len(group) else 0
    n_ball = n_queries // 4
    n_far = n_queries - n_near - n_ball

    near = np.zeros((0, 3))
    if n_near:
        near = group[rng.integers(len(group), size=n_near)] + rng.normal(0.0, band / 2, (n_near, 3))
    dirs = rng.normal(size=(n_ball + n_far, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ball = dirs[:n_ball] * (radius * rng.uniform(size=(n_ball, 1)) ** (1 / 3))
    far = dirs[n_ball:] * rng.uniform(2 * radius, 3 * radius, size=(n_far, 1))

    queries = np.concatenate([near, ball, far])
    distance, _ = tree.query(queries + centroid)
    labels = (distance <= band).astype(np.float64)
    kinds = np.concatenate([np.full(n_near, QUERY_NEAR), np.full(n_ball, QUERY_BALL), np.full(n_far, QUERY_FAR)])
    return queries, labels, kinds


def build_occupancy_dataset(
    n_examples: int,
    config: EncoderConfig,
    shape_config: ShapeConfig,
    seed: int,
) -> List[OccupancyExample]:
    """Generate labelled occupancy examples from randomly deformed, rotated shapes.

    A query is labelled as surface when it lies within ``config.surface_band`` of the
    dense (unoccluded) deformed surface.
    """
    rng = np.random.default_rng(seed)
    categories = shape_config.training_categories()
    lo, hi = shape_config.magnitude_range
    examples = []
    for i in range(n_examples):
        shape = generate_shape(int(rng.choice(categories)), int(rng.integers(2 ** 31)))
        jitter = shape_config.scale_jitter
        shape = deform_shape(shape, DeformationParams(
            magnitude=float(rng.uniform(lo, hi)),
            anisotropic_scale=tuple(rng.uniform(1 - jitter, 1 + jitter, size=3)),
            warp_seed=int(rng.integers(2 ** 31)),
            n_warp_kernels=shape_config.n_warp_kernels,
            kernel_width=shape_config.kernel_width,
        ))
        pose = RigidTransform(random_rotation(np.pi, rng), np.zeros(3))
        cloud = render_partial_cloud(shape, pose, shape_config.n_views, shape_config.points_per_view, rng)
        points = cloud.points.astype(np.float64)
        tree = cKDTree(pose.apply(shape.surface_points))

        centroids = points[farthest_point_sample(points, config.n_groups, config.fps_seed)]
        groups = group_and_center(points, centroids)
        local, mask = pad_groups(groups)
        per_group = [
            _group_queries(g, centroids[k], tree, config.queries_per_group, config.surface_band, rng)
            for k, g in enumerate(groups)
        ]
        examples.append(OccupancyExample(
            local=local,
            mask=mask,
            queries=np.stack([q for q, _, _ in per_group]),
            labels=np.stack([lab for _, lab, _ in per_group]),
            kinds=np.stack([kd for _, _, kd in per_group]),
        ))
        if (i + 1) % 1000 == 0:
            logger.info("built %d/%d occupancy examples", i + 1, n_examples)
    return examples


def collate_examples(examples: Sequence[OccupancyExample], dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    width = max(e.local.shape[1] for e in examples)
    k = examples[0].local.shape[0]
    local = np.zeros((len(examples), k, width, 3))
    mask = np.zeros((len(examples), k, width))
    for i, e in enumerate(examples):
        local[i, :, :e.local.shape[1]] = e.local
        mask[i, :, :e.mask.shape[1]] = e.mask
    return {
        "local": torch.as_tensor(local, dtype=dtype),
        "mask": torch.as_tensor(mask, dtype=dtype),
        "queries": torch.as_tensor(np.stack([e.queries for e in examples]), dtype=dtype),
        "labels": torch.as_tensor(np.stack([e.labels for e in examples]), dtype=dtype),
        "kinds": torch.as_tensor(np.stack([e.kinds for e in examples])),
    }


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PretrainResult:
    """Outcome of occupancy pretraining."""
    encoder: GeometryEncoder
    decoder: OccupancyDecoder
    history: List[Dict[str, float]] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_val_loss: float = float("nan")
    diverged: bool = False

    def loss_reduction(self) -> float:
        """Fractional decrease of the validation loss from initialisation."""
        return 1.0 - self.best_val_loss / self.initial_val_loss


def build_encoder(config: EncoderConfig) -> Tuple[GeometryEncoder, OccupancyDecoder]:
    torch.manual_seed(config.seed)
    encoder = GeometryEncoder(config).to(config.torch_dtype)
    decoder = OccupancyDecoder(config).to(config.torch_dtype)
    return encoder, decoder


def occupancy_logits(encoder: GeometryEncoder, decoder: OccupancyDecoder, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
    features = encoder(batch["local"], batch["mask"])
    return decoder(features, batch["queries"])


def _evaluate(encoder, decoder, val: Sequence[OccupancyExample], dtype, batch_size: int) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(val), batch_size):
            batch = collate_examples(val[start:start + batch_size], dtype)
            logits = occupancy_logits(encoder, decoder, batch)
            total += float(F.binary_cross_entropy_with_logits(logits, batch["labels"], reduction="sum"))
            count += batch["labels"].numel()
    return total / max(count, 1)


def occupancy_accuracy(
    encoder: GeometryEncoder,
    decoder: OccupancyDecoder,
    examples: Sequence[OccupancyExample],
) -> Tuple[float, float]:
    """Return (share of surface queries scored > 0.5, share of far queries scored < 0.5)."""
    dtype = encoder.config.torch_dtype
    surface_hits = surface_total = far_hits = far_total = 0
    with torch.no_grad():
        for start in range(0, len(examples), 32):
            batch = collate_examples(examples[start:start + 32], dtype)
            prob = torch.sigmoid(occupancy_logits(encoder, decoder, batch))
            surface = batch["labels"] > 0.5
            far = (batch["kinds"] == QUERY_FAR) & ~surface
            surface_hits += int((prob[surface] > 0.5).sum())
            surface_total += int(surface.sum())
            far_hits += int((prob[far] < 0.5).sum())
            far_total += int(far.sum())
    return surface_hits / max(surface_total, 1), far_hits / max(far_total, 1)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def pretrain_encoder(
    examples: Sequence[OccupancyExample],
    config: EncoderConfig,
    encoder: Optional[GeometryEncoder] = None,
    decoder: Optional[OccupancyDecoder] = None,
) -> PretrainResult:
    """Train encoder and decoder with binary cross-entropy on labelled queries.

    The last ``val_fraction`` of ``examples`` is held out. Validation runs every
    ``eval_every`` steps; the best parameters are kept and restored at the end. Both
    modules come back frozen.

    Raises:
        TrainingDivergenceError: When the validation loss rises on
            ``divergence_patience`` consecutive evaluations. The error's ``result``
            holds the restored last-good modules.
    """
    if encoder is None or decoder is None:
        encoder, decoder = build_encoder(config)
    dtype = config.torch_dtype
    n_val = max(1, int(round(len(examples) * config.val_fraction)))
    train, val = list(examples[:-n_val]), list(examples[-n_val:])
    if not train:
        raise ValueError("pretraining needs more examples than the validation split")

    params = list(encoder.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(config.steps, 1))
    rng = np.random.default_rng(config.seed)

    initial = _evaluate(encoder, decoder, val, dtype, config.batch_size)
    result = PretrainResult(encoder, decoder, initial_val_loss=initial, best_val_loss=initial)
    best_state = (copy.deepcopy(encoder.state_dict()), copy.deepcopy(decoder.state_dict()))
    previous, rising = initial, 0
    logger.info("occupancy pretraining: %d train / %d val examples, initial val loss %.4f", len(train), len(val), initial)

    for step in range(1, config.steps + 1):
        encoder.train()
        decoder.train()
        picks = rng.integers(len(train), size=min(config.batch_size, len(train)))
        batch = collate_examples([train[i] for i in picks], dtype)
        loss = F.binary_cross_entropy_with_logits(occupancy_logits(encoder, decoder, batch), batch["labels"])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        scheduler.step()

        if step % config.log_every == 0:
            logger.info("pretrain step %d loss %.4f", step, loss.item())
        if step % config.eval_every == 0 or step == config.steps:
            encoder.eval()
            decoder.eval()
            val_loss = _evaluate(encoder, decoder, val, dtype, config.batch_size)
            result.history.append({"step": step, "train_loss": loss.item(), "val_loss": val_loss})
            if val_loss < result.best_val_loss:
                result.best_val_loss = val_loss
                best_state = (copy.deepcopy(encoder.state_dict()), copy.deepcopy(decoder.state_dict()))
            rising = rising + 1 if val_loss > previous else 0
            previous = val_loss
            if rising >= config.divergence_patience:
                encoder.load_state_dict(best_state[0])
                decoder.load_state_dict(best_state[1])
                freeze(encoder)
                freeze(decoder)
                result.diverged = True
                logger.error("validation loss rose %d evaluations in a row at step %d; restored best", rising, step)
                raise TrainingDivergenceError(
                    f"occupancy pretraining diverged at step {step} (best val loss {result.best_val_loss:.4f})",
                    result,
                )

    encoder.load_state_dict(best_state[0])
    decoder.load_state_dict(best_state[1])
    freeze(encoder)
    freeze(decoder)
    logger.info("pretraining done: val loss %.4f -> %.4f", initial, result.best_val_loss)
    return result
