"""
Energy Model Module

Graph-transformer energy over an AlignmentGraph.

Each layer updates node i as

    F'_i = GELU(W1 F_i + Mix(sum_kind sum_j a_ij (W2 F_j + W6 e_ij)))
    a_ij = softmax_j((W3 F_i) . (W4 F_j + W6 e_ij) / sqrt(d))

with separate W2, W3, W4, W6 per edge kind and per head. Because every edge kind
connects complete blocks of nodes, attention is evaluated block-wise on dense
tensors. The edge term is projected lazily (q . W6 e = (W6^T q) . e) so that
per-edge tensors stay at the positional-encoding width.

Candidates may be perturbed by a twist (rotation about the centroid of their
grasped-object nodes, then translation). Gradients of the energies with respect
to those twists at zero give the pose gradients used by training and inference.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment_graph import GRASPED, AlignmentGraph, geometric_edge_features
from .errors import DigestMismatchError, GraphConstructionError

logger = logging.getLogger(__name__)

MASKED_LOGIT = -1e30
ROTATION_MODE = "rotation"
TRANSLATION_MODE = "translation"
KIND_NAMES = ("within", "cross", "demo_to_test", "to_energy")


@dataclass(frozen=True)
class ModelConfig:
    """Energy model settings (section ``[model]``)."""
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 64
    mlp_dims: Tuple[int, ...] = (256, 256)
    l_edge: int = 6
    channels: int = 32
    mode: str = ROTATION_MODE
    dtype: str = "float64"
    seed: int = 0

    @property
    def width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def edge_dim(self) -> int:
        return 6 * self.l_edge

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def with_mode(self, mode: str) -> "ModelConfig":
        if mode not in (ROTATION_MODE, TRANSLATION_MODE):
            raise ValueError(f"mode must be '{ROTATION_MODE}' or '{TRANSLATION_MODE}', got '{mode}'")
        return replace(self, mode=mode)


@dataclass(eq=False)
class EnergyOutput:
    """Energies (M,) and, when requested, the CrossObject edge features they depend on."""
    energies: torch.Tensor
    cross_edges: Optional[torch.Tensor] = None


# ---------------------------------------------------------------------------
# Attention primitive
# ---------------------------------------------------------------------------

def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    edge: Optional[torch.Tensor] = None,
    w_edge: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Multi-head attention of Nd destinations over Ns sources.

    Args:
        q: (..., Nd, H, d) destination queries (W3 F_i).
        k: (..., Ns, H, d) source keys (W4 F_j).
        v: (..., Ns, H, d) source values (W2 F_j).
        mask: Optional (Nd, Ns) bool, True where an edge exists.
        edge: Optional (..., Nd, Ns, E) per-edge features e_ij.
        w_edge: (H, d, E) edge projection W6, required with ``edge``.

    Returns:
        Aggregated messages (..., Nd, H, d) and weights (..., Nd, Ns, H). A
        destination with no incoming edge receives zeros.
    """
    logits = torch.einsum("...ihd,...jhd->...ijh", q, k)
    if edge is not None:
        q_edge = torch.einsum("...ihd,hde->...ihe", q, w_edge)
        logits = logits + torch.einsum("...ihe,...ije->...ijh", q_edge, edge)
    logits = logits / math.sqrt(q.shape[-1])
    if mask is not None:
        logits = logits.masked_fill(~mask[..., None], MASKED_LOGIT)
    alpha = torch.softmax(logits, dim=-2)
    if mask is not None:
        alpha = alpha * mask[..., None].to(alpha.dtype)
    out = torch.einsum("...ijh,...jhd->...ihd", alpha, v)
    if edge is not None:
        pooled = torch.einsum("...ijh,...ije->...ihe", alpha, edge)
        out = out + torch.einsum("...ihe,hde->...ihd", pooled, w_edge)
    return out, alpha


# ---------------------------------------------------------------------------
# Differentiable rotations
# ---------------------------------------------------------------------------

def rodrigues(omega: torch.Tensor) -> torch.Tensor:
    """Batched axis-angle to rotation matrix, (..., 3) -> (..., 3, 3), smooth at zero."""
    theta_sq = (omega * omega).sum(-1)
    small = theta_sq < 1e-8
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    x, y, z = omega.unbind(-1)
    zero = torch.zeros_like(x)
    w = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(*omega.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device).expand_as(w)
    return eye + a[..., None, None] * w + b[..., None, None] * (w @ w)


def perturb_candidates(
    positions: torch.Tensor,
    features: torch.Tensor,
    twists: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Apply per-candidate twists (M, 6) = (rot, trans) to the grasped-object nodes.

    The rotation acts about the centroid of each candidate's grasped nodes; the
    translation is added afterwards. Target nodes are left as they are.
    """
    rot = rodrigues(twists[:, :3])
    grasped = positions[:, GRASPED]
    center = grasped.mean(dim=1, keepdim=True)
    moved = torch.einsum("mij,mkj->mki", rot, grasped - center) + center + twists[:, None, 3:]
    turned = torch.einsum("mij,mkcj->mkci", rot, features[:, GRASPED])
    positions = torch.stack([moved, positions[:, 1]], dim=1)
    features = torch.stack([turned, features[:, 1]], dim=1)
    return positions, features


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class EdgeKindParams(nn.Module):
    """W2 (value), W3 (query), W4 (key) and W6 (edge) of one edge kind in one layer."""

    def __init__(self, width: int, edge_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.w2 = nn.Linear(width, width, bias=False)
        self.w3 = nn.Linear(width, width, bias=False)
        self.w4 = nn.Linear(width, width, bias=False)
        self.w6 = nn.Linear(edge_dim, width, bias=False)
        for lin in (self.w2, self.w3, self.w4, self.w6):
            nn.init.orthogonal_(lin.weight)

    def heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-1], self.n_heads, -1)

    def project(self, h_dst: torch.Tensor, h_src: torch.Tensor):
        return self.heads(self.w3(h_dst)), self.heads(self.w4(h_src)), self.heads(self.w2(h_src))

    def edge_weight(self) -> torch.Tensor:
        """W6 reshaped to (H, d, E)."""
        return self.w6.weight.reshape(self.n_heads, -1, self.w6.weight.shape[-1])

    def constant_edge(self, embedding: torch.Tensor) -> torch.Tensor:
        """W6 e for a learnable edge embedding, split into heads: (..., H, d)."""
        return self.heads(self.w6(embedding))


class HeteroAttentionLayer(nn.Module):
    """One heterogeneous graph-transformer convolution."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        width = config.width
        self.kinds = nn.ModuleDict({
            name: EdgeKindParams(width, config.edge_dim, config.n_heads) for name in KIND_NAMES
        })
        self.w1_object = nn.Linear(width, width, bias=False)
        self.w1_energy = nn.Linear(width, width, bias=False)
        self.mix = nn.Linear(width, width, bias=False)
        for lin in (self.w1_object, self.w1_energy, self.mix):
            nn.init.orthogonal_(lin.weight)

    @staticmethod
    def _flat(x: torch.Tensor) -> torch.Tensor:
        return x.reshape(*x.shape[:-2], -1)

    def _object_messages(self, h: torch.Tensor, within: torch.Tensor, cross: torch.Tensor,
                         within_mask: torch.Tensor) -> torch.Tensor:
        """WithinObject + CrossObject messages for (B, 2, K, D) blocks."""
        p = self.kinds["within"]
        q, k, v = p.project(h, h)
        msg_w, _ = attend(q, k, v, mask=within_mask, edge=within, w_edge=p.edge_weight())
        p = self.kinds["cross"]
        src = h.flip(1)
        q, k, v = p.project(h, src)
        msg_c, _ = attend(q, k, v, edge=cross, w_edge=p.edge_weight())
        return self._flat(msg_w) + self._flat(msg_c)

    def forward(self, state: Dict[str, torch.Tensor], edges: Dict[str, torch.Tensor],
                embeddings: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        h_demo, h_cand, h_energy = state["demo"], state["cand"], state["energy"]
        n, m, k = h_demo.shape[0], h_cand.shape[0], h_cand.shape[2]
        width = h_cand.shape[-1]

        agg_demo = self._object_messages(h_demo, edges["demo_within"], edges["demo_cross"], edges["within_mask"])
        agg_cand = self._object_messages(h_cand, edges["cand_within"], edges["cand_cross"], edges["within_mask"])

        # DemoToTest: role-matched, every demo node of role r to every candidate node of role r.
        p = self.kinds["demo_to_test"]
        const = p.constant_edge(embeddings["demo_to_test"])
        dst = h_cand.transpose(0, 1).reshape(2, m * k, width)
        src = h_demo.transpose(0, 1).reshape(2, n * k, width)
        q, kk, v = p.project(dst, src)
        msg, _ = attend(q, kk + const, v + const)
        agg_cand = agg_cand + self._flat(msg).reshape(2, m, k, width).transpose(0, 1)

        # ToEnergy: the 2K test nodes of a candidate to its Energy node, one embedding per role.
        p = self.kinds["to_energy"]
        const = p.constant_edge(embeddings["to_energy"])[None, :, None]
        q, kk, v = p.project(h_energy[:, None], h_cand)
        kk = (kk + const).reshape(m, 2 * k, *kk.shape[-2:])
        v = (v + const).reshape(m, 2 * k, *v.shape[-2:])
        msg, _ = attend(q, kk, v)
        agg_energy = self._flat(msg)[:, 0]

        return {
            "demo": F.gelu(self.w1_object(h_demo) + self.mix(agg_demo)),
            "cand": F.gelu(self.w1_object(h_cand) + self.mix(agg_cand)),
            "energy": F.gelu(self.w1_energy(h_energy) + self.mix(agg_energy)),
        }


class EnergyModel(nn.Module):
    """E_theta(test alignment | demonstrations), one scalar per candidate.

    Attributes:
        config: Architecture settings; ``config.mode`` selects rotation or translation.
        encoder_digest: Digest of the frozen encoder whose features this model reads.
    """

    def __init__(self, config: ModelConfig, encoder_digest: Optional[str] = None):
        super().__init__()
        self.config = config
        self.encoder_digest = encoder_digest
        width = config.width
        self.input_proj = nn.Linear(3 * config.channels, width)
        self.node_type = nn.Embedding(4, width)
        self.energy_token = nn.Parameter(torch.randn(width) * 0.02)
        self.demo_to_test_embedding = nn.Parameter(torch.randn(config.edge_dim) * 0.1)
        self.to_energy_embedding = nn.Parameter(torch.randn(2, config.edge_dim) * 0.1)
        self.layers = nn.ModuleList(HeteroAttentionLayer(config) for _ in range(config.n_layers))

        dims = [width] + list(config.mlp_dims)
        head: List[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            head += [nn.Linear(a, b), nn.GELU()]
        final = nn.Linear(dims[-1], 1)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        head.append(final)
        self.head = nn.Sequential(*head)
        init_spectral_state(self)

    @property
    def mode(self) -> str:
        return self.config.mode

    def check_graph(self, graph: AlignmentGraph) -> None:
        if graph.n_candidates < 1:
            raise GraphConstructionError("energy_forward needs at least one candidate")
        if graph.channels != self.config.channels:
            raise GraphConstructionError(f"graph has C={graph.channels}, model expects C={self.config.channels}")
        if graph.l_edge != self.config.l_edge:
            raise GraphConstructionError(f"graph uses L={graph.l_edge}, model expects L={self.config.l_edge}")
        if self.encoder_digest and graph.encoder_digest and graph.encoder_digest != self.encoder_digest:
            raise DigestMismatchError("graph features come from a different encoder than the model was trained on")

    def _embed(self, features: torch.Tensor, offset: int) -> torch.Tensor:
        flat = features.reshape(*features.shape[:3], -1).to(self.input_proj.weight.dtype)
        roles = torch.arange(2, device=flat.device) + offset
        return self.input_proj(flat) + self.node_type(roles)[None, :, None, :]

    def forward(
        self,
        graph: AlignmentGraph,
        twists: Optional[torch.Tensor] = None,
        track_cross_edges: bool = False,
    ) -> EnergyOutput:
        """Energies of all candidates.

        Args:
            graph: Alignment graph with at least one candidate.
            twists: Optional (M, 6) perturbation applied to each candidate.
            track_cross_edges: Make the candidates' CrossObject edge features a
                differentiable input and return them.

        Returns:
            EnergyOutput with energies of shape (M,).
        """
        self.check_graph(graph)
        dtype = self.input_proj.weight.dtype
        demo_pos = graph.demo_positions.to(dtype)
        cand_pos = graph.cand_positions.to(dtype)
        cand_feat = graph.cand_features.to(dtype)
        if twists is not None:
            cand_pos, cand_feat = perturb_candidates(cand_pos, cand_feat, twists.to(dtype))

        l_edge = self.config.l_edge
        cand_cross = geometric_edge_features(cand_pos, cand_pos.flip(1), l_edge)
        if track_cross_edges and not cand_cross.requires_grad:
            cand_cross = cand_cross.detach().requires_grad_(True)
        k = graph.k
        edges = {
            "demo_within": geometric_edge_features(demo_pos, demo_pos, l_edge),
            "demo_cross": geometric_edge_features(demo_pos, demo_pos.flip(1), l_edge),
            "cand_within": geometric_edge_features(cand_pos, cand_pos, l_edge),
            "cand_cross": cand_cross,
            "within_mask": ~torch.eye(k, dtype=torch.bool),
        }
        embeddings = {"demo_to_test": self.demo_to_test_embedding, "to_energy": self.to_energy_embedding}
        state = {
            "demo": self._embed(graph.demo_features, 0),
            "cand": self._embed(cand_feat, 2),
            "energy": self.energy_token.expand(graph.n_candidates, -1),
        }
        for layer in self.layers:
            state = layer(state, edges, embeddings)
        energies = self.head(state["energy"]).squeeze(-1)
        return EnergyOutput(energies, cand_cross if track_cross_edges else None)

    def energies(self, graph: AlignmentGraph) -> torch.Tensor:
        return self(graph).energies


def energy_forward(graph: AlignmentGraph, model: EnergyModel) -> torch.Tensor:
    """Energies (M,) of all candidates without autograd."""
    with torch.no_grad():
        return model(graph).energies


def pose_gradients(graph: AlignmentGraph, model: EnergyModel) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gradients of every candidate's energy w.r.t. its twist at zero.

    Returns:
        (energies (M,), gradients (M, 6)), gradient order (rot, trans). Each
        candidate's energy depends only on its own twist, so one backward pass of the
        summed energies yields all per-candidate gradients.
    """
    twists = torch.zeros((graph.n_candidates, 6), dtype=graph.cand_positions.dtype, requires_grad=True)
    energies = model(graph, twists=twists).energies
    (grad,) = torch.autograd.grad(energies.sum(), twists)
    return energies.detach(), grad.detach()


def pose_gradient(graph: AlignmentGraph, candidate_index: int, model: EnergyModel) -> torch.Tensor:
    """6-vector gradient of one candidate's energy (rotation components first).

    A translation-mode consumer ignores the rotation components and vice versa;
    both halves are always computed.
    """
    sub = graph.select_candidates([candidate_index])
    return pose_gradients(sub, model)[1][0]


def param_gradients(loss: torch.Tensor, model: nn.Module) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every trainable parameter (zeros when unused)."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


# ---------------------------------------------------------------------------
# Spectral normalisation
# ---------------------------------------------------------------------------

SPECTRAL_EPS = 1e-12


def _spectral_buffer_name(param_name: str) -> str:
    return "sn_u__" + param_name.replace(".", "__")


def normalized_weight_names(model: nn.Module) -> List[str]:
    """Names of the 2-D Linear weights subject to spectral normalisation."""
    return [f"{name}.weight" if name else "weight"
            for name, mod in model.named_modules() if isinstance(mod, nn.Linear)]


def init_spectral_state(model: nn.Module, seed: int = 0) -> None:
    """Register one left-singular-vector estimate buffer per normalised weight."""
    gen = torch.Generator().manual_seed(seed)
    params = dict(model.named_parameters())
    for name in normalized_weight_names(model):
        w = params[name]
        u = torch.randn(w.shape[0], generator=gen, dtype=torch.float64).to(w.dtype)
        model.register_buffer(_spectral_buffer_name(name), u / u.norm())


def power_iteration(w: torch.Tensor, u: torch.Tensor, n_iter: int = 1) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return (sigma, u, v) after ``n_iter`` power-iteration steps from ``u``."""
    v = torch.zeros(w.shape[1], dtype=w.dtype)
    for _ in range(n_iter):
        v = w.T @ u
        v = v / (v.norm() + SPECTRAL_EPS)
        u = w @ v
        u = u / (u.norm() + SPECTRAL_EPS)
    sigma = u @ w @ v
    return sigma, u, v


def spectral_normalize(model: nn.Module, n_iter: int = 1) -> Dict[str, float]:
    """One power-iteration step per weight, then divide the weight by its sigma estimate.

    Weights whose estimate is below ``SPECTRAL_EPS`` (e.g. a zero-initialised layer)
    are left alone.

    Returns:
        The sigma estimate of every normalised weight, before division.
    """
    params = dict(model.named_parameters())
    sigmas = {}
    with torch.no_grad():
        for name in normalized_weight_names(model):
            w = params[name]
            buffer = _spectral_buffer_name(name)
            u = getattr(model, buffer)
            sigma, u, _ = power_iteration(w, u, n_iter)
            sigmas[name] = float(sigma)
            if float(sigma) > SPECTRAL_EPS:
                getattr(model, buffer).copy_(u)
                w.div_(sigma)
    return sigmas


def build_model(config: ModelConfig, encoder_digest: Optional[str] = None) -> EnergyModel:
    torch.manual_seed(config.seed)
    return EnergyModel(config, encoder_digest).to(config.torch_dtype)
