"""
Alignment Graph Module

Heterogeneous graph joining demonstration pairs and candidate test pairs.

Every object contributes K nodes. Nodes of one object are fully connected
(WithinObject); nodes of the two objects of a pair are fully connected
(CrossObject); every demo node sends a DemoToTest edge to each candidate node of
the same role; each candidate's 2K nodes feed one Energy node (ToEnergy).

The graph stores features and positions as dense blocks
``(N, 2, K, C, 3)`` for demos and ``(M, 2, K, C, 3)`` for candidates, role 0 being
the grasped object and role 1 the target. Edge lists are derived from that
layout on request; the energy model consumes the blocks directly.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .encoder import LocalFeatureSet, positional_encode
from .errors import GraphConstructionError
from .se3 import RigidTransform

logger = logging.getLogger(__name__)

GRASPED, TARGET = 0, 1


class NodeKind(Enum):
    GRASPED_DEMO = "GraspedDemo"
    TARGET_DEMO = "TargetDemo"
    GRASPED_TEST = "GraspedTest"
    TARGET_TEST = "TargetTest"
    ENERGY = "Energy"


class EdgeKind(Enum):
    WITHIN_OBJECT = "WithinObject"
    CROSS_OBJECT = "CrossObject"
    DEMO_TO_TEST = "DemoToTest"
    TO_ENERGY = "ToEnergy"


EDGE_KINDS: Tuple[EdgeKind, ...] = tuple(EdgeKind)


@dataclass(frozen=True)
class GraphConfig:
    """Graph settings (section ``[graph]``)."""
    n_groups: int = 8
    l_edge: int = 6


@dataclass(frozen=True)
class NodeRecord:
    id: int
    kind: NodeKind
    position: Optional[Tuple[float, float, float]]
    demo_index: int = -1
    candidate_index: int = -1
    slot: int = -1


@dataclass(eq=False)
class PairSubgraph:
    """Nodes of one (grasped, target) pair: features (2, K, C, 3) and positions (2, K, 3)."""
    features: torch.Tensor
    positions: torch.Tensor

    @property
    def k(self) -> int:
        return int(self.positions.shape[1])

    def within_edge_count(self) -> int:
        return 2 * self.k * (self.k - 1)

    def cross_edge_count(self) -> int:
        return 2 * self.k * self.k


def build_pair_graph(fa: LocalFeatureSet, fb: LocalFeatureSet, k: Optional[int] = None) -> PairSubgraph:
    """Stack the local features of the grasped (``fa``) and target (``fb``) objects.

    Raises:
        GraphConstructionError: If the two sets differ in size or disagree with ``k``.
    """
    if len(fa) != len(fb):
        raise GraphConstructionError(f"objects have {len(fa)} and {len(fb)} local features")
    if k is not None and len(fa) != k:
        raise GraphConstructionError(f"expected K={k} local features per object, got {len(fa)}")
    return PairSubgraph(
        features=torch.stack([fa.features, fb.features]),
        positions=torch.stack([fa.positions, fb.positions]),
    )


def encode_pair(encoder, cloud_a, cloud_b) -> PairSubgraph:
    """Encode a (grasped, target) pair of clouds with a frozen encoder."""
    fa, fb = encoder.encode_many([cloud_a, cloud_b])
    return build_pair_graph(fa, fb, encoder.config.n_groups)


def geometric_edge_features(dst: torch.Tensor, src: torch.Tensor, l_edge: int) -> torch.Tensor:
    """Edge features PE(p_dst - p_src) for all (dst, src) pairs: (..., K_dst, K_src, 6L)."""
    return positional_encode(dst[..., :, None, :] - src[..., None, :, :], l_edge)


class AlignmentGraph:
    """Demo subgraphs plus candidate test subgraphs with append-only node ids.

    Attributes:
        demo_features / demo_positions: (N, 2, K, C, 3) and (N, 2, K, 3).
        cand_features / cand_positions: (M, 2, K, C, 3) and (M, 2, K, 3).
        demo_ids / cand_ids: node ids laid out like the position blocks.
        energy_ids: (M,) node ids of the Energy nodes.
        encoder_digest: Digest of the encoder that produced the features, if known.
    """

    def __init__(self, test: PairSubgraph, l_edge: int = 6, encoder_digest: Optional[str] = None):
        self.l_edge = l_edge
        self.encoder_digest = encoder_digest
        self.k = test.k
        self.channels = int(test.features.shape[2])
        self.test = PairSubgraph(test.features.clone(), test.positions.clone())
        dtype = test.positions.dtype
        self.demo_features = torch.zeros((0, 2, self.k, self.channels, 3), dtype=dtype)
        self.demo_positions = torch.zeros((0, 2, self.k, 3), dtype=dtype)
        self.cand_features = torch.zeros((0, 2, self.k, self.channels, 3), dtype=dtype)
        self.cand_positions = torch.zeros((0, 2, self.k, 3), dtype=dtype)
        self.demo_ids = torch.zeros((0, 2, self.k), dtype=torch.long)
        self.cand_ids = torch.zeros((0, 2, self.k), dtype=torch.long)
        self.energy_ids = torch.zeros((0,), dtype=torch.long)
        self._next_id = 0

    # -- construction -------------------------------------------------------

    def _take_ids(self, count: int) -> torch.Tensor:
        ids = torch.arange(self._next_id, self._next_id + count, dtype=torch.long)
        self._next_id += count
        return ids

    def add_demo(self, demo: PairSubgraph) -> int:
        """Append one demonstration pair; existing node ids are unchanged."""
        if demo.k != self.k or demo.features.shape[2] != self.channels:
            raise GraphConstructionError(
                f"demo subgraph has K={demo.k}, C={demo.features.shape[2]}; graph uses K={self.k}, C={self.channels}"
            )
        self.demo_features = torch.cat([self.demo_features, demo.features[None].to(self.demo_features.dtype)])
        self.demo_positions = torch.cat([self.demo_positions, demo.positions[None].to(self.demo_positions.dtype)])
        self.demo_ids = torch.cat([self.demo_ids, self._take_ids(2 * self.k).reshape(1, 2, self.k)])
        return self.n_demos - 1

    def add_candidates(self, m: int) -> List[int]:
        """Append ``m`` copies of the test subgraph, each with its own Energy node."""
        if m < 1:
            raise GraphConstructionError("attach_candidates needs m >= 1")
        start = self.n_candidates
        self.cand_features = torch.cat([self.cand_features, self.test.features[None].expand(m, -1, -1, -1, -1)])
        self.cand_positions = torch.cat([self.cand_positions, self.test.positions[None].expand(m, -1, -1, -1)])
        node_ids, energy_ids = [], []
        for _ in range(m):
            node_ids.append(self._take_ids(2 * self.k).reshape(2, self.k))
            energy_ids.append(self._take_ids(1))
        self.cand_ids = torch.cat([self.cand_ids, torch.stack(node_ids)])
        self.energy_ids = torch.cat([self.energy_ids, torch.cat(energy_ids)])
        return list(range(start, start + m))

    def clone(self) -> "AlignmentGraph":
        other = AlignmentGraph.__new__(AlignmentGraph)
        other.__dict__.update(self.__dict__)
        for name in ("demo_features", "demo_positions", "cand_features", "cand_positions",
                     "demo_ids", "cand_ids", "energy_ids"):
            setattr(other, name, getattr(self, name).clone())
        other.test = PairSubgraph(self.test.features.clone(), self.test.positions.clone())
        return other

    def select_candidates(self, indices: Sequence[int]) -> "AlignmentGraph":
        """A new graph with the same demos and only the listed candidates (ids preserved)."""
        other = self.clone()
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        other.cand_features = self.cand_features[idx].clone()
        other.cand_positions = self.cand_positions[idx].clone()
        other.cand_ids = self.cand_ids[idx].clone()
        other.energy_ids = self.energy_ids[idx].clone()
        return other

    # -- counts ---------------------------------------------------------------

    @property
    def n_demos(self) -> int:
        return int(self.demo_positions.shape[0])

    @property
    def n_candidates(self) -> int:
        return int(self.cand_positions.shape[0])

    @property
    def num_nodes(self) -> int:
        return self.n_demos * 2 * self.k + self.n_candidates * (2 * self.k + 1)

    def edge_counts(self) -> Dict[EdgeKind, int]:
        n, m, k = self.n_demos, self.n_candidates, self.k
        return {
            EdgeKind.WITHIN_OBJECT: (n + m) * 2 * k * (k - 1),
            EdgeKind.CROSS_OBJECT: (n + m) * 2 * k * k,
            EdgeKind.DEMO_TO_TEST: m * n * 2 * k * k,
            EdgeKind.TO_ENERGY: m * 2 * k,
        }

    @property
    def num_edges(self) -> int:
        return sum(self.edge_counts().values())

    # -- geometry ---------------------------------------------------------------

    def grasped_centroid(self, candidate_index: int) -> torch.Tensor:
        """Mean position of the candidate's grasped-object nodes."""
        return self.cand_positions[candidate_index, GRASPED].mean(dim=0)

    def transform_candidate(self, candidate_index: int, t: RigidTransform) -> None:
        transform_candidate(self, candidate_index, t)

    # -- explicit structure -------------------------------------------------------

    def nodes(self) -> List[NodeRecord]:
        records: Dict[int, NodeRecord] = {}
        demo_kinds = (NodeKind.GRASPED_DEMO, NodeKind.TARGET_DEMO)
        test_kinds = (NodeKind.GRASPED_TEST, NodeKind.TARGET_TEST)
        for d in range(self.n_demos):
            for r in range(2):
                for s in range(self.k):
                    nid = int(self.demo_ids[d, r, s])
                    pos = tuple(float(v) for v in self.demo_positions[d, r, s])
                    records[nid] = NodeRecord(nid, demo_kinds[r], pos, demo_index=d, slot=s)
        for c in range(self.n_candidates):
            for r in range(2):
                for s in range(self.k):
                    nid = int(self.cand_ids[c, r, s])
                    pos = tuple(float(v) for v in self.cand_positions[c, r, s])
                    records[nid] = NodeRecord(nid, test_kinds[r], pos, candidate_index=c, slot=s)
            eid = int(self.energy_ids[c])
            records[eid] = NodeRecord(eid, NodeKind.ENERGY, None, candidate_index=c)
        return [records[i] for i in sorted(records)]

    def _object_edges(self, ids: torch.Tensor) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
        within, cross = [], []
        for block in ids:
            for r in range(2):
                for i in block[r].tolist():
                    for j in block[r].tolist():
                        if i != j:
                            within.append((j, i))
                    for j in block[1 - r].tolist():
                        cross.append((j, i))
        return within, cross

    def edges(self, kind: EdgeKind) -> List[Tuple[int, int]]:
        """Explicit (src, dst) node-id list of one edge kind."""
        if kind in (EdgeKind.WITHIN_OBJECT, EdgeKind.CROSS_OBJECT):
            dw, dc = self._object_edges(self.demo_ids)
            cw, cc = self._object_edges(self.cand_ids)
            return dw + cw if kind is EdgeKind.WITHIN_OBJECT else dc + cc
        if kind is EdgeKind.DEMO_TO_TEST:
            out = []
            for c in range(self.n_candidates):
                for r in range(2):
                    for dst in self.cand_ids[c, r].tolist():
                        for d in range(self.n_demos):
                            out.extend((src, dst) for src in self.demo_ids[d, r].tolist())
            return out
        out = []
        for c in range(self.n_candidates):
            eid = int(self.energy_ids[c])
            out.extend((src, eid) for src in self.cand_ids[c].reshape(-1).tolist())
        return out

    def adjacency(self) -> Dict[EdgeKind, List[Tuple[int, int]]]:
        return {kind: self.edges(kind) for kind in EDGE_KINDS}

    def dump(self) -> str:
        """Plain-text listing of nodes and edges, stable across runs."""
        lines = [f"graph demos={self.n_demos} candidates={self.n_candidates} k={self.k} l_edge={self.l_edge}"]
        for node in self.nodes():
            pos = "-" if node.position is None else "(" + ", ".join(f"{v:.6f}" for v in node.position) + ")"
            lines.append(
                f"node {node.id} {node.kind.value} demo={node.demo_index} cand={node.candidate_index} pos={pos}"
            )
        for kind in EDGE_KINDS:
            for src, dst in self.edges(kind):
                lines.append(f"edge {kind.value} {src} -> {dst}")
        return "\n".join(lines) + "\n"


def attach_context(
    demos: Sequence[PairSubgraph],
    test: PairSubgraph,
    l_edge: int = 6,
    encoder_digest: Optional[str] = None,
) -> AlignmentGraph:
    """Build a graph from demo subgraphs and one test subgraph (candidate 0).

    Raises:
        GraphConstructionError: If no demo is given or K disagrees.
    """
    if not demos:
        raise GraphConstructionError("attach_context needs at least one demonstration")
    graph = AlignmentGraph(test, l_edge=l_edge, encoder_digest=encoder_digest)
    for demo in demos:
        graph.add_demo(demo)
    graph.add_candidates(1)
    return graph


def attach_candidates(graph: AlignmentGraph, m: int) -> AlignmentGraph:
    """Append ``m`` further candidates sharing the same demos; returns ``graph``."""
    graph.add_candidates(m)
    return graph


def transform_candidate(graph: AlignmentGraph, candidate_index: int, t: RigidTransform) -> None:
    """Move the grasped-object nodes of one candidate by ``t`` (world frame).

    Positions map to R p + t and every feature 3-vector is rotated by R. Target
    nodes are untouched. Edge features follow automatically because they are
    derived from positions. An exact identity leaves the graph bitwise unchanged.
    """
    if not 0 <= candidate_index < graph.n_candidates:
        raise GraphConstructionError(f"candidate {candidate_index} does not exist")
    if t.is_identity():
        return
    dtype = graph.cand_positions.dtype
    rotation = torch.as_tensor(t.rotation, dtype=dtype)
    translation = torch.as_tensor(t.translation, dtype=dtype)
    pos = graph.cand_positions[candidate_index, GRASPED]
    feat = graph.cand_features[candidate_index, GRASPED]
    graph.cand_positions[candidate_index, GRASPED] = pos @ rotation.T + translation
    graph.cand_features[candidate_index, GRASPED] = feat @ rotation.T


def transform_candidates(graph: AlignmentGraph, transforms: Sequence[RigidTransform], start: int = 0) -> None:
    """Apply one transform per candidate, starting at ``start``, in a single batched update."""
    if not transforms:
        return
    stop = start + len(transforms)
    if stop > graph.n_candidates:
        raise GraphConstructionError(f"{len(transforms)} transforms from {start} exceed {graph.n_candidates} candidates")
    dtype = graph.cand_positions.dtype
    rotations = torch.as_tensor(np.stack([t.rotation for t in transforms]), dtype=dtype)
    translations = torch.as_tensor(np.stack([t.translation for t in transforms]), dtype=dtype)
    pos = graph.cand_positions[start:stop, GRASPED]
    feat = graph.cand_features[start:stop, GRASPED]
    graph.cand_positions[start:stop, GRASPED] = torch.einsum("mij,mkj->mki", rotations, pos) + translations[:, None]
    graph.cand_features[start:stop, GRASPED] = torch.einsum("mij,mkcj->mkci", rotations, feat)
