"""Fixed-shape k-hop ego-graphs, alignment permutations and Mixup mashing.

Positions are numbered breadth-first: the center is 0, its ``n`` children are
``1..n``, and the children of position ``p`` always occupy the contiguous block
starting at ``1 + p * n``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .graph import Graph, one_hot

MEGO_MAGIC = b"MEGO"
_MEGO_HEADER = struct.Struct("<4s4i")


def shape_positions(k: int, n: int) -> int:
    """Number of positions in a k-hop ego-graph with fanout n."""
    if k < 0 or n < 1:
        raise ValueError(f"need k >= 0 and n >= 1, got k={k}, n={n}")
    total = sum(n**j for j in range(k + 1))
    if total > np.iinfo(np.int64).max:
        raise OverflowError(f"shape (k={k}, n={n}) has too many positions")
    return total


@dataclass(frozen=True)
class EgoShape:
    k: int
    n: int

    def __post_init__(self):
        shape_positions(self.k, self.n)

    @cached_property
    def size(self) -> int:
        return shape_positions(self.k, self.n)

    def layer_size(self, j: int) -> int:
        return self.n**j

    def layer_start(self, j: int) -> int:
        return sum(self.n**i for i in range(j))

    def layer(self, j: int) -> range:
        """Positions of layer ``j`` (``Q_j``)."""
        if not 0 <= j <= self.k:
            raise ValueError(f"layer {j} outside [0, {self.k}]")
        start = self.layer_start(j)
        return range(start, start + self.n**j)

    def layer_of(self, position: int) -> int:
        for j in range(self.k + 1):
            if position < self.layer_start(j) + self.n**j:
                return j
        raise ValueError(f"position {position} outside [0, {self.size})")

    def prefix_size(self, depth: int) -> int:
        """Positions in layers ``0..depth``."""
        return self.layer_start(depth + 1)

    def children_of(self, position: int) -> range:
        if not 0 <= position < self.size:
            raise ValueError(f"position {position} outside [0, {self.size})")
        if self.layer_of(position) == self.k:
            raise ValueError(f"position {position} is in the deepest layer")
        start = 1 + position * self.n
        return range(start, start + self.n)

    @cached_property
    def parents(self) -> np.ndarray:
        """Parent position of every non-center position (-1 for the center)."""
        out = np.full(self.size, -1, dtype=np.int64)
        out[1:] = (np.arange(1, self.size) - 1) // self.n
        return out


@dataclass(frozen=True, eq=False)
class EgoGraph:
    shape: EgoShape
    node_at: np.ndarray
    center_label: int

    @property
    def center(self) -> int:
        return int(self.node_at[0])


@dataclass(frozen=True, eq=False)
class MashedEgoGraph:
    """Position-wise average of a batch: reduction embeddings and soft labels only."""

    shape: EgoShape
    embeddings: np.ndarray
    soft_labels: np.ndarray

    @property
    def center_label(self) -> np.ndarray:
        return self.soft_labels[0]

    @property
    def num_floats(self) -> int:
        return self.embeddings.size + self.soft_labels.size

    def to_bytes(self) -> bytes:
        d_r = self.embeddings.shape[1]
        c = self.soft_labels.shape[1]
        header = _MEGO_HEADER.pack(MEGO_MAGIC, self.shape.k, self.shape.n, d_r, c)
        body = np.concatenate([self.embeddings.ravel(), self.soft_labels.ravel()]).astype("<f4").tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> MashedEgoGraph:
        if len(data) < _MEGO_HEADER.size:
            raise ValueError("truncated mashed ego-graph header")
        magic, k, n, d_r, c = _MEGO_HEADER.unpack_from(data)
        if magic != MEGO_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        shape = EgoShape(k, n)
        s = shape.size
        body = np.frombuffer(data, dtype="<f4", offset=_MEGO_HEADER.size)
        if body.size != s * (d_r + c):
            raise ValueError(f"expected {s * (d_r + c)} floats, found {body.size}")
        emb = body[: s * d_r].reshape(s, d_r).astype(np.float64)
        labels = body[s * d_r :].reshape(s, c).astype(np.float64)
        return cls(shape, emb, labels)


def sample_ego_batch(graph: Graph, centers, shape: EgoShape, rng: np.random.Generator) -> np.ndarray:
    """Sample one ego-graph per center; returns node ids ``[B, S]``.

    Children are drawn uniformly with replacement from the parent's neighbors;
    a node without neighbors fills all of its child slots with itself.
    """
    centers = np.atleast_1d(np.asarray(centers, dtype=np.int64))
    if centers.size and (centers.min() < 0 or centers.max() >= graph.num_nodes):
        raise ValueError("center outside the graph")
    b = centers.shape[0]
    node_at = np.empty((b, shape.size), dtype=np.int64)
    node_at[:, 0] = centers
    deg = graph.degrees
    for j in range(shape.k):
        parents = node_at[:, shape.layer(j)]
        p_deg = deg[parents]
        draws = rng.integers(0, np.maximum(p_deg, 1)[..., None], size=parents.shape + (shape.n,))
        if graph.indices.size:
            # clamp only matters for degree-0 parents, which are overwritten below
            slot = np.minimum(graph.indptr[parents][..., None] + draws, graph.indices.size - 1)
            picked = graph.indices[slot]
        else:
            picked = draws
        children = np.where(p_deg[..., None] > 0, picked, parents[..., None])
        node_at[:, shape.layer(j + 1)] = children.reshape(b, -1)
    return node_at


def sample_ego_graph(graph: Graph, center: int, shape: EgoShape, rng: np.random.Generator) -> EgoGraph:
    node_at = sample_ego_batch(graph, [center], shape, rng)[0]
    return EgoGraph(shape, node_at, int(graph.labels[center]))


def mash_batch(member_embeddings: np.ndarray, member_labels: np.ndarray, shape: EgoShape) -> MashedEgoGraph:
    """Average a batch ``[B, S, *]`` of aligned ego-graphs position by position."""
    emb = np.asarray(member_embeddings, dtype=np.float64)
    lab = np.asarray(member_labels, dtype=np.float64)
    if emb.ndim != 3 or lab.ndim != 3:
        raise ValueError("expected [B, S, d_r] embeddings and [B, S, C] labels")
    if emb.shape[0] < 1:
        raise ValueError("cannot mash an empty batch")
    if emb.shape[:2] != lab.shape[:2] or emb.shape[1] != shape.size:
        raise ValueError(
            f"shape mismatch: embeddings {emb.shape}, labels {lab.shape}, expected S={shape.size}"
        )
    return MashedEgoGraph(shape, emb.mean(axis=0), lab.mean(axis=0))


def position_labels(graph: Graph, node_at: np.ndarray) -> np.ndarray:
    """One-hot label of the node at every position, ``[..., S, C]``."""
    return one_hot(graph.labels[node_at], graph.num_classes)


def alignment_order(shape: EgoShape, layer_permutations) -> np.ndarray:
    """Source position for every target position under a re-alignment.

    ``layer_permutations[j - 1]`` permutes layer ``j``: the entry at slot ``i``
    is the slot (within the layer) whose occupant moves to ``i``. Layer 1 may
    be permuted freely. Deeper layers are applied after the parent moves have
    been inherited, and must keep each sibling block in place so every node
    stays attached to its parent.
    """
    if len(layer_permutations) != shape.k:
        raise ValueError(f"need {shape.k} layer permutations, got {len(layer_permutations)}")
    order = np.arange(shape.size)
    for j in range(1, shape.k + 1):
        perm = np.asarray(layer_permutations[j - 1], dtype=np.int64)
        size = shape.layer_size(j)
        if perm.shape != (size,) or not np.array_equal(np.sort(perm), np.arange(size)):
            raise ValueError(f"layer {j} permutation must be a permutation of {size} slots")
        if j > 1 and not np.array_equal(perm // shape.n, np.arange(size) // shape.n):
            raise ValueError(f"layer {j} permutation moves nodes between sibling blocks")
        start = shape.layer_start(j)
        # children of the (already moved) parent at target slot q come from the source parent's block
        parent_src = order[shape.parents[start : start + size]]
        inherited = 1 + parent_src * shape.n + (np.arange(size) % shape.n)
        order[start : start + size] = inherited[perm]
    return order


def permute_alignment(ego: EgoGraph, layer_permutations) -> EgoGraph:
    order = alignment_order(ego.shape, layer_permutations)
    return EgoGraph(ego.shape, ego.node_at[order], ego.center_label)


def random_alignment(shape: EgoShape, rng: np.random.Generator) -> list[np.ndarray]:
    """A uniformly random tree-preserving re-alignment (per-layer permutations)."""
    perms = []
    for j in range(1, shape.k + 1):
        size = shape.layer_size(j)
        if j == 1:
            perms.append(rng.permutation(size))
        else:
            blocks = np.arange(size).reshape(-1, shape.n)
            perms.append(rng.permuted(blocks, axis=1).ravel())
    return perms
