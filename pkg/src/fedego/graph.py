"""Graph data model, dataset ingestion and non-IID client partitioning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Raised when a node or edge file cannot be parsed."""


class PartitionError(ValueError):
    """Raised when a client's node quota cannot be met."""


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable attributed graph with CSR adjacency.

    ``indptr``/``indices`` hold the sorted, duplicate-free neighbor list of
    every node: ``indices[indptr[u]:indptr[u + 1]]``.
    """

    features: np.ndarray
    labels: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    num_classes: int

    @property
    def num_nodes(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_edges(self) -> int:
        """Undirected edge count (self-loops counted once)."""
        loops = int(np.sum(self.indices == np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))))
        return (int(self.indices.shape[0]) - loops) // 2 + loops

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def compute_features(self):
        """Feature matrix in the cheapest form for matrix products.

        Sparse bag-of-words features (Cora-style) come back as CSR.
        """
        cached = self.__dict__.get("_compute_features")
        if cached is None:
            density = np.count_nonzero(self.features) / max(self.features.size, 1)
            cached = sp.csr_matrix(self.features) if density < 0.1 else self.features
            object.__setattr__(self, "_compute_features", cached)
        return cached


def build_graph(
    features: np.ndarray,
    labels: np.ndarray,
    edges: np.ndarray,
    num_classes: int | None = None,
) -> Graph:
    """Assemble a :class:`Graph` from an edge list, symmetrizing and deduplicating."""
    features = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if features.ndim != 2 or features.shape[0] != n:
        raise ValueError(f"features must be [{n} x d], got {features.shape}")
    if n and labels.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 0
    if n and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")

    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise ValueError("edge references a node outside [0, num_nodes)")
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.coo_matrix((np.ones(src.shape[0], dtype=np.int8), (src, dst)), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.sort_indices()
    return Graph(
        features=features,
        labels=labels,
        indptr=adj.indptr.astype(np.int64),
        indices=adj.indices.astype(np.int64),
        num_classes=int(num_classes),
    )


def load_graph(nodes_path: str | Path, edges_path: str | Path, l1_normalize: bool = False) -> Graph:
    """Read a node TSV (``id<TAB>label<TAB>f_1 ... f_d``) and an edge list.

    Node ids are remapped to ``[0, num_nodes)`` in file order.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    id_map: dict[int, int] = {}
    labels: list[int] = []
    rows: list[np.ndarray] = []
    dim = None
    with nodes_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphFormatError(f"{nodes_path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                node_id, label = int(parts[0]), int(parts[1])
                feats = np.array(parts[2].split(), dtype=np.float64)
            except ValueError as exc:
                raise GraphFormatError(f"{nodes_path}:{lineno}: {exc}") from None
            if node_id < 0 or label < 0:
                raise GraphFormatError(f"{nodes_path}:{lineno}: ids and labels must be non-negative")
            if node_id in id_map:
                raise GraphFormatError(f"{nodes_path}:{lineno}: duplicate node id {node_id}")
            if dim is None:
                dim = feats.shape[0]
            elif feats.shape[0] != dim:
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: feature dimension {feats.shape[0]} != {dim}"
                )
            id_map[node_id] = len(labels)
            labels.append(label)
            rows.append(feats)

    edges: list[tuple[int, int]] = []
    with edges_path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{edges_path}:{lineno}: expected 'src dst'")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(f"{edges_path}:{lineno}: {exc}") from None
            if a not in id_map or b not in id_map:
                missing = a if a not in id_map else b
                raise GraphFormatError(f"{edges_path}:{lineno}: unknown node id {missing}")
            edges.append((id_map[a], id_map[b]))

    features = np.vstack(rows) if rows else np.zeros((0, 0))
    if l1_normalize:
        norms = np.abs(features).sum(axis=1, keepdims=True)
        features = features / np.where(norms > 0, norms, 1.0)
    return build_graph(features, np.array(labels, dtype=np.int64), np.array(edges, dtype=np.int64))


def convert_linqs(content_path: str | Path, cites_path: str | Path, out_dir: str | Path) -> tuple[Path, Path]:
    """Convert a LINQS ``.content``/``.cites`` dump (e.g. Cora) to node/edge files.

    Document ids become dense integers in file order; class names are numbered by
    first appearance. Citations touching unknown documents are dropped, matching
    the common loaders.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids: dict[str, int] = {}
    classes: dict[str, int] = {}
    nodes_out = out_dir / "nodes.tsv"
    edges_out = out_dir / "edges.txt"
    with open(content_path, encoding="utf-8") as src, nodes_out.open("w", encoding="utf-8") as dst:
        for lineno, line in enumerate(src, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise GraphFormatError(f"{content_path}:{lineno}: too few fields")
            doc, feats, cls = parts[0], parts[1:-1], parts[-1]
            ids[doc] = len(ids)
            label = classes.setdefault(cls, len(classes))
            dst.write(f"{ids[doc]}\t{label}\t{' '.join(feats)}\n")
    with open(cites_path, encoding="utf-8") as src, edges_out.open("w", encoding="utf-8") as dst:
        for line in src:
            parts = line.split()
            if len(parts) == 2 and parts[0] in ids and parts[1] in ids:
                dst.write(f"{ids[parts[0]]} {ids[parts[1]]}\n")
    return nodes_out, edges_out


def generate_synthetic_graph(
    num_nodes: int,
    num_classes: int,
    dim: int,
    intra_edge_prob: float,
    inter_edge_prob: float,
    seed: int,
    feature_noise: float = 1.0,
) -> Graph:
    """Planted-partition graph with class-correlated Gaussian features.

    Node ``v`` belongs to class ``v % num_classes``; each class has its own
    centroid and features are centroid plus isotropic noise.
    """
    if num_classes > num_nodes:
        raise ValueError(f"num_classes={num_classes} exceeds num_nodes={num_nodes}")
    if num_classes < 1 or dim < 1:
        raise ValueError("num_classes and dim must be positive")
    if not 0.0 <= inter_edge_prob <= intra_edge_prob <= 1.0:
        raise ValueError("need 0 <= inter_edge_prob <= intra_edge_prob <= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes, dtype=np.int64) % num_classes
    centroids = rng.normal(0.0, 1.0, size=(num_classes, dim))
    features = centroids[labels] + feature_noise * rng.normal(0.0, 1.0, size=(num_nodes, dim))

    iu, ju = np.triu_indices(num_nodes, k=1)
    probs = np.where(labels[iu] == labels[ju], intra_edge_prob, inter_edge_prob)
    keep = rng.random(iu.shape[0]) < probs
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    return build_graph(features, labels, edges, num_classes)


def distribution_vector(soft_labels: np.ndarray) -> np.ndarray:
    """Class distribution of a set of (possibly soft) label rows: their column mean."""
    soft_labels = np.asarray(soft_labels, dtype=np.float64)
    if soft_labels.ndim != 2 or soft_labels.shape[0] == 0:
        raise ValueError("distribution_vector needs at least one label row")
    return soft_labels.mean(axis=0)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 5
    alpha_global: float = 0.3
    alpha_local: float = 0.3
    major_labels_per_client: int = 3
    major_node_rate: float = 0.8
    local_test_nodes: int = 300
    local_val_fraction: float = 0.2
    seed: int = 0

    def validate(self, num_classes: int | None = None) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0.0 < self.alpha_global < 1.0:
            raise ValueError("alpha_global must lie in (0, 1)")
        if not 0.0 < self.alpha_local <= 1.0:
            raise ValueError("alpha_local must lie in (0, 1]")
        if not 0.0 <= self.major_node_rate <= 1.0:
            raise ValueError("major_node_rate must lie in [0, 1]")
        if not 0.0 <= self.local_val_fraction < 1.0:
            raise ValueError("local_val_fraction must lie in [0, 1)")
        if self.local_test_nodes < 0 or self.major_labels_per_client < 0:
            raise ValueError("counts must be non-negative")
        if num_classes is not None and self.major_labels_per_client > num_classes:
            raise ValueError(
                f"major_labels_per_client={self.major_labels_per_client} exceeds {num_classes} classes"
            )


@dataclass
class ClientDataset:
    client_id: int
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    test_nodes: np.ndarray
    distribution: np.ndarray
    major_labels: tuple[int, ...] = ()

    @property
    def all_nodes(self) -> np.ndarray:
        return np.concatenate([self.train_nodes, self.val_nodes, self.test_nodes])


@dataclass
class Partition:
    global_test: np.ndarray
    clients: list[ClientDataset]
    config: PartitionConfig = field(default_factory=PartitionConfig)

    def to_json(self) -> str:
        doc = {
            "seed": self.config.seed,
            "config": asdict(self.config),
            "global_test": self.global_test.tolist(),
            "clients": [
                {
                    "client_id": c.client_id,
                    "major_labels": list(c.major_labels),
                    "train": c.train_nodes.tolist(),
                    "val": c.val_nodes.tolist(),
                    "test": c.test_nodes.tolist(),
                }
                for c in self.clients
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str, graph: Graph) -> Partition:
        doc = json.loads(text)
        config = PartitionConfig(**doc["config"])
        clients = []
        for entry in doc["clients"]:
            train = np.array(entry["train"], dtype=np.int64)
            clients.append(
                ClientDataset(
                    client_id=int(entry["client_id"]),
                    train_nodes=train,
                    val_nodes=np.array(entry["val"], dtype=np.int64),
                    test_nodes=np.array(entry["test"], dtype=np.int64),
                    distribution=_label_distribution(graph, train),
                    major_labels=tuple(entry.get("major_labels", ())),
                )
            )
        return cls(np.array(doc["global_test"], dtype=np.int64), clients, config)

    @classmethod
    def load(cls, path: str | Path, graph: Graph) -> Partition:
        return cls.from_json(Path(path).read_text(encoding="utf-8"), graph)


def _label_distribution(graph: Graph, nodes: np.ndarray) -> np.ndarray:
    if len(nodes) == 0:
        return np.full(graph.num_classes, 1.0 / graph.num_classes)
    return distribution_vector(one_hot(graph.labels[nodes], graph.num_classes))


def partition_non_iid(graph: Graph, config: PartitionConfig) -> Partition:
    """Label-skew partition: a global test split plus one local dataset per client.

    Each client picks ``major_labels_per_client`` labels and draws
    ``major_node_rate`` of its quota from nodes with those labels; the rest is
    drawn uniformly from the remaining nodes it has not taken yet. Clients may
    share nodes with each other.
    """
    config.validate(graph.num_classes)
    rng = np.random.default_rng(config.seed)
    n = graph.num_nodes
    n_global = math.floor(config.alpha_global * n)
    global_test = np.sort(rng.choice(n, size=n_global, replace=False))
    remaining = np.setdiff1d(np.arange(n), global_test)
    quota = math.floor(config.alpha_local * remaining.shape[0])
    remaining_labels = graph.labels[remaining]

    clients = []
    for cid in range(config.num_clients):
        majors = np.sort(rng.choice(graph.num_classes, size=config.major_labels_per_client, replace=False))
        major_quota = math.floor(config.major_node_rate * quota)
        pool = remaining[np.isin(remaining_labels, majors)]
        if pool.shape[0] < major_quota:
            log.warning(
                "client %d: major pool for labels %s has %d nodes, need %d; filling from uniform pool",
                cid, majors.tolist(), pool.shape[0], major_quota,
            )
            major_quota = pool.shape[0]
        chosen = rng.choice(pool, size=major_quota, replace=False)
        rest = np.setdiff1d(remaining, chosen)
        n_rest = quota - major_quota
        if rest.shape[0] < n_rest:
            raise PartitionError(
                f"client {cid}: need {n_rest} more nodes beyond labels {majors.tolist()}, "
                f"only {rest.shape[0]} unselected remain"
            )
        chosen = np.concatenate([chosen, rng.choice(rest, size=n_rest, replace=False)])
        chosen = rng.permutation(chosen)

        n_test = config.local_test_nodes
        if chosen.shape[0] <= n_test:
            raise PartitionError(
                f"client {cid}: quota of {chosen.shape[0]} nodes cannot hold {n_test} local test nodes "
                f"(major labels {majors.tolist()})"
            )
        test = chosen[:n_test]
        body = chosen[n_test:]
        n_val = math.floor(config.local_val_fraction * body.shape[0])
        val, train = body[:n_val], body[n_val:]
        clients.append(
            ClientDataset(
                client_id=cid,
                train_nodes=np.sort(train),
                val_nodes=np.sort(val),
                test_nodes=np.sort(test),
                distribution=_label_distribution(graph, train),
                major_labels=tuple(int(m) for m in majors),
            )
        )
    return Partition(global_test, clients, config)
