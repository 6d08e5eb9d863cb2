"""FedEgo rounds, the FedAvg and local-only baselines, and their bookkeeping."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .ego import EgoShape, MashedEgoGraph, mash_batch, position_labels, sample_ego_batch
from .evaluation import EvalSet, evaluate_on, sample_eval_set
from .graph import ClientDataset, Graph, Partition, distribution_vector, one_hot
from .neural import (
    AdamState,
    ModelParams,
    NumericalError,
    PersonalizationParams,
    ReductionParams,
    adam_step,
    average_params,
    average_reduction,
    init_model,
    mix_personalization,
    model_backward,
    param_distance,
    param_bytes,
    personalization_backward,
    weight_divergence,
)
from .report import ExperimentReport, RoundReport

log = logging.getLogger(__name__)

STRATEGIES = ("fedego", "fedavg", "local_only")


class ConsensusError(RuntimeError):
    """FedAvg clients disagree after averaging."""


@dataclass
class FedConfig:
    strategy: str = "fedego"
    rounds: int = 200
    local_epochs: int = 5
    server_epochs: int = 5
    # None: one pass over the training set per epoch, ceil(|train| / batch_size) batches
    batches_per_epoch: int | None = 5
    batch_size: int = 32
    server_batch_size: int | None = None
    gamma: float = 0.25
    k: int = 2
    n: int = 6
    lr: float = 0.01
    server_lr: float | None = None
    seed: int = 0
    activation: str = "relu"
    reduction_dim: int = 64
    hidden_dim: int = 64
    reduction_layers: int = 1
    batch_sampling: str = "replacement"
    disable_mixup: bool = False
    disable_reduction_avg: bool = False
    disable_personalization_mix: bool = False
    fixed_lambda: float | None = None

    def __post_init__(self):
        if self.strategy == "local":
            self.strategy = "local_only"
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.batch_size < 1 or (self.server_batch_size is not None and self.server_batch_size < 1):
            raise ValueError("batch sizes must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError("fixed_lambda must lie in [0, 1]")
        if self.rounds < 0 or self.local_epochs < 0 or self.server_epochs < 0:
            raise ValueError("round and epoch counts must be non-negative")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be >= 1")
        if self.batch_sampling not in ("replacement", "shuffle"):
            raise ValueError("batch_sampling must be 'replacement' or 'shuffle'")
        if self.lr < 0 or (self.server_lr is not None and self.server_lr < 0):
            raise ValueError("learning rates must be non-negative")
        EgoShape(self.k, self.n)

    @property
    def shape(self) -> EgoShape:
        return EgoShape(self.k, self.n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    model: ModelParams
    adam: AdamState
    distribution: np.ndarray
    rng: np.random.Generator


@dataclass
class ServerState:
    reduction: ReductionParams
    personalization: PersonalizationParams
    adam: AdamState
    rng: np.random.Generator
    pool: list[MashedEgoGraph] = field(default_factory=list)
    distribution: np.ndarray | None = None


@dataclass
class RoundUpload:
    client_id: int
    train_loss: float | None
    reduction: ReductionParams | None = None
    model: ModelParams | None = None
    mashed: list[MashedEgoGraph] = field(default_factory=list)

    @property
    def param_bytes(self) -> int:
        if self.model is not None:
            return param_bytes(self.model)
        return param_bytes(self.reduction) if self.reduction is not None else 0

    @property
    def ego_bytes(self) -> int:
        return sum(comm_cost(m) for m in self.mashed)


def comm_cost(item) -> int:
    """Bytes on the wire at 4 bytes per float."""
    if item is None:
        return 0
    if isinstance(item, MashedEgoGraph):
        return 4 * item.num_floats
    if isinstance(item, RoundUpload):
        return item.param_bytes + item.ego_bytes
    return param_bytes(item)


def ego_graph_bytes(shape: EgoShape, reduction_dim: int, num_classes: int) -> int:
    return 4 * shape.size * (reduction_dim + num_classes)


# ---------------------------------------------------------------- λ


def earth_mover_distance(p_local: np.ndarray, p_global: np.ndarray) -> float:
    return float(np.abs(np.asarray(p_local) - np.asarray(p_global)).sum())


def adaptive_lambda(p_local: np.ndarray, p_global: np.ndarray, gamma: float) -> float:
    """Mixing coefficient ``(EMD / 2) ** gamma``."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    half = min(max(earth_mover_distance(p_local, p_global) / 2.0, 0.0), 1.0)
    return float(half**gamma)


# ---------------------------------------------------------------- stages


def _batches_per_epoch(client: ClientState, config: FedConfig) -> int:
    if config.batches_per_epoch is not None:
        return config.batches_per_epoch
    return math.ceil(len(client.dataset.train_nodes) / config.batch_size)


def client_local_stage(client: ClientState, graph: Graph, config: FedConfig) -> RoundUpload:
    """Local epochs of Adam on center-node cross-entropy; one mashed ego-graph per batch."""
    train = client.dataset.train_nodes
    if train.size == 0:
        raise ValueError(f"client {client.client_id} has an empty training set")
    shape = config.shape
    feats = graph.compute_features()
    mashing = config.strategy == "fedego"
    mashed, losses = [], []
    nb = _batches_per_epoch(client, config)
    for _ in range(config.local_epochs):
        order = client.rng.permutation(train) if config.batch_sampling == "shuffle" else None
        for b in range(nb):
            if order is None:
                centers = client.rng.choice(train, size=config.batch_size, replace=True)
            else:
                centers = order[np.arange(b * config.batch_size, (b + 1) * config.batch_size) % order.size]
            node_at = sample_ego_batch(graph, centers, shape, client.rng)
            targets = one_hot(graph.labels[centers], graph.num_classes)
            res = model_backward(client.model, feats, node_at, targets, shape)
            losses.append(res.loss)
            if mashing:
                labels = position_labels(graph, node_at)
                if config.disable_mixup:
                    mashed.append(MashedEgoGraph(shape, res.position_embeddings[0].copy(), labels[0]))
                else:
                    mashed.append(mash_batch(res.position_embeddings, labels, shape))
            adam_step(client.adam, client.model, res.grads)
    loss = float(np.mean(losses)) if losses else None
    if config.strategy == "fedego":
        return RoundUpload(client.client_id, loss, reduction=client.model.reduction.copy(), mashed=mashed)
    if config.strategy == "fedavg":
        return RoundUpload(client.client_id, loss, model=client.model.copy())
    return RoundUpload(client.client_id, loss)


def server_global_stage(server: ServerState, uploads: list[RoundUpload], config: FedConfig) -> float | None:
    """Average reduction layers, train the global personalization layers on the
    uploaded mashed ego-graphs, and refresh the global label distribution.

    Returns the mean server training loss (None when no step was taken).
    """
    if not uploads:
        raise ValueError("server stage needs at least one upload")
    if not config.disable_reduction_avg:
        server.reduction = average_reduction([u.reduction for u in uploads])
    server.pool = [m for u in uploads for m in u.mashed]
    if not server.pool:
        raise ValueError("server stage received an empty mashed ego-graph pool")
    emb = np.stack([m.embeddings for m in server.pool])
    centers = np.stack([m.center_label for m in server.pool])
    bs = config.server_batch_size or config.batch_size
    losses = []
    for _ in range(config.server_epochs):
        perm = server.rng.permutation(len(server.pool))
        for start in range(0, perm.size, bs):
            idx = perm[start : start + bs]
            loss, grads = personalization_backward(server.personalization, emb[idx], centers[idx], config.shape)
            losses.append(loss)
            adam_step(server.adam, server.personalization, grads)
    server.distribution = distribution_vector(centers)
    return float(np.mean(losses)) if losses else None


def apply_global_update(client: ClientState, server: ServerState, config: FedConfig) -> dict:
    """Load the averaged reduction layers and mix personalization layers toward the server's."""
    if server.distribution is None:
        raise ValueError("server stage has not run yet")
    if not config.disable_reduction_avg:
        client.model.reduction = server.reduction.copy()
    emd = earth_mover_distance(client.distribution, server.distribution)
    if config.fixed_lambda is not None:
        lam = float(config.fixed_lambda)
    else:
        lam = adaptive_lambda(client.distribution, server.distribution, config.gamma)
    before = weight_divergence(client.model.personalization, server.personalization, "absolute").value
    if not config.disable_personalization_mix:
        client.model.personalization = mix_personalization(client.model.personalization,
                                                           server.personalization, lam)
    rel = weight_divergence(client.model.personalization, server.personalization, "relative")
    return {
        "lambda": lam,
        "emd": emd,
        "wd_absolute_pre_mix": before,
        "wd_relative": rel.value,
        "wd_relative_skipped": rel.skipped,
        "wd_absolute": weight_divergence(client.model.personalization, server.personalization, "absolute").value,
    }


# ---------------------------------------------------------------- setup


@dataclass
class Federation:
    """Everything a run mutates: client states, server state, and config."""

    graph: Graph
    config: FedConfig
    clients: list[ClientState]
    server: ServerState | None
    threads: int = 1


def _seed_streams(seed: int, num_clients: int):
    root = np.random.SeedSequence(seed)
    init_ss, server_ss, eval_ss, clients_ss = root.spawn(4)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(server_ss),
        np.random.default_rng(eval_ss),
        [np.random.default_rng(s) for s in clients_ss.spawn(num_clients)],
    )


def build_federation(graph: Graph, partition: Partition, config: FedConfig, threads: int = 1) -> Federation:
    """Initialize clients and server from one seed.

    Every client and the server start from the same initial weights.
    """
    init_rng, server_rng, _, client_rngs = _seed_streams(config.seed, len(partition.clients))
    model = init_model(
        graph.feature_dim, graph.num_classes, init_rng,
        reduction_dim=config.reduction_dim, hidden_dim=config.hidden_dim, depth=config.k,
        reduction_layers=config.reduction_layers, activation=config.activation,
    )
    graph.compute_features()
    clients = [
        ClientState(ds.client_id, ds, model.copy(), AdamState(lr=config.lr), ds.distribution.copy(), rng)
        for ds, rng in zip(partition.clients, client_rngs)
    ]
    server = None
    if config.strategy == "fedego":
        server_lr = config.lr if config.server_lr is None else config.server_lr
        server = ServerState(model.reduction.copy(), model.personalization.copy(), AdamState(lr=server_lr), server_rng)
    return Federation(graph, config, clients, server, max(1, threads))


def _local_stages(fed: Federation) -> list[RoundUpload]:
    if fed.threads > 1 and len(fed.clients) > 1:
        with ThreadPoolExecutor(max_workers=fed.threads) as pool:
            return list(pool.map(lambda c: client_local_stage(c, fed.graph, fed.config), fed.clients))
    return [client_local_stage(c, fed.graph, fed.config) for c in fed.clients]


def run_round(fed: Federation, round_index: int) -> RoundReport:
    """One synchronous round; the F1 fields stay None until the caller evaluates."""
    config = fed.config
    uploads = _local_stages(fed)
    per_client = [{"client_id": c.client_id, "train_loss": u.train_loss} for c, u in zip(fed.clients, uploads)]
    n_clients = len(fed.clients)
    bytes_ = {"params_up": 0, "params_down": 0, "ego_up": 0}
    server_loss = None

    if config.strategy == "fedego":
        server_loss = server_global_stage(fed.server, uploads, config)
        bytes_["params_up"] = sum(u.param_bytes for u in uploads)
        bytes_["ego_up"] = sum(u.ego_bytes for u in uploads)
        down = param_bytes(fed.server.personalization)
        if not config.disable_reduction_avg:
            down += param_bytes(fed.server.reduction)
        bytes_["params_down"] = n_clients * down
        for entry, client in zip(per_client, fed.clients):
            entry.update(apply_global_update(client, fed.server, config))
    elif config.strategy == "fedavg":
        averaged = average_params([u.model for u in uploads])
        for client in fed.clients:
            client.model = averaged.copy()
        bytes_["params_up"] = sum(u.param_bytes for u in uploads)
        bytes_["params_down"] = n_clients * param_bytes(averaged)

    return RoundReport(round_index, config.strategy, per_client, None, None, bytes_,
                       server_loss=server_loss)


@dataclass
class EvalPlan:
    local_test: list[EvalSet]
    local_val: list[EvalSet | None]
    global_test: EvalSet


def build_eval_plan(graph: Graph, partition: Partition, config: FedConfig) -> EvalPlan:
    """Draw every evaluation ego-graph once from the seed's evaluation stream.

    The stream depends only on the seed, so all strategies sharing a seed are
    scored on identical samples.
    """
    _, _, eval_rng, _ = _seed_streams(config.seed, len(partition.clients))
    shape = config.shape
    global_test = sample_eval_set(graph, partition.global_test, shape, eval_rng)
    local_test, local_val = [], []
    for ds in partition.clients:
        local_test.append(sample_eval_set(graph, ds.test_nodes, shape, eval_rng))
        local_val.append(sample_eval_set(graph, ds.val_nodes, shape, eval_rng) if ds.val_nodes.size else None)
    return EvalPlan(local_test, local_val, global_test)


def evaluate_federation(fed: Federation, plan: EvalPlan) -> dict:
    shape = fed.config.shape
    clients = []
    for i, client in enumerate(fed.clients):
        entry = {
            "client_id": client.client_id,
            "local_test": evaluate_on(client.model, fed.graph, plan.local_test[i], shape).to_dict(),
            "global_test": evaluate_on(client.model, fed.graph, plan.global_test, shape).to_dict(),
        }
        val = plan.local_val[i]
        entry["local_val"] = (evaluate_on(client.model, fed.graph, val, shape).to_dict() if val is not None
                              else {"micro_f1": None, "macro_f1": None, "loss": None, "count": 0})
        clients.append(entry)
    vals = [c["local_val"]["micro_f1"] for c in clients if c["local_val"]["count"]]
    out = {
        "clients": clients,
        "global_f1": float(np.mean([c["global_test"]["micro_f1"] for c in clients])),
        "local_f1": float(np.mean([c["local_test"]["micro_f1"] for c in clients])),
        "val_f1": float(np.mean(vals)) if vals else None,
        "server_global_f1": None,
    }
    if fed.server is not None:
        server_model = ModelParams(fed.server.reduction, fed.server.personalization)
        out["server_global_f1"] = evaluate_on(server_model, fed.graph, plan.global_test, shape).micro_f1
    return out


def _merge_eval(report: RoundReport, ev: dict) -> None:
    by_id = {c["client_id"]: c for c in ev["clients"]}
    for entry in report.clients:
        scores = by_id[entry["client_id"]]
        entry["local_test"] = scores["local_test"]
        entry["local_val"] = scores["local_val"]
        entry["global_test"] = scores["global_test"]
        entry["local_f1"] = scores["local_test"]["micro_f1"]
    report.global_f1 = ev["global_f1"]
    report.local_f1 = ev["local_f1"]
    report.server_global_f1 = ev["server_global_f1"]


def max_pairwise_distance(models: list[ModelParams]) -> float:
    return max((param_distance(a, b) for i, a in enumerate(models) for b in models[i + 1 :]), default=0.0)


def run_experiment(graph: Graph, partition: Partition, config: FedConfig, threads: int = 1,
                   on_round=None, check_consensus: bool = False) -> ExperimentReport:
    """Initialize, evaluate untrained, then run ``config.rounds`` rounds with evaluation after each."""
    started = time.perf_counter()
    fed = build_federation(graph, partition, config, threads)
    plan = build_eval_plan(graph, partition, config)
    initial = evaluate_federation(fed, plan)
    report = ExperimentReport(config=config.to_dict(), seed=config.seed, initial=initial)
    best_val, best = -1.0, None
    for r in range(1, config.rounds + 1):
        try:
            rnd = run_round(fed, r)
        except NumericalError as exc:
            raise NumericalError(f"round {r}: {exc}") from exc
        bad = [c["client_id"] for c in rnd.clients
               if c["train_loss"] is not None and not math.isfinite(c["train_loss"])]
        if bad:
            raise NumericalError(f"round {r}: non-finite training loss on clients {bad}")
        if check_consensus and config.strategy == "fedavg":
            gap = max_pairwise_distance([c.model for c in fed.clients])
            if gap != 0.0:
                raise ConsensusError(f"round {r}: fedavg clients differ by {gap!r}")
        ev = evaluate_federation(fed, plan)
        _merge_eval(rnd, ev)
        report.rounds.append(rnd)
        if on_round is not None:
            on_round(rnd)
        log.info("round %d/%d %s global_f1=%.4f local_f1=%.4f", r, config.rounds, config.strategy,
                 rnd.global_f1, rnd.local_f1)
        if ev["val_f1"] is not None and ev["val_f1"] > best_val:
            best_val, best = ev["val_f1"], {"round": r, "val_f1": ev["val_f1"], "global_f1": ev["global_f1"],
                                            "local_f1": ev["local_f1"]}
    last = report.rounds[-1] if report.rounds else None
    report.final = {
        "round": config.rounds,
        "global_f1": last.global_f1 if last else initial["global_f1"],
        "local_f1": last.local_f1 if last else initial["local_f1"],
        "server_global_f1": last.server_global_f1 if last else initial["server_global_f1"],
    }
    report.best_val = best or {}
    report.wall_clock = time.perf_counter() - started
    return report


def mean_weight_divergence(report: ExperimentReport) -> float:
    """Mean relative weight divergence across clients after the final round."""
    if not report.rounds:
        raise ValueError("report has no rounds")
    return float(np.mean([c["wd_relative"] for c in report.rounds[-1].clients]))


def gamma_divergence_probe(graph: Graph, partition: Partition, config: FedConfig, gammas, seeds=(0,),
                           threads: int = 1):
    """One FedEgo run per (γ, seed); returns per-client rows and seed-averaged summaries."""
    gammas = [float(g) for g in gammas]
    if len(gammas) < 2:
        raise ValueError("gamma probe needs at least two gamma values")
    rows, summary = [], []
    for gamma in gammas:
        per_seed = []
        for seed in seeds:
            cfg = FedConfig(**{**config.to_dict(), "strategy": "fedego", "gamma": gamma, "seed": int(seed),
                               "fixed_lambda": None, "disable_personalization_mix": False})
            rep = run_experiment(graph, partition, cfg, threads=threads)
            for c in rep.rounds[-1].clients if rep.rounds else []:
                rows.append({"gamma": gamma, "seed": int(seed), "client_id": c["client_id"], "lambda": c["lambda"],
                             "emd": c["emd"], "wd_relative": c["wd_relative"], "wd_absolute": c["wd_absolute"]})
            per_seed.append(mean_weight_divergence(rep))
        summary.append({"gamma": gamma, "mean_wd_relative": float(np.mean(per_seed)),
                        "per_seed": per_seed})
    return rows, summary
