"""Acceptance gate A1-A10; a summary line per criterion is printed at the end of the run.

Cora-based criteria read the dataset from ``$FEDEGO_CORA_DIR``: either
``nodes.tsv`` + ``edges.txt`` or the LINQS ``cora.content`` + ``cora.cites`` pair.
"""

import contextlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from fedego.cli import main
from fedego.ego import EgoShape
from fedego.federation import (
    FedConfig,
    adaptive_lambda,
    build_federation,
    ego_graph_bytes,
    gamma_divergence_probe,
    max_pairwise_distance,
    run_experiment,
    run_round,
)
from fedego.graph import PartitionConfig, convert_linqs, generate_synthetic_graph, load_graph, partition_non_iid
from fedego.neural import init_model, mix_personalization, param_bytes, weight_divergence

CORA_SEEDS = (0, 1, 2, 3)
ABLATION_SEEDS = (0, 1)


@contextlib.contextmanager
def criterion(key: str, detail: list[str]):
    """Record pass/fail for ``key``; ``detail`` may be appended to inside the block."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE[key] = (False, "; ".join(detail + [f"{type(exc).__name__}: {(str(exc).splitlines() or [''])[0]}"]))
        raise
    ACCEPTANCE[key] = (True, "; ".join(detail))


# ---------------------------------------------------------------- Cora (A1, A2, A10)


def load_cora():
    root = os.environ.get("FEDEGO_CORA_DIR")
    if not root:
        raise FileNotFoundError("Cora not available: set FEDEGO_CORA_DIR to a directory with nodes.tsv/edges.txt "
                                "or cora.content/cora.cites")
    root = Path(root)
    if (root / "nodes.tsv").exists():
        return load_graph(root / "nodes.tsv", root / "edges.txt")
    if (root / "cora.content").exists():
        out = Path(os.environ.get("TMPDIR", "/tmp")) / "fedego_cora"
        nodes, edges = convert_linqs(root / "cora.content", root / "cora.cites", out)
        return load_graph(nodes, edges)
    raise FileNotFoundError(f"no Cora files in {root}")


@pytest.fixture(scope="module")
def cora_runs():
    """Seed-averaged global F1 per variant at the default settings, computed once."""
    started = time.perf_counter()
    try:
        graph = load_cora()
    except FileNotFoundError as exc:
        return {"error": str(exc)}
    part = partition_non_iid(graph, PartitionConfig())
    base = FedConfig(rounds=200)
    variants = {
        "fedego": ({}, CORA_SEEDS),
        "local_only": ({"strategy": "local_only"}, CORA_SEEDS),
        "fedavg": ({"strategy": "fedavg"}, CORA_SEEDS),
        "no_mixup": ({"disable_mixup": True}, ABLATION_SEEDS),
        "lambda0": ({"fixed_lambda": 0.0}, ABLATION_SEEDS),
    }
    out, timing = {"graph": (graph.num_nodes, graph.num_edges, graph.num_classes)}, {}
    for name, (changes, seeds) in variants.items():
        t0 = time.perf_counter()
        out[name] = {s: run_experiment(graph, part, FedConfig(**{**base.to_dict(), **changes, "seed": s})).final["global_f1"]
                     for s in seeds}
        timing[name] = time.perf_counter() - t0
    out["timing"] = timing
    out["total"] = time.perf_counter() - started
    return out


def mean(runs, name, seeds=CORA_SEEDS):
    return float(np.mean([runs[name][s] for s in seeds]))


@pytest.mark.slow
def test_a1_fedego_beats_local_only_on_cora(cora_runs):
    detail = []
    with criterion("A1", detail):
        assert "error" not in cora_runs, cora_runs.get("error")
        assert cora_runs["graph"][0] == 2708 and cora_runs["graph"][2] == 7
        gap = mean(cora_runs, "fedego") - mean(cora_runs, "local_only")
        minutes = (cora_runs["timing"]["fedego"] + cora_runs["timing"]["local_only"]) / 60
        detail += [f"fedego={mean(cora_runs, 'fedego'):.4f}", f"local={mean(cora_runs, 'local_only'):.4f}",
                   f"gap={gap:+.4f} (need >= +0.05)", f"{minutes:.1f} min"]
        assert gap >= 0.05
        assert minutes <= 15


@pytest.mark.slow
def test_a2_strategy_ordering_on_cora(cora_runs):
    detail = []
    with criterion("A2", detail):
        assert "error" not in cora_runs, cora_runs.get("error")
        ego, avg, loc = (mean(cora_runs, k) for k in ("fedego", "fedavg", "local_only"))
        detail += [f"fedego={ego:.4f}", f"fedavg={avg:.4f}", f"local={loc:.4f}"]
        assert ego >= avg - 0.005
        assert avg >= loc


@pytest.mark.slow
def test_a10_ablation_ordering_on_cora(cora_runs):
    detail = []
    with criterion("A10", detail):
        assert "error" not in cora_runs, cora_runs.get("error")
        ego = mean(cora_runs, "fedego", ABLATION_SEEDS)
        no_mix = mean(cora_runs, "no_mixup", ABLATION_SEEDS)
        lam0 = mean(cora_runs, "lambda0", ABLATION_SEEDS)
        detail += [f"fedego={ego:.4f}", f"w/o mixup={no_mix:.4f}", f"lambda=0 {lam0:.4f}"]
        assert ego >= no_mix - 0.005
        assert ego >= lam0 - 0.005


# ---------------------------------------------------------------- A3, A4


def test_a3_theorem1_alignment_invariance(capsys):
    detail = []
    with criterion("A3", detail):
        t0 = time.perf_counter()
        code = main(["verify-theorem1", "--trials", "100"])
        elapsed = time.perf_counter() - t0
        doc = json.loads(capsys.readouterr().out)
        detail += [f"linear max rel err {doc['linear_max_relative_error']:.2e}",
                   f"relu violations {len(doc['relu_violating_seeds'])}/100", f"{elapsed:.1f}s"]
        assert code == 0
        assert doc["linear_max_relative_error"] <= 1e-5 and not doc["linear_failures"]
        assert doc["relu_control"] == "expected-fail" and len(doc["relu_violating_seeds"]) >= 1
        assert elapsed < 60


def test_a4_gradient_oracle(capsys):
    detail = []
    with criterion("A4", detail):
        t0 = time.perf_counter()
        code = main(["gradcheck", "--k", "2", "--n", "2", "--dim", "8", "--reduction-dim", "8", "--hidden-dim", "8"])
        elapsed = time.perf_counter() - t0
        doc = json.loads(capsys.readouterr().out)
        detail += [f"max rel err {doc['max_error']:.2e} over {len(doc['errors'])} tensors",
                   f"kink-straddling coords {sum(doc['kinks'].values())}", f"{elapsed:.1f}s"]
        assert code == 0
        assert set(doc["errors"]) >= {"reduction.weight.0", "reduction.bias.0", "personalization.sage.0",
                                      "personalization.sage.1", "personalization.classifier.weight",
                                      "personalization.classifier.bias"}
        assert all(err < 1e-4 for err in doc["errors"].values())
        assert elapsed < 60


# ---------------------------------------------------------------- A5


def test_a5_lambda_algebra():
    detail = []
    with criterion("A5", detail):
        rng = np.random.default_rng(0)
        c = 7
        for gamma in (0.1, 0.25, 0.5, 1.0, 2.0):
            p = rng.dirichlet(np.ones(c))
            assert adaptive_lambda(p, p, gamma) == 0.0
            assert adaptive_lambda(np.eye(c)[0], np.eye(c)[3], gamma) == 1.0
        # distributions with EMD = 2t: move mass t from class 0 to class 1
        grid = np.linspace(0.0, 1.0, 100)
        base = np.array([1.0, 0.0])
        for gamma in (0.25, 0.5, 0.75, 1.5):
            lams = [adaptive_lambda(np.array([1.0 - t, t]), base, gamma) for t in grid]
            assert all(b >= a for a, b in zip(lams, lams[1:]))
        gammas = np.linspace(0.05, 3.0, 100)
        for emd in (0.1, 0.7, 1.3, 1.99):
            p = np.array([1.0 - emd / 2, emd / 2])
            lams = [adaptive_lambda(p, base, g) for g in gammas]
            assert all(b <= a for a, b in zip(lams, lams[1:]))
        worst = 0.0
        for trial in range(50):
            r = np.random.default_rng(trial)
            local = init_model(4, 3, r, reduction_dim=5, hidden_dim=6).personalization
            glob = init_model(4, 3, r, reduction_dim=5, hidden_dim=6).personalization
            lam = float(r.uniform())
            mixed = mix_personalization(local, glob, lam)
            lhs = weight_divergence(mixed, glob, "absolute").value
            rhs = (1 - lam) * weight_divergence(local, glob, "absolute").value
            worst = max(worst, abs(lhs - rhs))
        detail.append(f"100-point grids monotone; max contraction residual {worst:.1e}")
        assert worst <= 1e-9


# ---------------------------------------------------------------- A6


@pytest.mark.slow
def test_a6_gamma_trend_on_synthetic_non_iid():
    detail = []
    with criterion("A6", detail):
        graph = generate_synthetic_graph(2708, 7, 128, 0.008, 0.0004, seed=0, feature_noise=4.0)
        part = partition_non_iid(graph, PartitionConfig())
        t0 = time.perf_counter()
        _, summary = gamma_divergence_probe(graph, part, FedConfig(rounds=50), [0.25, 0.5, 0.75], seeds=range(4))
        elapsed = time.perf_counter() - t0
        means = [s["mean_wd_relative"] for s in summary]
        detail += [", ".join(f"gamma={s['gamma']}: {m:.4g}" for s, m in zip(summary, means)), f"{elapsed / 60:.1f} min"]
        assert all(a < b for a, b in zip(means, means[1:]))
        assert elapsed <= 600


# ---------------------------------------------------------------- A7, A8, A9


@pytest.fixture(scope="module")
def synthetic_setup():
    graph = generate_synthetic_graph(600, 5, 32, 0.03, 0.002, seed=1, feature_noise=2.0)
    part = partition_non_iid(graph, PartitionConfig(local_test_nodes=40, major_labels_per_client=2))
    return graph, part


def test_a7_fedavg_consensus_every_round(synthetic_setup):
    detail = []
    with criterion("A7", detail):
        graph, part = synthetic_setup
        config = FedConfig(strategy="fedavg", rounds=10, k=2, n=4, reduction_dim=16, hidden_dim=16)
        fed = build_federation(graph, part, config)
        gaps = []
        for r in range(1, config.rounds + 1):
            run_round(fed, r)
            gaps.append(max_pairwise_distance([c.model for c in fed.clients]))
        detail.append(f"max pairwise distance over {len(gaps)} rounds = {max(gaps)!r}")
        assert max(gaps) == 0.0
        run_experiment(graph, part, config, check_consensus=True)


def artifacts(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_a8_determinism_and_thread_equivalence(tmp_path, capsys):
    detail = []
    with criterion("A8", detail):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text("[synthetic]\nnum_nodes = 600\nnum_classes = 5\ndim = 32\nintra_edge_prob = 0.03\n"
                       "inter_edge_prob = 0.002\n[partition]\nlocal_test_nodes = 40\nmajor_labels_per_client = 2\n"
                       "[federation]\nrounds = 3\nk = 2\nn = 4\n[model]\nreduction_dim = 16\nhidden_dim = 16\n")
        commands = {
            "partition": ["partition", "--config", str(cfg)],
            "train-fedego": ["train", "--config", str(cfg), "--seeds", "0,1"],
            "train-fedavg": ["train", "--config", str(cfg), "--strategy", "fedavg", "--seeds", "0"],
            "gamma-probe": ["gamma-probe", "--config", str(cfg), "--gammas", "0.25,0.75", "--seeds", "0",
                            "--rounds", "2"],
            "verify-theorem1": ["verify-theorem1", "--trials", "5"],
            "gradcheck": ["gradcheck"],
        }
        for name, argv in commands.items():
            outputs = []
            for run, threads in (("a", "1"), ("b", "1"), ("c", "4")):
                out = tmp_path / name / run
                extra = ["--out", str(out)]
                if name in ("train-fedego", "train-fedavg", "gamma-probe"):
                    extra += ["--threads", threads]
                elif name in ("verify-theorem1", "gradcheck"):
                    extra = ["--out", str(out / "result.json")]
                assert main(argv + extra) == 0, name
                outputs.append((artifacts(out), capsys.readouterr().out))
            assert outputs[0][0], name
            assert outputs[0] == outputs[1], f"{name}: repeated run differs"
            assert outputs[0] == outputs[2], f"{name}: --threads 4 differs from --threads 1"
        detail.append(f"{len(commands)} commands byte-identical across repeats and --threads 1/4")


def test_a9_communication_accounting(synthetic_setup):
    detail = []
    with criterion("A9", detail):
        graph, part = synthetic_setup
        n = len(part.clients)
        base = FedConfig(rounds=1, local_epochs=2, batches_per_epoch=3)  # default shape and widths
        shape = EgoShape(base.k, base.n)
        per_graph = shape.size * (base.reduction_dim + graph.num_classes) * 4
        assert per_graph == ego_graph_bytes(shape, base.reduction_dim, graph.num_classes)
        ego = run_round(build_federation(graph, part, base), 1).bytes
        assert ego["ego_up"] == n * base.local_epochs * base.batches_per_epoch * per_graph
        local = run_round(build_federation(graph, part, FedConfig(**{**base.to_dict(), "strategy": "local_only"})), 1)
        assert sum(local.bytes.values()) == 0
        fed_avg = build_federation(graph, part, FedConfig(**{**base.to_dict(), "strategy": "fedavg"}))
        avg = run_round(fed_avg, 1).bytes
        model_bytes = param_bytes(fed_avg.clients[0].model)
        assert avg == {"params_up": n * model_bytes, "params_down": n * model_bytes, "ego_up": 0}
        detail.append(f"ego_up={ego['ego_up']} = {n}*{base.local_epochs}*{base.batches_per_epoch}*{per_graph}; "
                      f"local_only=0; fedavg params only ({avg['params_up']} up)")
