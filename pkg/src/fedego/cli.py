"""Command-line entry point: ``fedego <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .ego import EgoShape, alignment_order, mash_batch, position_labels, random_alignment, sample_ego_batch
from .federation import ConsensusError, FedConfig, gamma_divergence_probe, run_experiment
from .graph import (
    Graph,
    GraphFormatError,
    Partition,
    PartitionConfig,
    PartitionError,
    convert_linqs,
    generate_synthetic_graph,
    load_graph,
    one_hot,
    partition_non_iid,
)
from .neural import NumericalError, finite_difference_gradcheck, init_model, sage_forward_ego
from .report import ExperimentReport, dumps, export_report, write_divergence_table

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("fedego")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

MODEL_KEYS = {"activation", "reduction_dim", "hidden_dim", "reduction_layers"}
SYNTHETIC_DEFAULTS = {
    "num_nodes": 2708,
    "num_classes": 7,
    "dim": 128,
    "intra_edge_prob": 0.008,
    "inter_edge_prob": 0.0004,
    "seed": 0,
    "feature_noise": 4.0,
}
DATASET_KEYS = {"nodes", "edges", "l1_normalize"}


class ConfigError(ValueError):
    pass


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# ---------------------------------------------------------------- configuration


def _read_config_file(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        if path.suffix == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_keys(section: str, doc: dict, allowed: set[str]) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    """Read a TOML/JSON config and apply ``section.key=value`` overrides.

    Returns the normalized document with every section present and defaults filled in.
    """
    doc = _read_config_file(Path(path)) if path else {}
    base = Path(path).resolve().parent if path else Path.cwd()
    _check_keys("top level", doc, {"dataset", "synthetic", "partition", "federation", "model"})
    doc = {k: dict(v) for k, v in doc.items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        doc.setdefault(section, {})[name] = _parse_value(value)
    _check_keys("top level", doc, {"dataset", "synthetic", "partition", "federation", "model"})

    if "dataset" in doc and "synthetic" in doc:
        raise ConfigError("give either [dataset] or [synthetic], not both")
    out: dict = {}
    if "dataset" in doc:
        ds = doc["dataset"]
        _check_keys("dataset", ds, DATASET_KEYS)
        if "nodes" not in ds or "edges" not in ds:
            raise ConfigError("[dataset] needs both 'nodes' and 'edges'")
        out["dataset"] = {
            "nodes": str((base / ds["nodes"]).resolve()),
            "edges": str((base / ds["edges"]).resolve()),
            "l1_normalize": bool(ds.get("l1_normalize", False)),
        }
    else:
        syn = doc.get("synthetic", {})
        _check_keys("synthetic", syn, set(SYNTHETIC_DEFAULTS))
        out["synthetic"] = {**SYNTHETIC_DEFAULTS, **syn}

    part = doc.get("partition", {})
    _check_keys("partition", part, {f.name for f in fields(PartitionConfig)})
    out["partition"] = asdict(PartitionConfig(**part))

    fed, model = doc.get("federation", {}), doc.get("model", {})
    _check_keys("federation", fed, FedConfig.field_names() - MODEL_KEYS)
    _check_keys("model", model, MODEL_KEYS)
    try:
        out["federation"] = FedConfig(**fed, **model).to_dict()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return out


def build_graph_from_config(cfg: dict) -> Graph:
    if "dataset" in cfg:
        ds = cfg["dataset"]
        return load_graph(ds["nodes"], ds["edges"], l1_normalize=ds["l1_normalize"])
    syn = cfg["synthetic"]
    try:
        return generate_synthetic_graph(**syn)
    except ValueError as exc:
        raise ConfigError(f"[synthetic]: {exc}") from exc


def build_partition(cfg: dict, graph: Graph, partition_path: str | None = None) -> Partition:
    if partition_path:
        try:
            return Partition.load(partition_path, graph)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{partition_path}: invalid partition ({exc})") from exc
    return partition_non_iid(graph, PartitionConfig(**cfg["partition"]))


def _fed_config(cfg: dict, **changes) -> FedConfig:
    try:
        return FedConfig(**{**cfg["federation"], **changes})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("FEDEGO_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"FEDEGO_THREADS must be an integer, got {env!r}") from exc
    return 1


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------- subcommands


def cmd_partition(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["partition"]["seed"] = args.seed
    graph = build_graph_from_config(cfg)
    part = build_partition(cfg, graph)
    out = Path(args.out) / "partition.json"
    _write_text(out, part.to_json())
    log.info("wrote %s", out)
    uniform = np.full(graph.num_classes, 1.0 / graph.num_classes)
    print(f"global_test: {part.global_test.size} nodes")
    for c in part.clients:
        sampled = c.all_nodes
        hist = np.bincount(graph.labels[sampled], minlength=graph.num_classes)
        major_share = np.isin(graph.labels[sampled], c.major_labels).mean()
        emd = float(np.abs(c.distribution - uniform).sum())
        print(f"client {c.client_id}: train={c.train_nodes.size} val={c.val_nodes.size} test={c.test_nodes.size} "
              f"major={list(map(int, c.major_labels))} major_share={major_share:.3f} "
              f"emd_to_uniform={emd:.4f} hist={hist.tolist()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    fed_changes = {}
    if args.strategy:
        fed_changes["strategy"] = "local_only" if args.strategy == "local" else args.strategy
    if args.rounds is not None:
        fed_changes["rounds"] = args.rounds
    if args.gamma is not None:
        fed_changes["gamma"] = args.gamma
    if args.fixed_lambda is not None:
        fed_changes["fixed_lambda"] = args.fixed_lambda
    for flag in ("disable_mixup", "disable_reduction_avg", "disable_personalization_mix"):
        if getattr(args, flag):
            fed_changes[flag] = True
    base = _fed_config(cfg, **fed_changes)
    cfg["federation"] = base.to_dict()
    seeds = _int_list(args.seeds) if args.seeds else [base.seed]
    if not seeds:
        raise ConfigError("--seeds is empty")
    threads = _threads(args)

    graph = build_graph_from_config(cfg)
    part = build_partition(cfg, graph, args.partition)
    out = Path(args.out)
    per_seed = []
    for seed in seeds:
        config = _fed_config(cfg, seed=seed)
        seed_dir = out / f"seed_{seed}"
        lines: list[str] = []
        log.info("train strategy=%s seed=%d rounds=%d threads=%d", config.strategy, seed, config.rounds, threads)
        report = run_experiment(graph, part, config, threads=threads,
                                on_round=lambda r: lines.append(json.dumps(r.to_dict(), sort_keys=True)),
                                check_consensus=args.check_consensus)
        report.config = {**cfg, "federation": config.to_dict()}
        export_report(report, seed_dir)
        _write_text(seed_dir / "rounds.jsonl", "".join(line + "\n" for line in lines))
        per_seed.append({"seed": seed, **report.final, "best_val": report.best_val,
                         "bytes_total": _bytes_total(report)})
    _write_text(out / "summary.json", dumps(_summarize(cfg, per_seed)))
    log.info("wrote %s", out / "summary.json")
    return EXIT_OK


def _bytes_total(report: ExperimentReport) -> dict:
    total = {"params_up": 0, "params_down": 0, "ego_up": 0}
    for rnd in report.rounds:
        for key in total:
            total[key] += rnd.bytes[key]
    return total


def _summarize(cfg: dict, per_seed: list[dict]) -> dict:
    def stats(key):
        vals = [s[key] for s in per_seed if s.get(key) is not None]
        if not vals:
            return None
        return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}

    return {
        "config": cfg,
        "seeds": [s["seed"] for s in per_seed],
        "per_seed": per_seed,
        "global_f1": stats("global_f1"),
        "local_f1": stats("local_f1"),
        "server_global_f1": stats("server_global_f1"),
    }


def _layer_sums(embeddings: np.ndarray, shape: EgoShape) -> np.ndarray:
    return np.stack([embeddings[shape.layer_start(j) : shape.layer_start(j) + shape.layer_size(j)].sum(0)
                     for j in range(shape.k + 1)])


def theorem1_trial(seed: int, shape: EgoShape, activation: str, batch: int = 8, dim: int = 8,
                   num_classes: int = 4, identity_alignment: bool = False) -> dict:
    """Mash one batch under two alignments and compare the center outputs of a GraphSAGE stack."""
    rng = np.random.default_rng(seed)
    graph = generate_synthetic_graph(60, num_classes, 4, 0.2, 0.05, seed=seed)
    table = rng.normal(size=(graph.num_nodes, dim))
    centers = rng.choice(graph.num_nodes, size=batch, replace=True)
    node_at = sample_ego_batch(graph, centers, shape, rng)
    model = init_model(4, num_classes, rng, reduction_dim=dim, hidden_dim=dim, depth=shape.k, activation=activation)

    def mashed(alignments):
        aligned = np.stack([row[alignment_order(shape, perms)] for row, perms in zip(node_at, alignments)])
        return mash_batch(table[aligned], position_labels(graph, aligned), shape)

    def draw():
        if identity_alignment:
            return [[np.arange(shape.layer_size(j)) for j in range(1, shape.k + 1)] for _ in range(batch)]
        return [random_alignment(shape, rng) for _ in range(batch)]

    a, b = mashed(draw()), mashed(draw())
    out_a = sage_forward_ego(model.personalization, a.embeddings, shape)[1]
    out_b = sage_forward_ego(model.personalization, b.embeddings, shape)[1]
    rel = float(np.abs(out_a - out_b).max() / max(np.abs(out_a).max(), 1e-12))
    sum_err = float(np.abs(_layer_sums(a.embeddings, shape) - _layer_sums(b.embeddings, shape)).max())
    return {"seed": seed, "activation": activation, "relative_error": rel, "layer_sum_error": sum_err}


def cmd_verify_theorem1(args) -> int:
    shape = EgoShape(args.k, args.n)
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    linear = [theorem1_trial(args.seed + t, shape, "identity") for t in range(args.trials)]
    control = [theorem1_trial(args.seed + t, shape, "relu") for t in range(args.trials)]
    failures = [t for t in linear if t["relative_error"] > args.tolerance or t["layer_sum_error"] > 1e-9]
    control_violations = [t["seed"] for t in control if t["relative_error"] > args.tolerance]
    result = {
        "trials": args.trials,
        "shape": {"k": shape.k, "n": shape.n},
        "tolerance": args.tolerance,
        "linear_max_relative_error": max(t["relative_error"] for t in linear),
        "linear_max_layer_sum_error": max(t["layer_sum_error"] for t in linear),
        "linear_failures": [t["seed"] for t in failures],
        "relu_control": "expected-fail" if control_violations else "no-violation",
        "relu_violating_seeds": control_violations,
    }
    passed = not failures and bool(control_violations)
    result["passed"] = passed
    if args.out:
        _write_text(Path(args.out), dumps(result))
    print(dumps(result), end="")
    for t in failures:
        log.error("linear stack violated alignment invariance: seed=%d rel=%.3g sums=%.3g",
                  t["seed"], t["relative_error"], t["layer_sum_error"])
    if not control_violations:
        log.error("relu control showed no violation in %d trials", args.trials)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    shape = EgoShape(args.k, args.n)
    rng = np.random.default_rng(args.seed)
    model = init_model(args.dim, args.num_classes, rng, reduction_dim=args.reduction_dim,
                       hidden_dim=args.hidden_dim, depth=shape.k, activation=args.activation)
    graph = generate_synthetic_graph(40, args.num_classes, args.dim, 0.3, 0.05, seed=args.seed)
    centers = rng.choice(graph.num_nodes, size=args.batch, replace=True)
    node_at = sample_ego_batch(graph, centers, shape, rng)
    targets = one_hot(graph.labels[centers], graph.num_classes)
    res = finite_difference_gradcheck(model, graph.features, node_at, targets, shape,
                                      step=args.step, tolerance=args.tolerance)
    if args.out:
        _write_text(Path(args.out), dumps(res))
    print(dumps(res), end="")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def cmd_gamma_probe(args) -> int:
    gammas = _float_list(args.gammas)
    if len(gammas) < 2:
        raise ConfigError("gamma-probe needs at least two gamma values")
    cfg = load_config(args.config, args.set)
    changes = {"strategy": "fedego"}
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    config = _fed_config(cfg, **changes)
    seeds = _int_list(args.seeds)
    graph = build_graph_from_config(cfg)
    part = build_partition(cfg, graph, args.partition)
    rows, summary = gamma_divergence_probe(graph, part, config, gammas, seeds, threads=_threads(args))
    out = Path(args.out)
    write_divergence_table(rows, out / "divergence.csv")
    means = [s["mean_wd_relative"] for s in summary]
    doc = {"config": {**cfg, "federation": config.to_dict()}, "seeds": seeds, "gammas": summary,
           "strictly_increasing": all(a < b for a, b in zip(means, means[1:]))}
    _write_text(out / "gamma_summary.json", dumps(doc))
    for s in summary:
        print(f"gamma={s['gamma']:g} mean_wd_relative={s['mean_wd_relative']:.6g}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Re-aggregate per-seed ``report.json`` files into one summary and a seed-averaged CSV."""
    paths = []
    for item in args.inputs:
        p = Path(item)
        paths.extend(sorted(p.rglob("report.json")) if p.is_dir() else [p])
    if not paths:
        raise ConfigError("no report.json found under the given inputs")
    per_seed, cells = [], {}
    cfg = None
    for path in paths:
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        report = ExperimentReport.from_dict(doc)
        cfg = cfg or report.config
        per_seed.append({"seed": report.seed, "source": str(path), **report.final,
                         "best_val": report.best_val, "bytes_total": _bytes_total(report)})
        for rnd in report.rounds:
            for key in ("global_f1", "local_f1"):
                cells.setdefault((rnd.round, key), []).append(getattr(rnd, key))
    out = Path(args.out)
    _write_text(out / "summary.json", dumps(_summarize(cfg, per_seed)))
    with_rows = ["round,metric,mean,std,count\n"] + [
        f"{r},{k},{np.mean(v)!r},{np.std(v)!r},{len(v)}\n" for (r, k), v in sorted(cells.items())
    ]
    _write_text(out / "rounds_mean.csv", "".join(with_rows))
    print(dumps(_summarize(cfg, per_seed)["global_f1"]), end="")
    return EXIT_OK


def cmd_convert_linqs(args) -> int:
    nodes, edges = convert_linqs(args.content, args.cites, args.out)
    log.info("wrote %s and %s", nodes, edges)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedego", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable, wins over the file)")

    p = sub.add_parser("partition", help="split a dataset into client datasets and a global test set")
    with_config(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run one experiment per seed")
    with_config(p)
    p.add_argument("--strategy", choices=("fedego", "fedavg", "local", "local_only"))
    p.add_argument("--seeds", help="comma-separated seeds (default: federation.seed)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--fixed-lambda", type=float)
    p.add_argument("--disable-mixup", action="store_true")
    p.add_argument("--disable-reduction-avg", action="store_true")
    p.add_argument("--disable-personalization-mix", action="store_true")
    p.add_argument("--partition", help="partition.json to reuse instead of partitioning inline")
    p.add_argument("--check-consensus", action="store_true", help="assert fedavg consensus after every round")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify-theorem1", help="alignment invariance of the linear GraphSAGE stack")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_theorem1)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--reduction-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--activation", choices=("relu", "identity"), default="relu")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gamma-probe", help="weight divergence after training for several gamma values")
    with_config(p)
    p.add_argument("--gammas", default="0.25,0.5,0.75")
    p.add_argument("--seeds", default="0,1,2,3")
    p.add_argument("--rounds", type=int)
    p.add_argument("--partition")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gamma_probe)

    p = sub.add_parser("report", help="re-aggregate report.json files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert-linqs", help="convert LINQS .content/.cites files to nodes.tsv/edges.txt")
    p.add_argument("--content", required=True)
    p.add_argument("--cites", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_linqs)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except NumericalError as exc:
        log.error("numeric blow-up: %s", exc)
        return EXIT_NUMERIC
    except ConsensusError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except (ConfigError, PartitionError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except GraphFormatError as exc:
        log.error("input error: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
