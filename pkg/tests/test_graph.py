import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from fedego.graph import (
    GraphFormatError,
    Partition,
    PartitionConfig,
    PartitionError,
    build_graph,
    convert_linqs,
    distribution_vector,
    generate_synthetic_graph,
    load_graph,
    one_hot,
    partition_non_iid,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_node_file(tmp_path):
    nodes = write(tmp_path, "nodes.tsv", "0\t0\t1 0\n1\t0\t0 1\n2\t1\t1 1\n")
    edges = write(tmp_path, "edges.txt", "# comment\n0 1\n")
    g = load_graph(nodes, edges)
    assert (g.num_nodes, g.num_classes, g.feature_dim) == (3, 2, 2)
    assert g.neighbors(0).tolist() == [1]
    assert g.neighbors(1).tolist() == [0]
    assert g.neighbors(2).tolist() == []


def test_reverse_duplicate_edge_collapses(tmp_path):
    nodes = write(tmp_path, "nodes.tsv", "0\t0\t1\n1\t1\t2\n")
    edges = write(tmp_path, "edges.txt", "0 1\n1 0\n0 1\n")
    g = load_graph(nodes, edges)
    assert g.neighbors(0).tolist() == [1]
    assert g.num_edges == 1


def test_ids_remapped_in_file_order(tmp_path):
    nodes = write(tmp_path, "nodes.tsv", "40\t1\t0.5\n7\t0\t1.5\n")
    edges = write(tmp_path, "edges.txt", "7 40\n")
    g = load_graph(nodes, edges)
    assert g.labels.tolist() == [1, 0]
    assert g.features[:, 0].tolist() == [0.5, 1.5]
    assert g.neighbors(0).tolist() == [1]


def test_l1_normalize(tmp_path):
    nodes = write(tmp_path, "nodes.tsv", "0\t0\t1 3\n1\t0\t0 0\n")
    edges = write(tmp_path, "edges.txt", "")
    g = load_graph(nodes, edges, l1_normalize=True)
    np.testing.assert_allclose(g.features, [[0.25, 0.75], [0.0, 0.0]])


@pytest.mark.parametrize(
    "nodes, edges, fragment",
    [
        ("0\t0\t1\n1\t0\n", "", "nodes.tsv:2"),
        ("0\t0\t1 2\n1\t0\t1\n", "", "feature dimension"),
        ("0\t0\t1\n0\t1\t1\n", "", "duplicate node id"),
        ("0\tx\t1\n", "", "nodes.tsv:1"),
        ("0\t0\t1\n", "0 9\n", "unknown node id 9"),
        ("0\t0\t1\n", "0\n", "edges.txt:1"),
    ],
)
def test_malformed_inputs_name_the_line(tmp_path, nodes, edges, fragment):
    n, e = write(tmp_path, "nodes.tsv", nodes), write(tmp_path, "edges.txt", edges)
    with pytest.raises(GraphFormatError, match=fragment):
        load_graph(n, e)


def test_convert_linqs_round_trip(tmp_path):
    content = write(tmp_path, "x.content", "p9 1 0 1 Theory\np3 0 1 0 AI\np5 1 1 0 Theory\n")
    cites = write(tmp_path, "x.cites", "p9 p3\np3 p5\np5 missing\n")
    nodes, edges = convert_linqs(content, cites, tmp_path / "out")
    g = load_graph(nodes, edges)
    assert g.labels.tolist() == [0, 1, 0]
    assert g.num_edges == 2
    assert g.features[0].tolist() == [1.0, 0.0, 1.0]


def test_self_loops_tolerated():
    g = build_graph(np.zeros((2, 1)), np.array([0, 1]), np.array([[0, 0], [0, 1], [0, 0]]))
    assert g.neighbors(0).tolist() == [0, 1]
    assert g.num_edges == 2


def test_synthetic_degenerate_probabilities():
    g = generate_synthetic_graph(10, 2, 3, 1.0, 0.0, seed=0)
    for u in range(10):
        same = [v for v in range(10) if v != u and v % 2 == u % 2]
        assert g.neighbors(u).tolist() == same
    empty = generate_synthetic_graph(10, 2, 3, 0.0, 0.0, seed=0)
    assert empty.num_edges == 0


def test_synthetic_determinism():
    a = generate_synthetic_graph(200, 4, 5, 0.1, 0.01, seed=7)
    b = generate_synthetic_graph(200, 4, 5, 0.1, 0.01, seed=7)
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
    assert np.array_equal(a.features, b.features)


@pytest.mark.parametrize("args", [(3, 4, 2, 0.5, 0.1), (10, 2, 2, 0.1, 0.5), (10, 2, 2, 1.5, 0.1)])
def test_synthetic_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        generate_synthetic_graph(*args, seed=0)


def test_distribution_vector_examples():
    np.testing.assert_allclose(distribution_vector(one_hot(np.array([0, 0, 1]), 2)), [2 / 3, 1 / 3])
    np.testing.assert_allclose(distribution_vector([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5])
    with pytest.raises(ValueError):
        distribution_vector(np.zeros((0, 3)))


@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_distribution_vector_properties(labels, rnd):
    rows = one_hot(np.array(labels), 6)
    p = distribution_vector(rows)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
    perm = list(range(len(labels)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(distribution_vector(rows[perm]), p, atol=1e-15)


def test_mashed_center_distribution_equals_members():
    labels = np.array([0, 1, 1, 2, 2, 2])
    members = one_hot(labels, 3)
    mashed = members.mean(axis=0, keepdims=True)
    np.testing.assert_allclose(distribution_vector(mashed), distribution_vector(members))


def cora_sized_graph():
    return generate_synthetic_graph(2708, 7, 4, 0.002, 0.0002, seed=0)


def test_cora_sized_partition_counts():
    g = cora_sized_graph()
    part = partition_non_iid(g, PartitionConfig())
    assert part.global_test.size == 812 == math.floor(0.3 * 2708)
    quota = math.floor(0.3 * (2708 - 812))
    for c in part.clients:
        assert c.all_nodes.size == quota == 568
        assert c.test_nodes.size == 300
        assert c.val_nodes.size == math.floor(0.2 * 268)
        assert c.train_nodes.size == 268 - c.val_nodes.size


def test_partition_disjointness_and_major_share():
    g = cora_sized_graph()
    part = partition_non_iid(g, PartitionConfig(seed=4))
    gt = set(part.global_test.tolist())
    for c in part.clients:
        tr, va, te = set(c.train_nodes.tolist()), set(c.val_nodes.tolist()), set(c.test_nodes.tolist())
        assert not (tr & va or tr & te or va & te)
        assert not (gt & (tr | va | te))
        # counted against the 80/20 rule: the uniform remainder can only add major-label nodes
        share = np.isin(g.labels[c.all_nodes], c.major_labels).mean()
        assert share >= 0.8 - 1e-9
        assert len(c.major_labels) == 3


def test_partition_is_deterministic():
    g = cora_sized_graph()
    a = partition_non_iid(g, PartitionConfig(seed=9)).to_json()
    b = partition_non_iid(g, PartitionConfig(seed=9)).to_json()
    assert a == b
    assert a != partition_non_iid(g, PartitionConfig(seed=10)).to_json()


def test_uniform_partition_matches_global_histogram():
    g = cora_sized_graph()
    part = partition_non_iid(g, PartitionConfig(major_node_rate=0.0, seed=2))
    global_hist = np.bincount(g.labels, minlength=7) / g.num_nodes
    for c in part.clients:
        obs = np.bincount(g.labels[c.all_nodes], minlength=7)
        # sanity bound: a uniform draw should not be rejected at the 0.1% level
        assert chisquare(obs, global_hist * obs.sum()).pvalue > 1e-3


def test_partition_json_round_trip(tmp_path):
    g = cora_sized_graph()
    part = partition_non_iid(g, PartitionConfig(seed=3))
    path = tmp_path / "p.json"
    part.save(path)
    again = Partition.load(path, g)
    assert again.to_json() == part.to_json()
    for a, b in zip(part.clients, again.clients):
        np.testing.assert_array_equal(a.distribution, b.distribution)
    assert json.loads(path.read_text())["seed"] == 3


def test_partition_infeasible_quota():
    g = generate_synthetic_graph(100, 4, 2, 0.1, 0.0, seed=0)
    with pytest.raises(PartitionError, match="client 0"):
        partition_non_iid(g, PartitionConfig(local_test_nodes=300))


def test_short_major_pool_fills_from_uniform(caplog):
    # two classes of 50 nodes; a single major label cannot supply 0.9 * quota
    g = generate_synthetic_graph(100, 2, 2, 0.1, 0.0, seed=0)
    cfg = PartitionConfig(num_clients=1, alpha_global=0.1, alpha_local=1.0, major_labels_per_client=1,
                          major_node_rate=0.9, local_test_nodes=10)
    part = partition_non_iid(g, cfg)
    assert part.clients[0].all_nodes.size == 90
    assert "filling from uniform pool" in caplog.text


def test_partition_config_validation():
    g = cora_sized_graph()
    with pytest.raises(ValueError):
        partition_non_iid(g, PartitionConfig(major_labels_per_client=8))
    with pytest.raises(ValueError):
        partition_non_iid(g, PartitionConfig(alpha_global=1.0))
