import numpy as np
import pytest
from hypothesis import settings

from fedego.federation import FedConfig
from fedego.graph import PartitionConfig, build_graph, generate_synthetic_graph, partition_non_iid

settings.register_profile("fedego", max_examples=60, deadline=None)
settings.load_profile("fedego")


@pytest.fixture
def tiny_graph():
    # labels {0,0,1}, single edge 0-1, node 2 isolated
    return build_graph(np.eye(3), np.array([0, 0, 1]), np.array([[0, 1]]))


@pytest.fixture(scope="session")
def small_graph():
    return generate_synthetic_graph(300, 4, 16, 0.06, 0.005, seed=3, feature_noise=1.5)


@pytest.fixture(scope="session")
def small_partition(small_graph):
    return partition_non_iid(small_graph, PartitionConfig(num_clients=3, local_test_nodes=20,
                                                          major_labels_per_client=2, seed=1))


@pytest.fixture
def fast_config():
    return FedConfig(rounds=2, local_epochs=2, server_epochs=2, batches_per_epoch=2, batch_size=8,
                     k=2, n=3, reduction_dim=8, hidden_dim=8)


# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if passed else 'FAIL'} - {detail}")
