import numpy as np
import pytest

from sgcn_lstm.data import generate_synthetic
from sgcn_lstm.graph import EdgeList, build_adjacency, normalize_adjacency


def random_graph(rng: np.random.Generator, nodes: int, p: float = 0.3) -> EdgeList:
    """Erdos-Renyi graph with uniform(0.1, 2) weights; may be disconnected."""
    edges = [
        (i, j, float(rng.uniform(0.1, 2.0)))
        for i in range(nodes) for j in range(i + 1, nodes) if rng.random() < p
    ]
    return EdgeList(nodes, edges)


def random_adjacency(rng, nodes, p=0.3):
    return normalize_adjacency(build_adjacency(random_graph(rng, nodes, p)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_data():
    """The synthetic dataset named by the end-to-end acceptance criterion."""
    return generate_synthetic(nodes=20, timesteps=2000, seed=7, beta=0.2, period=288, noise=1.0)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_line(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(label: str, ok: bool | None, detail: str = "") -> None:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        lines.append(f"{label}: {status}" + (f"  ({detail})" if detail else ""))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
