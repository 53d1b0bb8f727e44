import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dpgo.graph import Edge, Measurement, PoseGraph, PoseId, Trajectory


def random_rotation(d, rng):
    if d == 2:
        th = rng.uniform(-np.pi, np.pi)
        return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()


def random_graph(rng, n, d, extra=None, weights=(0.5, 20.0)):
    """Connected graph: a chain plus ``extra`` random chords, random measurements and weights."""
    pairs = {(i, i + 1) for i in range(n - 1)}
    extra = n if extra is None else extra
    for _ in range(extra):
        a, b = rng.choice(n, size=2, replace=False)
        if (a, b) not in pairs and (b, a) not in pairs:
            pairs.add((int(a), int(b)))
    return graph_from_pairs(rng, n, d, sorted(pairs), weights)


def graph_from_pairs(rng, n, d, pairs, weights=(0.5, 20.0)):
    """Graph on the given ordered pairs with random measurements and weights."""
    nodes = tuple(PoseId(0, i) for i in range(n))
    edges = []
    for a, b in pairs:
        meas = Measurement(random_rotation(d, rng), rng.normal(size=d), rng.uniform(*weights), rng.uniform(*weights))
        edges.append(Edge(nodes[a], nodes[b], meas))
    return PoseGraph(d, nodes, tuple(edges))


def random_trajectory(rng, n, d):
    return Trajectory(np.array([random_rotation(d, rng) for _ in range(n)]), rng.normal(size=(n, d)) * 3)


def chain_graph_from(truth, pairs, kappa=1.0, tau=1.0):
    """Noiseless graph consistent with ``truth`` on the given ordered pairs."""
    nodes = tuple(PoseId(0, i) for i in range(len(truth)))
    edges = []
    for a, b in pairs:
        Ra, Rb = truth.rotations[a], truth.rotations[b]
        R = Ra.T @ Rb
        U, _, Vt = np.linalg.svd(R)
        meas = Measurement(U @ Vt, Ra.T @ (truth.translations[b] - truth.translations[a]), kappa, tau)
        edges.append(Edge(nodes[a], nodes[b], meas))
    return PoseGraph(truth.d, nodes, tuple(edges))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
