"""Rounding a rank-r solution to SE(d), suboptimality gap and a centralized reference solver."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry
from .errors import DegenerateSolutionError
from .graph import PoseGraph, Trajectory, evaluate_cost, trajectory_cost
from .initialization import chordal_trajectory, project_to_so
from .problem import BlockIndex, BlockProblem, build_data_matrix, objective

_RANK_TOL = 1e-10


def round_solution(Y: np.ndarray, d: int) -> Trajectory:
    """Project a lifted state onto SE(d)^n and fix the gauge so pose 0 is the identity.

    The rotation columns are reduced to their dominant rank-d subspace, the
    reflection that makes most blocks proper rotations is chosen, each block
    is mapped to the nearest rotation and the translations are expressed in
    the same basis.
    """
    n = geometry.num_poses(Y, d)
    R = Y[:, geometry.rotation_columns(n, d)]
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    if s.size < d or s[d - 1] <= _RANK_TOL * max(s[0], np.finfo(float).tiny):
        raise DegenerateSolutionError(f"rotation columns have rank below d={d}; singular values {s[:d]}")
    X = U[:, :d].T @ Y
    blocks = geometry.rotation_blocks(X, d)
    if np.sum(np.linalg.det(blocks) < 0) > n / 2:
        X[-1] *= -1.0
        blocks = geometry.rotation_blocks(X, d)
    rot = project_to_so(blocks)
    trans = geometry.translation_blocks(X, d)
    return Trajectory(rot, trans).gauge_fixed()


@dataclass(frozen=True)
class VerificationReport:
    f_rounded: float
    f_relaxed: float
    gap: float
    tolerance: float
    certified: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def relaxed_cost(graph: PoseGraph, Y: np.ndarray) -> float:
    """Cost of a lifted state, summed edge by edge."""
    return evaluate_cost(graph, geometry.rotation_blocks(Y, graph.d), geometry.translation_blocks(Y, graph.d))


def verify(graph: PoseGraph, Y: np.ndarray, trajectory: Trajectory, tolerance: float | None = None) -> VerificationReport:
    """Compare the rounded cost with the relaxed one; ``certified`` iff the gap is within tolerance."""
    f_relaxed = relaxed_cost(graph, Y)
    f_rounded = trajectory_cost(graph, trajectory)
    tol = 1e-5 * max(1.0, f_relaxed) if tolerance is None else float(tolerance)
    gap = f_rounded - f_relaxed
    return VerificationReport(f_rounded, f_relaxed, gap, tol, bool(gap <= tol))


@dataclass
class OracleResult:
    value: float
    Y: np.ndarray
    values: list
    gradnorm: float


def centralized_oracle(graph: PoseGraph, r: int, restarts: int = 4, seed: int = 0, tol: float = 1e-9,
                       max_steps: int = 1000) -> OracleResult:
    """Minimize the full problem over M(r, d) from the chordal start and ``restarts`` random starts.

    Every start is solved by the same trust-region kernel used for block
    updates, with the whole graph as a single block. Returns the lowest
    value; ties keep the earliest start.
    """
    data = build_data_matrix(graph)
    whole = BlockProblem(data, BlockIndex(0, np.arange(graph.n), graph.d))
    C = np.zeros((r, data.size))
    rng = np.random.default_rng(seed)
    starts = [chordal_trajectory(graph).lifted(r)]
    scale = max(1.0, float(np.abs(chordal_trajectory(graph).translations).max()))
    for _ in range(restarts):
        starts.append(geometry.random_state(graph.n, r, graph.d, rng, scale))
    best = None
    values = []
    for Y0 in starts:
        res = whole.minimize(Y0, C, tol, max_steps)
        val = objective(data, res.Y)
        values.append(val)
        if best is None or val < best.value:
            best = OracleResult(val, res.Y, values, res.gradnorm)
    best.values = values
    return best
