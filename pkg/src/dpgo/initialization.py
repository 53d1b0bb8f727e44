"""Initial estimates for the lifted state."""

from __future__ import annotations

from collections import deque

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import geometry
from .graph import PoseGraph, Trajectory

INIT_METHODS = ("identity", "odometry", "chordal")


def project_to_so(M: np.ndarray) -> np.ndarray:
    """Nearest rotation (det = +1) for a single matrix or a stack."""
    U, _, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    D = np.ones(U.shape[:-1])
    D[..., -1] = np.sign(det) + (det == 0)
    return (U * D[..., None, :]) @ Vt


def odometry_trajectory(graph: PoseGraph) -> Trajectory:
    """Compose measurements along a BFS spanning tree rooted at pose 0."""
    d, n = graph.d, graph.n
    R = np.zeros((n, d, d))
    t = np.zeros((n, d))
    done = np.zeros(n, dtype=bool)
    out_edges = [[] for _ in range(n)]
    for k, (a, b) in enumerate(zip(graph.src.tolist(), graph.dst.tolist())):
        out_edges[a].append((k, b, True))
        out_edges[b].append((k, a, False))
    R[0] = np.eye(d)
    done[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for k, v, forward in out_edges[u]:
            if done[v]:
                continue
            Rt, tt = graph.rel_rotations[k], graph.rel_translations[k]
            if forward:
                R[v] = R[u] @ Rt
                t[v] = t[u] + R[u] @ tt
            else:
                R[v] = R[u] @ Rt.T
                t[v] = t[u] - R[v] @ tt
            done[v] = True
            queue.append(v)
    return Trajectory(project_to_so(R), t)


def _rotation_laplacian(graph: PoseGraph) -> sp.csr_matrix:
    d = graph.d
    m = graph.m
    blocks = np.zeros((m, 2 * d, d))
    blocks[:, :d] = -graph.rel_rotations
    blocks[:, d:] = np.eye(d)
    local = graph.kappa[:, None, None] * np.einsum("mpa,mqa->mpq", blocks, blocks)
    cols = np.concatenate([graph.src[:, None] * d + np.arange(d), graph.dst[:, None] * d + np.arange(d)], axis=1)
    rows = np.repeat(cols, 2 * d, axis=1).ravel()
    colz = np.tile(cols, (1, 2 * d)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, colz)), shape=(graph.n * d, graph.n * d)).tocsr()


def chordal_trajectory(graph: PoseGraph) -> Trajectory:
    """Chordal rotation estimate followed by the optimal translations.

    Rotations solve the unconstrained least-squares problem with pose 0 fixed
    to the identity and are then projected onto SO(d); translations are the
    exact minimizers of the cost for those rotations with pose 0 at the origin.
    """
    d, n = graph.d, graph.n
    if n == 1:
        return Trajectory(np.eye(d)[None], np.zeros((1, d)))
    L = _rotation_laplacian(graph)
    free = np.arange(d, n * d)
    L_ff = L[free][:, free].tocsc()
    L_fa = L[free][:, :d]
    # rows of R^T stacked: minimize tr(R L R^T) with R_0 = I
    rhs = -(L_fa @ np.eye(d))
    sol = spsolve(L_ff, rhs)
    sol = np.asarray(sol).reshape(n - 1, d, d)
    Rs = np.concatenate([np.eye(d)[None], sol.transpose(0, 2, 1)], axis=0)
    Rs = project_to_so(Rs)
    t = optimal_translations(graph, Rs)
    return Trajectory(Rs, t)


def optimal_translations(graph: PoseGraph, rotations: np.ndarray) -> np.ndarray:
    """Least-squares translations for fixed rotations, pose 0 pinned at the origin."""
    d, n = graph.d, graph.n
    # sum_e tau ||t_j - t_i - R_i tt||^2 : Laplacian system per coordinate
    w = graph.tau
    src, dst = graph.src, graph.dst
    Lap = sp.coo_matrix(
        (np.concatenate([w, w, -w, -w]), (np.concatenate([src, dst, src, dst]), np.concatenate([src, dst, dst, src]))),
        shape=(n, n),
    ).tocsr()
    offs = np.einsum("mab,mb->ma", rotations[src], graph.rel_translations)
    b = np.zeros((n, d))
    np.add.at(b, dst, w[:, None] * offs)
    np.add.at(b, src, -w[:, None] * offs)
    t = np.zeros((n, d))
    if n > 1:
        sol = spsolve(Lap[1:, 1:].tocsc(), b[1:])
        t[1:] = np.asarray(sol).reshape(n - 1, d)
    return t


def initial_state(graph: PoseGraph, r: int, method: str = "identity") -> np.ndarray:
    """Lifted ``r x n(d+1)`` starting point on M(r, d)."""
    if method == "identity":
        return geometry.lifted_identity(graph.n, r, graph.d)
    if method == "odometry":
        return odometry_trajectory(graph).lifted(r)
    if method == "chordal":
        return chordal_trajectory(graph).lifted(r)
    raise ValueError(f"unknown initialization {method!r}; expected one of {INIT_METHODS}")
