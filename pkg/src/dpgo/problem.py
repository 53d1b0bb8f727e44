"""Quadratic data matrix of the rank-restricted relaxation and per-block subproblems.

Each measurement ``i -> j`` contributes a symmetric ``2(d+1) x 2(d+1)`` clique
on the columns of poses ``i`` and ``j`` such that for any lifted ``X``

    <G, X^T X> = sum_e kappa ||R_j - R_i Rt||^2 + tau ||T_j - T_i - R_i Tt||^2.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import geometry
from .errors import ShapeError, StepError
from .graph import PoseGraph


def _edge_cliques(graph: PoseGraph, edge_ids=None):
    """Local clique matrices ``(m, 2(d+1), 2(d+1))`` and their global column indices."""
    d = graph.d
    ids = np.arange(graph.m) if edge_ids is None else np.asarray(edge_ids, dtype=np.int64)
    m = len(ids)
    k = d + 1
    A = np.zeros((m, 2 * k, d))
    A[:, :d, :] = -graph.rel_rotations[ids]
    A[:, k : k + d, :] = np.eye(d)
    b = np.zeros((m, 2 * k))
    b[:, :d] = -graph.rel_translations[ids]
    b[:, d] = -1.0
    b[:, 2 * k - 1] = 1.0
    kappa = graph.kappa[ids][:, None, None]
    tau = graph.tau[ids][:, None, None]
    local = kappa * np.einsum("mpa,mqa->mpq", A, A) + tau * np.einsum("mp,mq->mpq", b, b)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    src = graph.src[ids]
    dst = graph.dst[ids]
    cols = np.concatenate([src[:, None] * k + np.arange(k), dst[:, None] * k + np.arange(k)], axis=1)
    return local, cols


def _assemble(local, cols, size, remap=None):
    if remap is not None:
        cols = remap[cols]
    rows = np.repeat(cols, cols.shape[1], axis=1).ravel()
    colz = np.tile(cols, (1, cols.shape[1])).ravel()
    G = sp.coo_matrix((local.ravel(), (rows, colz)), shape=(size, size)).tocsr()
    G.sum_duplicates()
    return G


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """Sparse symmetric ``n(d+1) x n(d+1)`` matrix ``G`` with its graph."""

    graph: PoseGraph
    G: sp.csr_matrix

    @property
    def d(self) -> int:
        return self.graph.d

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def size(self) -> int:
        return self.G.shape[0]

    def check_state(self, Y: np.ndarray) -> None:
        if Y.ndim != 2 or Y.shape[1] != self.size:
            raise ShapeError(f"state of shape {Y.shape} does not match data matrix of size {self.size}")


def build_data_matrix(graph: PoseGraph) -> DataMatrix:
    local, cols = _edge_cliques(graph)
    size = graph.n * (graph.d + 1)
    G = _assemble(local, cols, size)
    G = ((G + G.T) * 0.5).tocsr()
    return DataMatrix(graph, G)


def _times_G(G: sp.spmatrix, Y: np.ndarray) -> np.ndarray:
    # Y @ G for symmetric G without densifying G
    return np.asarray(G @ Y.T).T


def objective(data: DataMatrix, Y: np.ndarray) -> float:
    """``f(Y) = <Y G, Y>``; the dense ``Y^T Y`` is never formed."""
    data.check_state(Y)
    return float(np.vdot(_times_G(data.G, Y), Y))


def euclidean_gradient(data: DataMatrix, Y: np.ndarray) -> np.ndarray:
    data.check_state(Y)
    return 2.0 * _times_G(data.G, Y)


def riemannian_gradient(data: DataMatrix, Y: np.ndarray) -> np.ndarray:
    return geometry.riemannian_gradient(Y, euclidean_gradient(data, Y), data.d)


@dataclass(frozen=True)
class BlockIndex:
    """Poses owned by one robot block and their state columns."""

    block: int
    poses: np.ndarray
    d: int

    @cached_property
    def columns(self) -> np.ndarray:
        return geometry.pose_columns(self.poses, self.d)


def block_indices(assignment, num_blocks: int, d: int) -> list[BlockIndex]:
    assignment = np.asarray(assignment)
    return [BlockIndex(b, np.flatnonzero(assignment == b), d) for b in range(num_blocks)]


@dataclass
class InnerResult:
    Y: np.ndarray
    value: float
    gradnorm: float
    steps: int


@dataclass(eq=False)
class BlockProblem:
    """Static data of one block: its slice of ``G`` and the coupling to neighbor poses.

    Local column order is ``[owned poses, replicated neighbor poses]``; every
    kernel only touches those columns, so the cost of one call is proportional
    to the local degree of the block.
    """

    data: DataMatrix
    index: BlockIndex

    def __post_init__(self):
        graph = self.data.graph
        d = self.data.d
        owned = np.asarray(self.index.poses, dtype=np.int64)
        mask = np.zeros(graph.n, dtype=bool)
        mask[owned] = True
        touching = mask[graph.src] | mask[graph.dst]
        nbrs = np.union1d(graph.src[touching], graph.dst[touching])
        self.replicated = np.setdiff1d(nbrs, owned)
        self.own_cols = geometry.pose_columns(owned, d)
        self.rep_cols = geometry.pose_columns(self.replicated, d)
        self.local_cols = np.concatenate([self.own_cols, self.rep_cols])
        G = self.data.G
        self.G_bb = G[self.own_cols][:, self.own_cols].tocsr()
        self.G_nb = G[self.rep_cols][:, self.own_cols].tocsr()
        # edges owned by this block for the additive split f = sum_i f_i
        self.owned_edges = np.flatnonzero(mask[graph.src])
        remap = np.full(self.data.size, -1, dtype=np.int64)
        remap[self.local_cols] = np.arange(len(self.local_cols))
        local, cols = _edge_cliques(graph, self.owned_edges)
        if len(self.owned_edges):
            self.G_owned = _assemble(local, cols, len(self.local_cols), remap)
        else:
            self.G_owned = sp.csr_matrix((len(self.local_cols), len(self.local_cols)))

    @property
    def d(self) -> int:
        return self.data.d

    @property
    def block(self) -> int:
        return self.index.block

    @cached_property
    def _precond(self):
        diag = self.G_bb.diagonal()
        shift = 1e-6 * max(float(np.mean(diag)), 1e-12)
        M = (self.G_bb + shift * sp.identity(self.G_bb.shape[0])).tocsc()
        return splu(M)

    @cached_property
    def _lipschitz(self) -> float:
        return 2.0 * max(float(abs(self.G_bb).sum(axis=1).max()), 1e-12)

    def coupling(self, Y_rep: np.ndarray) -> np.ndarray:
        """Linear term ``Y_rep G_nb`` induced by fixed neighbor columns."""
        if Y_rep.shape[1] != len(self.rep_cols):
            raise ShapeError(f"neighbor slab has {Y_rep.shape[1]} columns, expected {len(self.rep_cols)}")
        if len(self.rep_cols) == 0:
            return np.zeros((Y_rep.shape[0], len(self.own_cols)))
        return np.asarray(self.G_nb.T @ Y_rep.T).T

    def value(self, Yb: np.ndarray, C: np.ndarray) -> float:
        return float(np.vdot(_times_G(self.G_bb, Yb), Yb) + 2.0 * np.vdot(C, Yb))

    def change(self, Yb: np.ndarray, Yn: np.ndarray, eg: np.ndarray) -> float:
        """``value(Yn) - value(Yb)`` computed without cancellation (``eg`` is the gradient at ``Yb``)."""
        D = Yn - Yb
        return float(np.vdot(_times_G(self.G_bb, D), D) + np.vdot(eg, D))

    def egrad(self, Yb: np.ndarray, C: np.ndarray) -> np.ndarray:
        return 2.0 * (_times_G(self.G_bb, Yb) + C)

    def rgrad(self, Yb: np.ndarray, C: np.ndarray) -> np.ndarray:
        return geometry.riemannian_gradient(Yb, self.egrad(Yb, C), self.d)

    def gradient_local(self, Y_local: np.ndarray) -> np.ndarray:
        """Riemannian gradient of the full objective on the owned columns."""
        k = len(self.own_cols)
        Yb, Yr = Y_local[:, :k], Y_local[:, k:]
        return self.rgrad(Yb, self.coupling(Yr))

    def owned_cost(self, Y_local: np.ndarray) -> float:
        """Cost of the edges this block owns (sum over blocks gives ``f``)."""
        return float(np.vdot(_times_G(self.G_owned, Y_local), Y_local))

    def _precondition(self, Y: np.ndarray, vec: np.ndarray) -> np.ndarray:
        return geometry.tangent_project_state(Y, 0.5 * self._precond.solve(vec.T).T, self.d)

    def hess(self, Yb: np.ndarray, eg: np.ndarray, vec: np.ndarray) -> np.ndarray:
        """Riemannian Hessian of the restricted objective applied to a tangent vector."""
        d = self.d
        ehess = 2.0 * _times_G(self.G_bb, vec)
        return geometry.tangent_project_state(Yb, ehess - geometry.hessian_correction(Yb, vec, eg, d), d)

    def minimize(self, Yb0: np.ndarray, C: np.ndarray, tol: float, max_steps: int = 100,
                 precondition: bool = True, method: str = "rtr") -> InnerResult:
        """Monotone inexact minimization of the restricted objective over M_i.

        ``method="rtr"`` runs a Riemannian trust-region iteration with a
        truncated conjugate-gradient model solver; ``method="rgd"`` runs
        Riemannian gradient descent with Armijo backtracking. Both use the
        polar retraction, accept only steps that lower the objective and stop
        when the block gradient norm reaches ``tol`` or after ``max_steps``
        outer iterations. With ``precondition`` the model solver (or the
        descent direction) is preconditioned by ``G_bb``.
        """
        if method == "rtr":
            return self._minimize_rtr(Yb0, C, tol, max_steps, precondition)
        if method == "rgd":
            return self._minimize_rgd(Yb0, C, tol, max_steps, precondition)
        raise ValueError(f"unknown inner solver {method!r}")

    def _minimize_rgd(self, Yb0, C, tol, max_steps, precondition) -> InnerResult:
        d = self.d
        Y = Yb0
        fval = self.value(Y, C)
        gn = np.inf
        step = 0
        for step in range(max_steps + 1):
            eg = self.egrad(Y, C)
            rg = geometry.riemannian_gradient(Y, eg, d)
            gn = float(np.linalg.norm(rg))
            if gn <= tol or step == max_steps:
                break
            D = None
            if precondition:
                D = -self._precondition(Y, eg)
                slope = float(np.vdot(rg, D))
                if not slope < -0.1 * gn * float(np.linalg.norm(D)):
                    D = None
            if D is None:
                D = -rg / self._lipschitz
                slope = -gn * gn / self._lipschitz
            t = 1.0
            while True:
                Yn = geometry.retract(Y, t * D, d)
                delta_f = self.change(Y, Yn, eg)
                fn = fval + delta_f
                if delta_f <= 1e-4 * t * slope:
                    break
                t *= 0.5
                if t < 1e-12:
                    Yn = None
                    break
            if Yn is None:
                break
            if not np.isfinite(fn):
                raise StepError(f"block {self.block}: non-finite objective in inner solve")
            Y, fval = Yn, fn
        return InnerResult(Y, fval, gn, step)

    def _tcg(self, Y, eg, grad, radius, precondition, max_inner):
        """Steihaug-Toint truncated CG on the quadratic model, trust region in the preconditioner norm."""
        prec = (lambda v: self._precondition(Y, v)) if precondition else (lambda v: v)
        eta = np.zeros_like(grad)
        Heta = np.zeros_like(grad)
        r = grad
        z = prec(r)
        z_r = float(np.vdot(z, r))
        d_Pd = z_r
        delta = -z
        e_Pe = 0.0
        e_Pd = 0.0
        r0 = float(np.linalg.norm(r))
        boundary = False
        for _ in range(max_inner):
            Hd = self.hess(Y, eg, delta)
            d_Hd = float(np.vdot(delta, Hd))
            alpha = z_r / d_Hd if d_Hd > 0 else np.inf
            e_Pe_new = e_Pe + 2.0 * alpha * e_Pd + alpha * alpha * d_Pd
            if d_Hd <= 0 or e_Pe_new >= radius * radius:
                tau = (-e_Pd + np.sqrt(max(e_Pd * e_Pd + d_Pd * (radius * radius - e_Pe), 0.0))) / d_Pd
                eta = eta + tau * delta
                Heta = Heta + tau * Hd
                boundary = True
                break
            e_Pe = e_Pe_new
            eta = eta + alpha * delta
            Heta = Heta + alpha * Hd
            r = geometry.tangent_project_state(Y, r + alpha * Hd, self.d)
            rn = float(np.linalg.norm(r))
            if rn <= r0 * min(r0, 0.1):
                break
            z = prec(r)
            z_r_old = z_r
            z_r = float(np.vdot(z, r))
            beta = z_r / z_r_old
            delta = -z + beta * delta
            e_Pd = beta * (e_Pd + alpha * d_Pd)
            d_Pd = z_r + beta * beta * d_Pd
        return eta, Heta, boundary

    def _minimize_rtr(self, Yb0, C, tol, max_steps, precondition) -> InnerResult:
        d = self.d
        Y = Yb0
        fval = self.value(Y, C)
        radius = None
        max_inner = max(10, min(Y.size, 200))
        gn = np.inf
        step = 0
        for step in range(max_steps + 1):
            eg = self.egrad(Y, C)
            rg = geometry.riemannian_gradient(Y, eg, d)
            gn = float(np.linalg.norm(rg))
            if gn <= tol or step == max_steps:
                break
            if radius is None:
                z = self._precondition(Y, rg) if precondition else rg
                radius = np.sqrt(max(float(np.vdot(z, rg)), 1e-300))
                max_radius = 1e4 * radius
            eta, Heta, boundary = self._tcg(Y, eg, rg, radius, precondition, max_inner)
            model_dec = -(float(np.vdot(rg, eta)) + 0.5 * float(np.vdot(eta, Heta)))
            Yn = geometry.retract(Y, eta, d)
            actual = -self.change(Y, Yn, eg)
            if not np.isfinite(actual):
                raise StepError(f"block {self.block}: non-finite objective in inner solve")
            fn = fval - actual
            rho = actual / model_dec if model_dec > 0 else -np.inf
            if rho < 0.25:
                radius *= 0.25
            elif rho > 0.75 and boundary:
                radius = min(2.0 * radius, max_radius)
            if rho > 0.1 and actual > 0:
                Y, fval = Yn, fn
            elif radius < 1e-14 * max_radius:
                break
        return InnerResult(Y, fval, gn, step)


class BlockSubproblem:
    """A block problem bound to a snapshot of the neighbor columns."""

    def __init__(self, problem: BlockProblem, Y_rep: np.ndarray):
        self.problem = problem
        self.C = problem.coupling(Y_rep)

    def objective(self, Yb):
        return self.problem.value(Yb, self.C)

    def gradient(self, Yb):
        return self.problem.egrad(Yb, self.C)

    def riemannian_gradient(self, Yb):
        return self.problem.rgrad(Yb, self.C)

    def minimize(self, Yb0, tol, max_steps=100, precondition=True, method="rtr"):
        return self.problem.minimize(Yb0, self.C, tol, max_steps, precondition, method)


def build_block_problems(data: DataMatrix, assignment, num_blocks: int) -> list[BlockProblem]:
    assignment = np.asarray(assignment)
    return [BlockProblem(data, idx) for idx in block_indices(assignment, num_blocks, data.d)]


def block_subproblem(data: DataMatrix, Y: np.ndarray, block: BlockProblem) -> BlockSubproblem:
    """Restricted objective of ``block`` with all other columns frozen at ``Y``."""
    data.check_state(Y)
    return BlockSubproblem(block, Y[:, block.rep_cols])
