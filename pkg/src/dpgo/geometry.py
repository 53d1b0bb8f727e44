"""Manifold kernels for St(r, d), R^d and the product manifold M(r, d).

A lifted state is stored as one dense ``r x n(d+1)`` matrix laid out as
``[Y_1 T_1 Y_2 T_2 ... Y_n T_n]`` where each ``Y_i`` is an ``r x d`` Stiefel
block and ``T_i`` an ``r``-vector. All functions here are pure.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, SingularProjectionError

# smallest admissible singular value (relative) for the polar projection
_RANK_TOL = 1e-12


def num_poses(Y: np.ndarray, d: int) -> int:
    if Y.ndim != 2 or Y.shape[1] % (d + 1) != 0:
        raise ShapeError(f"state of shape {Y.shape} does not hold (d+1)={d + 1} column blocks")
    return Y.shape[1] // (d + 1)


def rotation_blocks(Y: np.ndarray, d: int) -> np.ndarray:
    """Return the rotation blocks of ``Y`` stacked as an ``(n, r, d)`` array (a copy)."""
    n = num_poses(Y, d)
    r = Y.shape[0]
    return Y.reshape(r, n, d + 1)[:, :, :d].transpose(1, 0, 2).copy()


def translation_blocks(Y: np.ndarray, d: int) -> np.ndarray:
    """Return the translation columns of ``Y`` as an ``(n, r)`` array (a copy)."""
    n = num_poses(Y, d)
    return Y.reshape(Y.shape[0], n, d + 1)[:, :, d].T.copy()


def assemble(rotations: np.ndarray, translations: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_blocks` / :func:`translation_blocks`."""
    n, r, d = rotations.shape
    if translations.shape != (n, r):
        raise ShapeError(f"translations {translations.shape} do not match rotations {rotations.shape}")
    out = np.empty((r, n, d + 1))
    out[:, :, :d] = rotations.transpose(1, 0, 2)
    out[:, :, d] = translations.T
    return out.reshape(r, n * (d + 1))


def rotation_columns(n: int, d: int) -> np.ndarray:
    """Column indices of all rotation entries in an ``n``-pose state."""
    cols = np.arange(n * (d + 1)).reshape(n, d + 1)
    return cols[:, :d].ravel()


def pose_columns(poses, d: int) -> np.ndarray:
    """Column indices (in pose order) covering the given pose indices."""
    poses = np.asarray(poses, dtype=np.int64)
    return (poses[:, None] * (d + 1) + np.arange(d + 1)[None, :]).ravel()


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def project_tangent(base: np.ndarray, ambient: np.ndarray) -> np.ndarray:
    """Orthogonal projection of ``ambient`` onto the tangent space of St(r, d) at ``base``.

    Works on single ``r x d`` blocks or on stacks ``(..., r, d)``:
    ``U - X sym(X^T U)``.
    """
    base = np.asarray(base, dtype=float)
    ambient = np.asarray(ambient, dtype=float)
    if base.shape != ambient.shape or base.ndim < 2:
        raise ShapeError(f"base {base.shape} and ambient {ambient.shape} must have equal matrix shape")
    if base.shape[-2] < base.shape[-1]:
        raise ShapeError(f"Stiefel block must satisfy r >= d, got {base.shape[-2:]}")
    return ambient - base @ _sym(np.swapaxes(base, -1, -2) @ ambient)


def project_manifold(ambient: np.ndarray) -> np.ndarray:
    """Nearest Stiefel point in Frobenius norm (the polar factor ``U V^T``).

    Accepts a single ``r x d`` block or a stack ``(k, r, d)``. Raises
    :class:`SingularProjectionError` on a rank-deficient block instead of
    silently perturbing it.
    """
    A = np.asarray(ambient, dtype=float)
    if A.ndim < 2 or A.shape[-2] < A.shape[-1]:
        raise ShapeError(f"cannot project shape {A.shape} onto St(r, d) with r >= d")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    scale = np.maximum(s[..., :1], np.finfo(float).tiny)
    bad = (s[..., -1] <= _RANK_TOL * scale[..., 0]) | ~np.isfinite(s).all(axis=-1)
    if np.any(bad):
        if A.ndim == 2:
            raise SingularProjectionError("rank-deficient block cannot be projected onto St(r, d)")
        idx = int(np.flatnonzero(np.atleast_1d(bad).ravel())[0])
        raise SingularProjectionError(f"rank-deficient rotation block {idx}", block=idx)
    return U @ Vt


def project_state(ambient: np.ndarray, d: int) -> np.ndarray:
    """Project every rotation block of a lifted matrix onto St(r, d); translations pass through."""
    n = num_poses(ambient, d)
    r = ambient.shape[0]
    if r < d:
        raise ShapeError(f"relaxation rank r={r} must be at least d={d}")
    out = np.array(ambient, dtype=float, copy=True)
    view = out.reshape(r, n, d + 1)
    R = view[:, :, :d].transpose(1, 0, 2)
    view[:, :, :d] = project_manifold(R).transpose(1, 0, 2)
    return out


def tangent_project_state(base: np.ndarray, ambient: np.ndarray, d: int) -> np.ndarray:
    """Blockwise tangent projection on M(r, d)."""
    if base.shape != ambient.shape:
        raise ShapeError(f"state {base.shape} and vector {ambient.shape} differ in shape")
    n = num_poses(base, d)
    r = base.shape[0]
    out = np.array(ambient, dtype=float, copy=True)
    view = out.reshape(r, n, d + 1)
    X = base.reshape(r, n, d + 1)[:, :, :d].transpose(1, 0, 2)
    U = view[:, :, :d].transpose(1, 0, 2)
    view[:, :, :d] = project_tangent(X, U).transpose(1, 0, 2)
    return out


def riemannian_gradient(base: np.ndarray, euclidean_grad: np.ndarray, d: int) -> np.ndarray:
    """Riemannian gradient on the embedded submanifold M(r, d).

    The metric is the Frobenius inner product inherited from the ambient
    space, so this is the tangent projection of the Euclidean gradient.
    """
    return tangent_project_state(base, euclidean_grad, d)


def hessian_correction(base: np.ndarray, vec: np.ndarray, euclidean_grad: np.ndarray, d: int) -> np.ndarray:
    """Curvature term ``xi_i sym(X_i^T egrad_i)`` on rotation blocks (zero on translations).

    The Riemannian Hessian on M(r, d) is
    ``Proj_X(ehess[xi] - hessian_correction(X, xi, egrad))``.
    """
    n = num_poses(base, d)
    r = base.shape[0]
    out = np.zeros_like(vec, dtype=float)
    X = base.reshape(r, n, d + 1)[:, :, :d].transpose(1, 0, 2)
    E = euclidean_grad.reshape(r, n, d + 1)[:, :, :d].transpose(1, 0, 2)
    V = vec.reshape(r, n, d + 1)[:, :, :d].transpose(1, 0, 2)
    out.reshape(r, n, d + 1)[:, :, :d] = (V @ _sym(np.swapaxes(X, 1, 2) @ E)).transpose(1, 0, 2)
    return out


def retract(base: np.ndarray, tangent: np.ndarray, d: int) -> np.ndarray:
    """Polar retraction on rotation blocks, addition on translations."""
    if base.shape != tangent.shape:
        raise ShapeError(f"state {base.shape} and vector {tangent.shape} differ in shape")
    return project_state(base + tangent, d)


def inner(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.vdot(A, B))


def stiefel_error(Y: np.ndarray, d: int) -> float:
    """Largest ``||Y_i^T Y_i - I||_F`` over rotation blocks."""
    R = rotation_blocks(Y, d)
    gram = np.swapaxes(R, 1, 2) @ R
    return float(np.max(np.linalg.norm(gram - np.eye(d), axis=(1, 2)))) if len(R) else 0.0


def tangent_error(base: np.ndarray, vec: np.ndarray, d: int) -> float:
    """Largest ``||X^T U + U^T X||_F`` over rotation blocks."""
    X = rotation_blocks(base, d)
    U = rotation_blocks(vec, d)
    S = np.swapaxes(X, 1, 2) @ U
    return float(np.max(np.linalg.norm(S + np.swapaxes(S, 1, 2), axis=(1, 2)))) if len(X) else 0.0


def lifted_identity(n: int, r: int, d: int) -> np.ndarray:
    """All rotations ``[I_d; 0]``, all translations zero."""
    R = np.zeros((n, r, d))
    R[:, :d, :d] = np.eye(d)
    return assemble(R, np.zeros((n, r)))


def random_state(n: int, r: int, d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    R = project_manifold(rng.standard_normal((n, r, d)))
    return assemble(R, scale * rng.standard_normal((n, r)))


def random_tangent(base: np.ndarray, d: int, rng: np.random.Generator) -> np.ndarray:
    return tangent_project_state(base, rng.standard_normal(base.shape), d)
