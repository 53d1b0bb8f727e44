"""Pose-graph data model, g2o reading/writing and synthetic datasets."""

from __future__ import annotations

import io
import itertools
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, TextIO

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from .errors import ConnectivityError, G2OFormatError, G2OParseError, ParameterError, ShapeError

# g2o integer ids encode (robot, keyframe) as robot * ROBOT_STRIDE + keyframe
ROBOT_STRIDE = 1_000_000
SO_TOL = 1e-8


class PoseId(NamedTuple):
    robot: int
    keyframe: int

    def to_g2o(self) -> int:
        return self.robot * ROBOT_STRIDE + self.keyframe

    @classmethod
    def from_g2o(cls, key: int) -> "PoseId":
        return cls(key // ROBOT_STRIDE, key % ROBOT_STRIDE)


@dataclass(frozen=True, eq=False)
class Measurement:
    """Relative pose measurement with isotropic rotation/translation weights."""

    rotation: np.ndarray
    translation: np.ndarray
    kappa: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).ravel()
        d = R.shape[0]
        if R.shape != (d, d) or t.shape != (d,):
            raise ShapeError(f"measurement rotation {R.shape} / translation {t.shape} mismatch")
        if np.linalg.norm(R.T @ R - np.eye(d)) > SO_TOL or np.linalg.det(R) < 0:
            raise ValueError("measurement rotation is not in SO(d)")
        if not (self.kappa > 0 and self.tau > 0):
            raise ValueError(f"weights must be positive, got kappa={self.kappa}, tau={self.tau}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "tau", float(self.tau))

    def isclose(self, other: "Measurement", tol: float = 1e-12) -> bool:
        return (
            np.allclose(self.rotation, other.rotation, rtol=0, atol=tol)
            and np.allclose(self.translation, other.translation, rtol=tol, atol=tol)
            and np.isclose(self.kappa, other.kappa, rtol=tol, atol=0)
            and np.isclose(self.tau, other.tau, rtol=tol, atol=0)
        )


class Edge(NamedTuple):
    src: PoseId
    dst: PoseId
    meas: Measurement


@dataclass(frozen=True)
class Trajectory:
    """SE(d) poses as stacked ``(n, d, d)`` rotations and ``(n, d)`` translations."""

    rotations: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotations, dtype=float)
        t = np.asarray(self.translations, dtype=float)
        if R.ndim != 3 or R.shape[1] != R.shape[2] or t.shape != R.shape[:2]:
            raise ShapeError(f"trajectory rotations {R.shape} / translations {t.shape} mismatch")
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "translations", t)

    def __len__(self):
        return self.rotations.shape[0]

    @property
    def d(self) -> int:
        return self.rotations.shape[1]

    def transformed(self, Q: np.ndarray, t: np.ndarray) -> "Trajectory":
        """Apply the global action ``x -> (Q R, Q T + t)``."""
        return Trajectory(Q @ self.rotations, self.translations @ Q.T + t)

    def gauge_fixed(self) -> "Trajectory":
        """Left-multiply so that pose 0 becomes the identity."""
        R0, t0 = self.rotations[0], self.translations[0]
        return self.transformed(R0.T, -R0.T @ t0)

    def lifted(self, r: int | None = None) -> np.ndarray:
        """Embed as an ``r x n(d+1)`` state with rotations ``[R; 0]``."""
        n, d = len(self), self.d
        r = d if r is None else r
        if r < d:
            raise ShapeError(f"rank r={r} below dimension d={d}")
        out = np.zeros((r, n, d + 1))
        out[:d, :, :d] = self.rotations.transpose(1, 0, 2)
        out[:d, :, d] = self.translations.T
        return out.reshape(r, n * (d + 1))

    def isclose(self, other: "Trajectory", tol: float = 1e-9) -> bool:
        return (
            self.rotations.shape == other.rotations.shape
            and np.allclose(self.rotations, other.rotations, atol=tol, rtol=0)
            and np.allclose(self.translations, other.translations, atol=tol, rtol=tol)
        )


@dataclass(frozen=True)
class PoseGraph:
    """Directed pose graph; immutable after construction."""

    d: int
    nodes: tuple
    edges: tuple = field(default=())

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ShapeError(f"dimension must be 2 or 3, got {self.d}")
        nodes = tuple(PoseId(*p) for p in self.nodes)
        edges = tuple(Edge(PoseId(*e[0]), PoseId(*e[1]), e[2]) for e in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        if len(set(nodes)) != len(nodes):
            raise ValueError("duplicate pose ids")
        index = self.index
        seen = set()
        for k, (a, b, m) in enumerate(edges):
            if a not in index or b not in index:
                raise ValueError(f"edge {k} references unknown pose {a if a not in index else b}")
            if a == b:
                raise ValueError(f"edge {k} is a self-loop on {a}")
            if (a, b) in seen:
                raise ValueError(f"duplicate measurement {a} -> {b}")
            seen.add((a, b))
            if m.rotation.shape != (self.d, self.d):
                raise ShapeError(f"edge {k} has a {m.rotation.shape} rotation in a d={self.d} graph")
        if not self._weakly_connected():
            raise ConnectivityError("pose graph is not weakly connected")

    @cached_property
    def index(self) -> dict:
        """Dense global index of each pose id (node order)."""
        return {p: i for i, p in enumerate(self.nodes)}

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def src(self) -> np.ndarray:
        return np.array([self.index[e.src] for e in self.edges], dtype=np.int64)

    @cached_property
    def dst(self) -> np.ndarray:
        return np.array([self.index[e.dst] for e in self.edges], dtype=np.int64)

    @cached_property
    def rel_rotations(self) -> np.ndarray:
        return np.array([e.meas.rotation for e in self.edges]).reshape(self.m, self.d, self.d)

    @cached_property
    def rel_translations(self) -> np.ndarray:
        return np.array([e.meas.translation for e in self.edges]).reshape(self.m, self.d)

    @cached_property
    def kappa(self) -> np.ndarray:
        return np.array([e.meas.kappa for e in self.edges])

    @cached_property
    def tau(self) -> np.ndarray:
        return np.array([e.meas.tau for e in self.edges])

    def _weakly_connected(self) -> bool:
        if self.n <= 1:
            return True
        adj = [[] for _ in range(self.n)]
        for a, b in zip(self.src, self.dst):
            adj[a].append(b)
            adj[b].append(a)
        seen = np.zeros(self.n, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)
        return bool(seen.all())

    def isclose(self, other: "PoseGraph", tol: float = 1e-12) -> bool:
        """Field-by-field comparison with a float tolerance."""
        if self.d != other.d or self.nodes != other.nodes or len(self.edges) != len(other.edges):
            return False
        return all(
            a.src == b.src and a.dst == b.dst and a.meas.isclose(b.meas, tol)
            for a, b in zip(self.edges, other.edges)
        )


def evaluate_cost(graph: PoseGraph, rotations: np.ndarray, translations: np.ndarray) -> float:
    """Direct edge-by-edge evaluation of the weighted least-squares PGO cost.

    ``rotations`` has shape ``(n, r, d)`` and ``translations`` ``(n, r)``; with
    ``r == d`` this is the SE(d) cost, with ``r > d`` the lifted one.
    """
    R = np.asarray(rotations, dtype=float)
    t = np.asarray(translations, dtype=float)
    src, dst = graph.src, graph.dst
    rot_res = R[dst] - R[src] @ graph.rel_rotations
    trans_res = t[dst] - t[src] - np.einsum("mrd,md->mr", R[src], graph.rel_translations)
    return float(graph.kappa @ np.sum(rot_res**2, axis=(1, 2)) + graph.tau @ np.sum(trans_res**2, axis=1))


def trajectory_cost(graph: PoseGraph, traj: Trajectory) -> float:
    return evaluate_cost(graph, traj.rotations, traj.translations)


# --------------------------------------------------------------------------- g2o


def _angle_to_rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _rot_to_angle(R: np.ndarray) -> float:
    return float(np.arctan2(R[1, 0], R[0, 0]))


def _quat_to_rot(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0:
        raise ValueError("zero quaternion")
    return Rotation.from_quat(q / norm).as_matrix()


def _rot_to_quat(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_quat()


_SE2_DIAG = (0, 3, 5)
_SE3_DIAG = (0, 6, 11, 15, 18, 20)


def _upper_tri(diag: list[float], size: int) -> list[float]:
    out = []
    for i in range(size):
        for j in range(i, size):
            out.append(diag[i] if i == j else 0.0)
    return out


def parse_g2o(stream: TextIO | str) -> tuple[PoseGraph, Trajectory | None]:
    """Parse a 2D or 3D g2o file.

    Returns the graph and, when every node has a VERTEX record, the initial
    estimate stored in those records (else ``None``). Information matrices are
    reduced to scalar weights: ``tau`` is the mean of the translation-block
    diagonal and ``kappa`` the mean of the rotation-block diagonal.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    dim = None
    vertices: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    edges: list[tuple[int, int, Measurement]] = []

    def set_dim(value, lineno):
        nonlocal dim
        if dim is None:
            dim = value
        elif dim != value:
            raise G2OFormatError("mixed 2D and 3D records", lineno)

    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        tag = tok[0]
        try:
            if tag == "VERTEX_SE2":
                set_dim(2, lineno)
                _expect(tok, 5, lineno)
                x, y, th = map(float, tok[2:5])
                vertices[int(tok[1])] = (_angle_to_rot(th), np.array([x, y]))
            elif tag == "VERTEX_SE3:QUAT":
                set_dim(3, lineno)
                _expect(tok, 9, lineno)
                vals = list(map(float, tok[2:9]))
                vertices[int(tok[1])] = (_quat_to_rot(vals[3:7]), np.array(vals[:3]))
            elif tag == "EDGE_SE2":
                set_dim(2, lineno)
                _expect(tok, 12, lineno)
                vals = list(map(float, tok[3:12]))
                info = vals[3:]
                tau = float(np.mean([info[i] for i in _SE2_DIAG[:2]]))
                kappa = float(info[_SE2_DIAG[2]])
                meas = Measurement(_angle_to_rot(vals[2]), np.array(vals[:2]), kappa, tau)
                edges.append((int(tok[1]), int(tok[2]), meas))
            elif tag == "EDGE_SE3:QUAT":
                set_dim(3, lineno)
                _expect(tok, 31, lineno)
                vals = list(map(float, tok[3:31]))
                info = vals[7:]
                tau = float(np.mean([info[i] for i in _SE3_DIAG[:3]]))
                kappa = float(np.mean([info[i] for i in _SE3_DIAG[3:]]))
                meas = Measurement(_quat_to_rot(vals[3:7]), np.array(vals[:3]), kappa, tau)
                edges.append((int(tok[1]), int(tok[2]), meas))
            elif tag == "FIX":
                continue
            else:
                raise G2OParseError(f"unsupported record {tag!r}", lineno)
        except G2OParseError:
            raise
        except ValueError as exc:
            raise G2OParseError(str(exc), lineno) from exc

    if dim is None:
        raise G2OFormatError("no pose records found")
    ids = sorted(set(vertices) | {e[0] for e in edges} | {e[1] for e in edges})
    touched = {e[0] for e in edges} | {e[1] for e in edges}
    lonely = [v for v in ids if v not in touched]
    if lonely:
        raise ConnectivityError(f"vertices without incident edges: {lonely[:10]}")
    nodes = tuple(PoseId.from_g2o(v) for v in ids)
    graph = PoseGraph(dim, nodes, tuple(Edge(PoseId.from_g2o(a), PoseId.from_g2o(b), m) for a, b, m in edges))
    estimate = None
    if ids and all(v in vertices for v in ids):
        estimate = Trajectory(
            np.array([vertices[v][0] for v in ids]), np.array([vertices[v][1] for v in ids])
        )
    return graph, estimate


def _expect(tok, count, lineno):
    if len(tok) != count:
        raise G2OParseError(f"{tok[0]} expects {count - 1} fields, got {len(tok) - 1}", lineno)


def read_g2o(path) -> tuple[PoseGraph, Trajectory | None]:
    with open(path, encoding="utf-8") as fh:
        return parse_g2o(fh)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_g2o(graph: PoseGraph, trajectory: Trajectory | None = None) -> str:
    """Write ``graph`` (and optional vertex estimates) in g2o text format."""
    if trajectory is not None and (len(trajectory) != graph.n or trajectory.d != graph.d):
        raise ShapeError(
            f"trajectory of {len(trajectory)} poses in d={trajectory.d} does not match "
            f"{graph.n} nodes in d={graph.d}"
        )
    lines = []
    if trajectory is not None:
        for p, R, t in zip(graph.nodes, trajectory.rotations, trajectory.translations):
            if graph.d == 2:
                vals = [*t, _rot_to_angle(R)]
                lines.append(" ".join(["VERTEX_SE2", str(p.to_g2o()), *map(_fmt, vals)]))
            else:
                vals = [*t, *_rot_to_quat(R)]
                lines.append(" ".join(["VERTEX_SE3:QUAT", str(p.to_g2o()), *map(_fmt, vals)]))
    for e in graph.edges:
        m = e.meas
        ids = [str(e.src.to_g2o()), str(e.dst.to_g2o())]
        if graph.d == 2:
            vals = [*m.translation, _rot_to_angle(m.rotation), *_upper_tri([m.tau, m.tau, m.kappa], 3)]
            lines.append(" ".join(["EDGE_SE2", *ids, *map(_fmt, vals)]))
        else:
            info = _upper_tri([m.tau] * 3 + [m.kappa] * 3, 6)
            vals = [*m.translation, *_rot_to_quat(m.rotation), *info]
            lines.append(" ".join(["EDGE_SE3:QUAT", *ids, *map(_fmt, vals)]))
    return "\n".join(lines) + ("\n" if lines else "")


def write_g2o(path, graph: PoseGraph, trajectory: Trajectory | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_g2o(graph, trajectory))


# --------------------------------------------------------------------- synthetic

SYNTHETIC_KINDS = ("grid3d", "torus2_lattice", "manhattan2d")


def _skew3(w):
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def _rotation_noise(d: int, std: float, rng: np.random.Generator) -> np.ndarray:
    # exp of a Gaussian skew-symmetric matrix; concentration grows with the weight
    if std == 0:
        return np.eye(d)
    if d == 2:
        return _angle_to_rot(std * rng.standard_normal())
    return expm(_skew3(std * rng.standard_normal(3)))


def _frame_from_direction(direction: np.ndarray, up_hint: np.ndarray) -> np.ndarray:
    x = direction / np.linalg.norm(direction)
    z = up_hint - (up_hint @ x) * x
    if np.linalg.norm(z) < 1e-9:
        z = np.array([0.0, 1.0, 0.0]) - x[1] * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _measure(truth: Trajectory, i: int, j: int, w_R: float, w_T: float, noise_scale: float, rng):
    Ri, Rj = truth.rotations[i], truth.rotations[j]
    ti, tj = truth.translations[i], truth.translations[j]
    R = Ri.T @ Rj @ _rotation_noise(truth.d, noise_scale / w_R, rng)
    t = Ri.T @ (tj - ti)
    if noise_scale:
        t = t + (noise_scale / w_T) * rng.standard_normal(truth.d)
    # re-orthonormalize so accumulated round-off never trips the SO(d) check
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return Measurement(R, t, w_R**2, w_T**2)


def _grid3d(shape, rng):
    nx, ny, nz = shape
    order = []
    for k in range(nz):
        rows = range(ny) if k % 2 == 0 else reversed(range(ny))
        for jj, j in enumerate(rows):
            cols = range(nx) if (jj + k * ny) % 2 == 0 else reversed(range(nx))
            order.extend((i, j, k) for i in cols)
    pos = np.array(order, dtype=float)
    n = len(order)
    rots = np.empty((n, 3, 3))
    for a in range(n):
        step = pos[min(a + 1, n - 1)] - pos[a] if a < n - 1 else pos[a] - pos[a - 1]
        rots[a] = _frame_from_direction(step, np.array([0.0, 0.0, 1.0]))
    where = {c: a for a, c in enumerate(order)}
    candidates = []
    for c, a in where.items():
        for off in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            nb = (c[0] + off[0], c[1] + off[1], c[2] + off[2])
            b = where.get(nb)
            if b is not None and abs(a - b) > 1:
                candidates.append((min(a, b), max(a, b)))
    return Trajectory(rots, pos), sorted(candidates)


def _torus(shape, rng, major=10.0, minor=3.0):
    nu, nv = shape
    n = nu * nv
    rots = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    for a, (i, j) in enumerate(itertools.product(range(nu), range(nv))):
        u, v = 2 * np.pi * i / nu, 2 * np.pi * j / nv
        pos[a] = [(major + minor * np.cos(v)) * np.cos(u), (major + minor * np.cos(v)) * np.sin(u), minor * np.sin(v)]
        tv = np.array([-np.sin(v) * np.cos(u), -np.sin(v) * np.sin(u), np.cos(v)])
        tu = np.array([-np.sin(u), np.cos(u), 0.0])
        rots[a] = np.column_stack([tv, tu, np.cross(tv, tu)])
    candidates = []
    for i, j in itertools.product(range(nu), range(nv)):
        a = i * nv + j
        ring = i * nv + (j + 1) % nv
        nxt = ((i + 1) % nu) * nv + j
        for b in (ring, nxt):
            if abs(a - b) > 1 and a != b:
                candidates.append((min(a, b), max(a, b)))
    return Trajectory(rots, pos), sorted(set(candidates))


def _manhattan(num_poses, extent, rng, turn_prob=0.3):
    heading = 0
    steps = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]])
    cell = np.array([extent // 2, extent // 2])
    cells = [tuple(cell)]
    headings = [heading]
    for _ in range(num_poses - 1):
        if rng.random() < turn_prob:
            heading = (heading + rng.choice([-1, 1])) % 4
        while not np.all((cell + steps[heading] >= 0) & (cell + steps[heading] < extent)):
            heading = (heading + rng.choice([-1, 1])) % 4
        cell = cell + steps[heading]
        cells.append(tuple(cell))
        headings.append(heading)
    pos = np.array(cells, dtype=float)
    rots = np.array([_angle_to_rot(h * np.pi / 2) for h in headings])
    visits: dict[tuple, list[int]] = {}
    candidates = []
    for a, c in enumerate(cells):
        for b in visits.get(c, []):
            if a - b > 1:
                candidates.append((b, a))
        visits.setdefault(c, []).append(a)
    return Trajectory(rots, pos), candidates


def generate_synthetic(
    kind: str,
    size=None,
    *,
    w_R: float = 10.0,
    w_T: float = 10.0,
    noise_scale: float = 1.0,
    loop_prob: float = 0.3,
    seed: int = 0,
    extent: int | None = None,
) -> tuple[PoseGraph, Trajectory]:
    """Generate a synthetic pose graph and its ground-truth trajectory.

    ``size`` is ``(nx, ny, nz)`` for ``grid3d``, ``(n_major, n_minor)`` for
    ``torus2_lattice`` and the number of poses for ``manhattan2d``. Every
    instance contains the full odometry chain, so it is always connected.
    Measurements carry weights ``kappa = w_R**2`` and ``tau = w_T**2``; noise
    standard deviations are ``noise_scale / w_R`` and ``noise_scale / w_T``.
    """
    if not 0.0 <= loop_prob <= 1.0:
        raise ParameterError(f"loop-closure probability must lie in [0, 1], got {loop_prob}")
    if w_R <= 0 or w_T <= 0 or noise_scale < 0:
        raise ParameterError("weights must be positive and noise_scale non-negative")
    rng = np.random.default_rng(seed)
    if kind == "grid3d":
        size = tuple(size or (4, 4, 4))
        if len(size) != 3 or min(size) < 2:
            raise ParameterError(f"grid3d needs three sizes >= 2, got {size}")
        truth, candidates = _grid3d(size, rng)
    elif kind == "torus2_lattice":
        size = tuple(size or (10, 10))
        if len(size) != 2 or min(size) < 2:
            raise ParameterError(f"torus2_lattice needs two sizes >= 2, got {size}")
        truth, candidates = _torus(size, rng)
    elif kind == "manhattan2d":
        size = int(size or 500)
        if size < 2:
            raise ParameterError(f"manhattan2d needs at least 2 poses, got {size}")
        extent = extent or max(4, int(round(np.sqrt(size) * 0.8)))
        truth, candidates = _manhattan(size, extent, rng)
    else:
        raise ParameterError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")

    n = len(truth)
    pairs = [(a, a + 1) for a in range(n - 1)]
    pairs += [c for c in candidates if rng.random() < loop_prob]
    d = truth.d
    nodes = tuple(PoseId(0, a) for a in range(n))
    edges = tuple(
        Edge(nodes[i], nodes[j], _measure(truth, i, j, w_R, w_T, noise_scale, rng)) for i, j in pairs
    )
    return PoseGraph(d, nodes, edges), truth

