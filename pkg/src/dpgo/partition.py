"""Multilevel k-way edge-cut partitioning of pose graphs.

Coarsen by greedy heavy-edge matching, grow an initial partition on the
coarsest graph, then project back level by level with FM-style boundary
refinement. Also provides the contiguous sequential baseline and the
partition-quality metrics used to compare the two.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InfeasiblePartitionError, ParameterError
from .graph import PoseGraph

DEFAULT_EPSILON = 0.05


class Preset(NamedTuple):
    initial_seeds: int
    refine_passes: int
    vcycles: int


PRESETS = {
    "fast": Preset(4, 1, 1),
    "eco": Preset(8, 2, 1),
    "strong": Preset(16, 3, 2),
    "highest": Preset(32, 4, 3),
}


@dataclass
class WeightedGraph:
    """Undirected graph with integer vertex and edge weights."""

    vwgt: np.ndarray
    adj: list = field(repr=False)

    @classmethod
    def from_pose_graph(cls, graph: PoseGraph) -> "WeightedGraph":
        adj = [dict() for _ in range(graph.n)]
        for a, b in zip(graph.src.tolist(), graph.dst.tolist()):
            adj[a][b] = adj[a].get(b, 0) + 1
            adj[b][a] = adj[b].get(a, 0) + 1
        return cls(np.ones(graph.n, dtype=np.int64), adj)

    @classmethod
    def from_edges(cls, n: int, edges, vwgt=None) -> "WeightedGraph":
        adj = [dict() for _ in range(n)]
        for e in edges:
            a, b = int(e[0]), int(e[1])
            w = int(e[2]) if len(e) > 2 else 1
            if a == b:
                continue
            adj[a][b] = adj[a].get(b, 0) + w
            adj[b][a] = adj[b].get(a, 0) + w
        vwgt = np.ones(n, dtype=np.int64) if vwgt is None else np.asarray(vwgt, dtype=np.int64)
        return cls(vwgt, adj)

    @property
    def n(self) -> int:
        return len(self.adj)

    @property
    def total_weight(self) -> int:
        return int(self.vwgt.sum())

    def edges(self):
        for u, nbrs in enumerate(self.adj):
            for v, w in nbrs.items():
                if u < v:
                    yield u, v, w

    def cut(self, assignment) -> int:
        a = assignment
        return sum(w for u, v, w in self.edges() if a[u] != a[v])


@dataclass
class Partition:
    """Assignment of every pose (by dense global index) to one of ``num_blocks`` blocks."""

    assignment: np.ndarray
    num_blocks: int
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)

    def block_weights(self, vwgt=None) -> np.ndarray:
        w = np.ones(len(self.assignment)) if vwgt is None else vwgt
        return np.bincount(self.assignment, weights=w, minlength=self.num_blocks)

    def cap(self, total: float) -> float:
        return balance_cap(total, self.num_blocks, self.epsilon)

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == b) for b in range(self.num_blocks)]

    def is_valid(self, vwgt=None) -> bool:
        weights = self.block_weights(vwgt)
        total = weights.sum()
        return (
            self.assignment.min(initial=0) >= 0
            and self.assignment.max(initial=0) < self.num_blocks
            and bool(np.all(weights > 0))
            and weights.max() <= self.cap(total) + 1e-9
        )

    def edge_owner(self, graph: PoseGraph) -> np.ndarray:
        """Block owning each measurement: the block of its source pose."""
        return self.assignment[graph.src]

    def pose_map(self, graph: PoseGraph) -> dict:
        return {p: int(self.assignment[i]) for i, p in enumerate(graph.nodes)}


def balance_cap(total: float, num_blocks: int, epsilon: float) -> float:
    return (1.0 + epsilon) * math.ceil(total / num_blocks)


class PartitionMetrics(NamedTuple):
    cut_edges: int
    balance: float
    cvolume: float

    def to_dict(self) -> dict:
        return {"cut_edges": int(self.cut_edges), "balance": float(self.balance), "cvolume": float(self.cvolume)}


def metrics(graph: PoseGraph, partition: Partition) -> PartitionMetrics:
    """Cut edges, balance (max block / ceil(n/N)) and communication-volume factor."""
    a = partition.assignment
    pairs = {(min(u, v), max(u, v)) for u, v in zip(graph.src.tolist(), graph.dst.tolist())}
    cut = sum(1 for u, v in pairs if a[u] != a[v])
    external = [set() for _ in range(graph.n)]
    for u, v in pairs:
        if a[u] != a[v]:
            external[u].add(a[v])
            external[v].add(a[u])
    cvolume = sum(len(s) for s in external) / graph.n if graph.n else 0.0
    ideal = math.ceil(graph.n / partition.num_blocks)
    balance = float(partition.block_weights().max()) / ideal
    return PartitionMetrics(cut, balance, cvolume)


# ------------------------------------------------------------------ coarsening


def coarsen(g: WeightedGraph, rng: np.random.Generator | None = None, max_vertex_weight: float = math.inf,
            constraint=None) -> tuple[WeightedGraph, np.ndarray]:
    """Contract a greedy maximal matching taken in order of descending edge rating.

    The rating of ``{u, v}`` is ``w(u, v) / min(c(u), c(v))``. Ties are broken
    by a random permutation when ``rng`` is given, else by vertex order. Pairs
    whose merged weight would exceed ``max_vertex_weight`` or whose endpoints
    differ in ``constraint`` are skipped. Returns the coarse graph and the
    fine-to-coarse vertex map.
    """
    edges = list(g.edges())
    if rng is not None and edges:
        perm = rng.permutation(len(edges))
        edges = [edges[i] for i in perm]
    vw = g.vwgt
    rated = sorted(edges, key=lambda e: -e[2] / min(vw[e[0]], vw[e[1]]))
    mate = np.full(g.n, -1, dtype=np.int64)
    for u, v, _ in rated:
        if mate[u] >= 0 or mate[v] >= 0:
            continue
        if vw[u] + vw[v] > max_vertex_weight:
            continue
        if constraint is not None and constraint[u] != constraint[v]:
            continue
        mate[u], mate[v] = v, u
    cmap = np.full(g.n, -1, dtype=np.int64)
    nxt = 0
    for u in range(g.n):
        if cmap[u] >= 0:
            continue
        cmap[u] = nxt
        if mate[u] >= 0:
            cmap[mate[u]] = nxt
        nxt += 1
    vwgt = np.bincount(cmap, weights=vw, minlength=nxt).astype(np.int64)
    adj = [dict() for _ in range(nxt)]
    for u, nbrs in enumerate(g.adj):
        cu = cmap[u]
        for v, w in nbrs.items():
            cv = cmap[v]
            if cu != cv:
                adj[cu][cv] = adj[cu].get(cv, 0) + w
    return WeightedGraph(vwgt, adj), cmap


# ----------------------------------------------------------- initial partition


def _bfs_far(g: WeightedGraph, sources) -> int:
    dist = np.full(g.n, -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    last = sources[-1]
    while queue:
        u = queue.popleft()
        last = u
        for v in g.adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    unreached = np.flatnonzero(dist < 0)
    return int(unreached[0]) if len(unreached) else int(last)


def _grow(g: WeightedGraph, num_blocks: int, cap: float, first_seed: int):
    seeds = [first_seed]
    while len(seeds) < num_blocks:
        far = _bfs_far(g, seeds)
        if far in seeds:
            far = next(v for v in range(g.n) if v not in seeds)
        seeds.append(far)
    assign = np.full(g.n, -1, dtype=np.int64)
    weight = np.zeros(num_blocks)
    conn = [dict() for _ in range(num_blocks)]

    def place(v, b):
        assign[v] = b
        weight[b] += g.vwgt[v]
        conn[b].pop(v, None)
        for u, w in g.adj[v].items():
            if assign[u] < 0:
                conn[b][u] = conn[b].get(u, 0) + w

    for b, s in enumerate(seeds):
        place(s, b)
    remaining = g.n - num_blocks
    while remaining:
        best = None
        for b in np.argsort(weight, kind="stable"):
            cands = [(w, -v) for v, w in conn[b].items() if assign[v] < 0 and weight[b] + g.vwgt[v] <= cap + 1e-9]
            if cands:
                best = (b, -max(cands)[1])
                break
        if best is None:
            break
        place(best[1], best[0])
        remaining -= 1
    for v in np.flatnonzero(assign < 0):
        order = np.argsort(weight, kind="stable")
        b = next((b for b in order if weight[b] + g.vwgt[v] <= cap + 1e-9), None)
        if b is None:
            return None
        place(v, b)
    return assign


def initial_partition(g: WeightedGraph, num_blocks: int, epsilon: float = DEFAULT_EPSILON,
                      rng: np.random.Generator | None = None, trials: int = 8,
                      refine_passes: int = 2) -> Partition:
    """Greedy region growing from ``num_blocks`` BFS-spread seeds, best of ``trials``."""
    if num_blocks < 1:
        raise ParameterError("number of blocks must be positive")
    if g.n < num_blocks:
        raise InfeasiblePartitionError(f"{g.n} vertices cannot fill {num_blocks} non-empty blocks")
    cap = balance_cap(g.total_weight, num_blocks, epsilon)
    if g.vwgt.max() > cap + 1e-9:
        raise InfeasiblePartitionError(f"vertex weight {g.vwgt.max()} exceeds block capacity {cap:.2f}")
    if num_blocks == 1:
        return Partition(np.zeros(g.n, dtype=np.int64), 1, epsilon)
    rng = rng if rng is not None else np.random.default_rng(0)
    starts = rng.permutation(g.n)[: max(1, trials)]
    best, best_cut = None, math.inf
    for s in starts:
        assign = _grow(g, num_blocks, cap, int(s))
        if assign is None:
            continue
        part = Partition(assign, num_blocks, epsilon)
        if not part.is_valid(g.vwgt):
            continue
        part = refine(g, part, max_passes=refine_passes)
        c = g.cut(part.assignment)
        if c < best_cut:
            best, best_cut = part, c
    if best is None:
        raise InfeasiblePartitionError("no balanced initial partition found")
    return best


# ------------------------------------------------------------------ refinement


def refine(g: WeightedGraph, partition: Partition, max_passes: int | None = None,
           stall_limit: int | None = None) -> Partition:
    """k-way FM refinement of boundary vertices.

    Each pass moves vertices greedily by gain (possibly negative), locks moved
    vertices, and rolls back to the best prefix, so the cut never increases
    and every intermediate state respects the balance cap and keeps all blocks
    non-empty. Passes repeat until one brings no improvement.
    """
    k = partition.num_blocks
    assign = partition.assignment.copy()
    if k == 1 or g.n == 0:
        return Partition(assign, k, partition.epsilon)
    cap = balance_cap(g.total_weight, k, partition.epsilon)
    vw = g.vwgt
    stall_limit = stall_limit or max(25, min(200, g.n // 10))
    passes = 0
    while max_passes is None or passes < max_passes:
        passes += 1
        weight = np.bincount(assign, weights=vw, minlength=k)
        count = np.bincount(assign, minlength=k)

        def connections(v):
            c = {}
            for u, w in g.adj[v].items():
                c[assign[u]] = c.get(assign[u], 0) + w
            return c

        def best_move(v):
            c = connections(v)
            own = assign[v]
            inside = c.get(own, 0)
            best = None
            for b, w in c.items():
                if b == own or weight[b] + vw[v] > cap + 1e-9:
                    continue
                gain = w - inside
                if best is None or gain > best[0] or (gain == best[0] and weight[b] < weight[best[1]]):
                    best = (gain, b)
            return best

        heap = []
        for v in range(g.n):
            a = assign[v]
            if any(assign[u] != a for u in g.adj[v]):
                mv = best_move(v)
                if mv is not None:
                    heapq.heappush(heap, (-mv[0], v, mv[1]))
        locked = np.zeros(g.n, dtype=bool)
        moves = []
        delta = best_delta = 0
        best_len = 0
        since_best = 0
        while heap and since_best < stall_limit:
            neg_gain, v, b = heapq.heappop(heap)
            if locked[v]:
                continue
            mv = best_move(v)
            if mv is None:
                continue
            if (-mv[0], mv[1]) != (neg_gain, b):
                heapq.heappush(heap, (-mv[0], v, mv[1]))
                continue
            src = assign[v]
            if count[src] <= 1:
                locked[v] = True
                continue
            gain = mv[0]
            assign[v] = b
            weight[src] -= vw[v]
            weight[b] += vw[v]
            count[src] -= 1
            count[b] += 1
            locked[v] = True
            moves.append((v, src, b))
            delta -= gain
            if delta < best_delta:
                best_delta, best_len, since_best = delta, len(moves), 0
            else:
                since_best += 1
            for u in g.adj[v]:
                if not locked[u]:
                    mu = best_move(u)
                    if mu is not None:
                        heapq.heappush(heap, (-mu[0], u, mu[1]))
        for v, src, b in reversed(moves[best_len:]):
            assign[v] = src
        if best_delta == 0:
            break
    return Partition(assign, k, partition.epsilon)


# ------------------------------------------------------------------ multilevel


def _hierarchy(g, num_blocks, cap, rng, constraint=None):
    threshold = 30 * num_blocks
    slack = cap - math.ceil(g.total_weight / num_blocks)
    max_vw = max(1.0, math.floor(slack))
    levels = [g]
    maps = []
    cons = constraint
    while levels[-1].n > threshold:
        coarse, cmap = coarsen(levels[-1], rng, max_vw, cons)
        if coarse.n == levels[-1].n:
            break
        levels.append(coarse)
        maps.append(cmap)
        if cons is not None:
            nxt = np.empty(coarse.n, dtype=np.int64)
            nxt[cmap] = cons
            cons = nxt
        if coarse.n > 0.95 * levels[-2].n:
            break
    return levels, maps, cons


def _uncoarsen(levels, maps, coarse_assign, num_blocks, epsilon, passes):
    assign = coarse_assign
    for level in range(len(maps) - 1, -1, -1):
        assign = assign[maps[level]]
        part = refine(levels[level], Partition(assign, num_blocks, epsilon), max_passes=passes)
        assign = part.assignment
    return assign


def multilevel_partition(graph: PoseGraph, num_blocks: int, preset: str = "highest",
                         epsilon: float = DEFAULT_EPSILON, seed: int = 0) -> Partition:
    """Full V-cycle partitioning with effort controlled by ``preset``.

    Later V-cycles (``strong``, ``highest``) coarsen only within the blocks of
    the incumbent partition and refine again on the way up, keeping the best
    cut found.
    """
    if preset not in PRESETS:
        raise ParameterError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    if num_blocks < 1:
        raise ParameterError("number of blocks must be positive")
    cfg = PRESETS[preset]
    g = WeightedGraph.from_pose_graph(graph)
    if num_blocks == 1:
        return Partition(np.zeros(g.n, dtype=np.int64), 1, epsilon)
    rng = np.random.default_rng(seed)
    cap = balance_cap(g.total_weight, num_blocks, epsilon)

    levels, maps, _ = _hierarchy(g, num_blocks, cap, rng)
    coarse = initial_partition(levels[-1], num_blocks, epsilon, rng, trials=cfg.initial_seeds,
                               refine_passes=cfg.refine_passes)
    best = _uncoarsen(levels, maps, coarse.assignment, num_blocks, epsilon, cfg.refine_passes)
    best_cut = g.cut(best)
    for _ in range(cfg.vcycles - 1):
        levels, maps, start = _hierarchy(g, num_blocks, cap, rng, constraint=best)
        start = refine(levels[-1], Partition(start, num_blocks, epsilon), max_passes=cfg.refine_passes).assignment
        cand = _uncoarsen(levels, maps, start, num_blocks, epsilon, cfg.refine_passes)
        c = g.cut(cand)
        if c < best_cut:
            best, best_cut = cand, c
    part = Partition(best, num_blocks, epsilon)
    if not part.is_valid(g.vwgt):
        raise InfeasiblePartitionError("multilevel partition violates the balance constraint")
    return part


def sequential_partition(graph: PoseGraph, num_blocks: int, epsilon: float = DEFAULT_EPSILON) -> Partition:
    """Contiguous ranges of the global pose order, sizes equal up to the remainder."""
    if num_blocks < 1 or num_blocks > graph.n:
        raise ParameterError(f"cannot split {graph.n} poses into {num_blocks} blocks")
    sizes = np.full(num_blocks, graph.n // num_blocks)
    sizes[: graph.n % num_blocks] += 1
    return Partition(np.repeat(np.arange(num_blocks), sizes), num_blocks, epsilon)


def make_partition(graph: PoseGraph, num_blocks: int, method: str = "highest",
                   epsilon: float = DEFAULT_EPSILON, seed: int = 0) -> Partition:
    if method == "sequential":
        return sequential_partition(graph, num_blocks, epsilon)
    return multilevel_partition(graph, num_blocks, method, epsilon, seed)
