"""Synchronous in-process simulation of the multi-robot solver.

Every partition block runs on a :class:`RobotNode` that holds only its own
poses plus replicas of the neighbor poses its edges reference. All
cross-robot data moves through :class:`RoundMessage` objects delivered at
round barriers. One round is one solver iteration:

1. every robot sends its boundary columns (``Y`` and, for IRBCD, the
   extrapolated ``P``) to each neighbor block (``pose_share``);
2. every robot broadcasts its cost share and squared gradient norm
   (``grad_norm_contrib``) so all robots agree on ``f`` and ``||grad f||``;
3. the selected robot updates its block and, for IRBCD, broadcasts whether
   it restarted (``restart_flag``); everyone then updates ``V`` locally.

The numerical kernels are the ones used by :func:`dpgo.solver.solve`, so the
trace is identical to the single-process run.
"""

from __future__ import annotations

import json
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import ParameterError, ProtocolViolation
from .initialization import initial_state
from .problem import BlockProblem, DataMatrix, build_block_problems, build_data_matrix
from .solver import (
    METHODS,
    BlockSelector,
    IterRecord,
    SolveReport,
    SolverConfig,
    candidate_decrease,
    check_restart,
    minimize_local,
    update_accel,
)

MESSAGE_KINDS = ("pose_share", "grad_norm_contrib", "restart_flag")


@dataclass(frozen=True)
class RoundMessage:
    kind: str
    source: int
    destination: int
    round: int
    size: int
    payload: object = field(default=None, compare=False, repr=False)


@dataclass
class RobotNode:
    """One robot: its block problem, owned state and neighbor replicas."""

    problem: BlockProblem
    Y: np.ndarray
    V: np.ndarray
    P: np.ndarray | None = None
    Y_rep: np.ndarray | None = None
    P_rep: np.ndarray | None = None
    inbox: list = field(default_factory=list)

    @property
    def block(self) -> int:
        return self.problem.block

    @property
    def owned(self) -> np.ndarray:
        return self.problem.index.poses

    @property
    def replicated(self) -> np.ndarray:
        return self.problem.replicated

    def local_slab(self) -> np.ndarray:
        return np.concatenate([self.Y, self.Y_rep], axis=1)


class Network:
    """Round-synchronous message queues with a neighbor check on pose shares."""

    def __init__(self, neighbors: dict[int, set[int]], nodes: list[RobotNode]):
        self.neighbors = neighbors
        self.nodes = nodes
        self.pending: list[RoundMessage] = []
        self.log: list[RoundMessage] = []

    def send(self, msg: RoundMessage) -> None:
        if msg.kind not in MESSAGE_KINDS:
            raise ProtocolViolation(f"unknown message kind {msg.kind!r}")
        if msg.source == msg.destination:
            raise ProtocolViolation(f"robot {msg.source} sent a message to itself")
        if msg.kind == "pose_share" and msg.destination not in self.neighbors[msg.source]:
            raise ProtocolViolation(f"pose_share from {msg.source} to non-neighbor {msg.destination}")
        self.pending.append(msg)

    def barrier(self) -> None:
        """Deliver every pending message exactly once."""
        for msg in self.pending:
            self.nodes[msg.destination].inbox.append(msg)
        self.log.extend(self.pending)
        self.pending = []


def neighbor_blocks(problems: list[BlockProblem], assignment: np.ndarray) -> dict[int, set[int]]:
    return {bp.block: set(np.unique(assignment[bp.replicated]).tolist()) for bp in problems}


@dataclass
class CommReport:
    rounds: int
    messages: dict
    scalars: dict
    per_round_messages: list
    per_round_scalars: list

    @property
    def total_messages(self) -> int:
        return sum(self.messages.values())

    @property
    def total_scalars(self) -> int:
        return sum(self.scalars.values())

    def pose_share_scalars_per_round(self) -> float:
        return self.scalars.get("pose_share", 0) / self.rounds if self.rounds else 0.0

    def pose_share_messages_per_round(self) -> float:
        return self.messages.get("pose_share", 0) / self.rounds if self.rounds else 0.0

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "messages": dict(self.messages),
            "scalars": dict(self.scalars),
            "total_messages": self.total_messages,
            "total_scalars": self.total_scalars,
            "pose_share_messages_per_round": self.pose_share_messages_per_round(),
            "pose_share_scalars_per_round": self.pose_share_scalars_per_round(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def comm_report(messages, rounds: int | None = None) -> CommReport:
    """Aggregate a message log into per-kind and per-round counts."""
    messages = list(messages)
    if rounds is None:
        rounds = max((m.round for m in messages), default=-1) + 1
    count = {k: 0 for k in MESSAGE_KINDS}
    scal = {k: 0 for k in MESSAGE_KINDS}
    per_msg = [defaultdict(int) for _ in range(rounds)]
    per_scal = [defaultdict(int) for _ in range(rounds)]
    for m in messages:
        count[m.kind] += 1
        scal[m.kind] += m.size
        per_msg[m.round][m.kind] += 1
        per_scal[m.round][m.kind] += m.size
    return CommReport(rounds, count, scal, [dict(x) for x in per_msg], [dict(x) for x in per_scal])


def _boundary(problems: list[BlockProblem], assignment: np.ndarray, d: int):
    """For each (sender, receiver) pair: local column positions the sender ships.

    The sender ships every owned pose adjacent to the receiver; the receiver
    stores it at the matching position of its replica slab.
    """
    routes = {}
    for recv in problems:
        owners = assignment[recv.replicated]
        for send in problems:
            if send.block == recv.block:
                continue
            mask = owners == send.block
            if not mask.any():
                continue
            poses = recv.replicated[mask]
            src_pos = np.searchsorted(send.index.poses, poses)
            routes[(send.block, recv.block)] = (
                geometry.pose_columns(src_pos, d),
                geometry.pose_columns(np.flatnonzero(mask), d),
                len(poses),
            )
    return routes


def run_distributed(graph_or_data, partition, method: str = "irbcd", config: SolverConfig | None = None,
                    Y0: np.ndarray | None = None, network_hook=None) -> tuple[SolveReport, CommReport]:
    """Run the solver on simulated robots; returns the trace and the message statistics.

    ``network_hook(network, round)`` is called before every round and may
    inject messages (used to test the protocol checks).
    """
    config = config or SolverConfig()
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    data = graph_or_data if isinstance(graph_or_data, DataMatrix) else build_data_matrix(graph_or_data)
    graph = data.graph
    d = data.d
    assignment = np.asarray(partition.assignment)
    N = partition.num_blocks
    problems = build_block_problems(data, assignment, N)
    r = config.rank_for(d)
    rec = None
    Yg = initial_state(graph, r, config.init) if Y0 is None else np.array(Y0, dtype=float)
    data.check_state(Yg)
    r = Yg.shape[0]
    # each robot keeps only its own columns; the global array is never touched again
    nodes = [
        RobotNode(bp, Yg[:, bp.own_cols].copy(), Yg[:, bp.own_cols].copy(), Y_rep=Yg[:, bp.rep_cols].copy())
        for bp in problems
    ]
    del Yg
    net = Network(neighbor_blocks(problems, assignment), nodes)
    routes = _boundary(problems, assignment, d)
    accelerated = method == "irbcd"
    arrays = ("Y", "P") if accelerated else ("Y",)
    selector = BlockSelector(N, config.selection, config.seed)
    initial = config.initial_accel(N)
    accel = initial
    carry_p = accelerated and config.carry == "P"
    report = SolveReport(method, rank=r)
    t0 = time.perf_counter()
    k = 0
    while True:
        if network_hook:
            network_hook(net, k)
        coeffs = update_accel(accel) if accelerated else None
        for node in nodes:
            if accelerated:
                node.P = geometry.project_state(coeffs.alpha * node.V + (1.0 - coeffs.alpha) * node.Y, d)
            else:
                node.P = node.Y
        # phase 1: boundary exchange
        for (s, t), (src_cols, _, npose) in routes.items():
            payload = {name: getattr(nodes[s], name)[:, src_cols] for name in arrays}
            net.send(RoundMessage("pose_share", s, t, k, npose * r * (d + 1) * len(arrays), payload))
        net.barrier()
        for node in nodes:
            node.P_rep = np.empty_like(node.Y_rep)
            for msg in node.inbox:
                _, dst_cols, _ = routes[(msg.source, node.block)]
                node.Y_rep[:, dst_cols] = msg.payload["Y"]
                node.P_rep[:, dst_cols] = msg.payload["P" if accelerated else "Y"]
            node.inbox.clear()
        # phase 2: all-gather of cost and gradient contributions
        contrib = {}
        for node in nodes:
            bp = node.problem
            slab = node.local_slab()
            mine = [bp.owned_cost(slab), float(np.sum(bp.gradient_local(slab) ** 2))]
            if carry_p:
                mine.append(bp.owned_cost(np.concatenate([node.P, node.P_rep], axis=1)))
            contrib[node.block] = tuple(mine)
            for other in nodes:
                if other.block != node.block:
                    net.send(RoundMessage("grad_norm_contrib", node.block, other.block, k, len(mine), tuple(mine)))
        net.barrier()
        views = []
        for node in nodes:
            parts = dict(_gathered(node.inbox))
            parts[node.block] = contrib[node.block]
            node.inbox.clear()
            totals = [0.0] * len(parts[node.block])
            for b in range(N):
                for c in range(len(totals)):
                    totals[c] += parts[b][c]
            views.append((totals[0], math.sqrt(totals[1]), totals[2] if carry_p else None))
        if len(set(views)) != 1:
            raise ProtocolViolation("robots disagree on the gathered cost or gradient norm")
        f, g, f_P = views[0]
        if rec is None:
            report.records.append(IterRecord(0, f, g))
        else:
            rec.f, rec.gradnorm = f, g
            report.records.append(rec)
        if g <= config.epsilon or k >= config.max_iters:
            break
        # phase 3: the selected robot updates its block
        block = selector.next()
        active = nodes[block]
        bp = active.problem
        restarted = False
        if accelerated:
            res = minimize_local(bp, active.P, active.P_rep, config)
            if carry_p:
                decrease = candidate_decrease(bp, active.P, active.P_rep, res.Y, f - f_P)
            else:
                decrease = candidate_decrease(bp, active.Y, active.Y_rep, res.Y)
            if check_restart(f, f - decrease, g, config.c1):
                if config.restart_anchor == "Y":
                    res = minimize_local(bp, active.Y, active.Y_rep, config)
                else:
                    res = minimize_local(bp, active.P, active.P_rep, config)
                restarted = True
            for other in nodes:
                if other.block != block:
                    net.send(RoundMessage("restart_flag", block, other.block, k, 1, restarted))
        else:
            res = minimize_local(bp, active.Y, active.Y_rep, config)
        net.barrier()
        flags = {block: restarted}
        for node in nodes:
            for msg in node.inbox:
                flags[node.block] = msg.payload
            node.inbox.clear()
        for node in nodes:
            restart_here = flags.get(node.block, False)
            if node.block == block:
                Y_new = res.Y.copy()
            elif carry_p and not restart_here:
                Y_new = node.P.copy()
            else:
                Y_new = node.Y
            if not accelerated:
                node.V = Y_new
            elif restart_here:
                node.V = Y_new.copy()
            else:
                node.V = geometry.project_state(
                    coeffs.beta * node.V + (1.0 - coeffs.beta) * node.P + coeffs.gamma * (Y_new - node.P), d)
            node.Y = Y_new
        if accelerated:
            accel = initial if restarted else coeffs
        k += 1
        rec = IterRecord(k, math.nan, math.nan, restarted, block, 1e3 * (time.perf_counter() - t0),
                         inner_steps=res.steps)
        if coeffs is not None:
            rec.gamma, rec.alpha, rec.beta = coeffs.gamma, coeffs.alpha, coeffs.beta
    Y = np.empty((r, data.size))
    for node in nodes:
        Y[:, node.problem.own_cols] = node.Y
    report.Y = Y
    report.termination = "converged" if g <= config.epsilon else "max_iters"
    return report, comm_report(net.log, k + 1)


def _gathered(inbox):
    for msg in inbox:
        if msg.kind != "grad_norm_contrib":
            raise ProtocolViolation(f"unexpected {msg.kind} message in the gradient phase")
        yield msg.source, msg.payload
