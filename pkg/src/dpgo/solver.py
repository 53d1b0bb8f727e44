"""Riemannian block-coordinate descent (RBCD) and its accelerated variant (IRBCD).

IRBCD keeps three sequences on M(r, d): the iterate ``Y``, the extrapolated
point ``P`` and the momentum sequence ``V``. Each iteration

1. computes the coupling coefficients ``gamma, alpha, beta`` from ``(a, b)``;
2. sets ``P = Proj(alpha V + (1 - alpha) Y)``;
3. minimizes the selected block with its neighbors frozen at ``P``;
4. sets ``V = Proj(beta V + (1 - beta) P + gamma (Y_new - P))``;
5. restarts (``V = Y``, ``(a, b)`` reset) when the decrease of ``f`` is below
   ``c1 * ||grad f||^2``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .errors import ParameterError
from .initialization import initial_state
from .problem import BlockProblem, DataMatrix, build_block_problems

METHODS = ("rbcd", "irbcd")


@dataclass(frozen=True)
class AccelParams:
    """Auxiliary scalars of the accelerated scheme.

    ``a`` and ``b`` are the carried state; ``gamma``, ``alpha`` and ``beta``
    are the coefficients of the current step (NaN until computed).
    """

    sigma: float
    a: float
    b: float
    nblocks: int
    rho: float | None = None
    gamma: float = math.nan
    alpha: float = math.nan
    beta: float = math.nan

    @property
    def rho_value(self) -> float:
        return self.sigma if self.rho is None else self.rho


def accel_coefficients(a: float, b: float, sigma: float, rho: float, n: int) -> tuple[float, float, float]:
    """Solve ``g^2 - g/n = (1 - g sigma/n) a^2/b^2`` for its larger root, then alpha and beta."""
    if n < 1 or b <= 0:
        raise ParameterError(f"need n >= 1 and b > 0, got n={n}, b={b}")
    c = (a / b) ** 2
    lin = 1.0 / n - sigma * c / n
    disc = lin * lin + 4.0 * c
    if disc < 0 or not math.isfinite(disc):
        raise ParameterError(f"coupling equation has no real root (discriminant {disc})")
    gamma = 0.5 * (lin + math.sqrt(disc))
    if gamma < 1.0 / n - 1e-15:
        raise ParameterError(f"gamma={gamma} violates gamma >= 1/n")
    denom = gamma * (n * n - rho)
    if denom <= 0:
        raise ParameterError(f"alpha undefined for gamma={gamma}, rho={rho}, n={n}")
    alpha = (n - gamma * rho) / denom
    beta = 1.0 - gamma * rho / n
    if beta <= 0 or beta > 1:
        raise ParameterError(f"beta={beta} outside (0, 1]")
    if not 0 < alpha <= 1 + 1e-12:
        raise ParameterError(f"alpha={alpha} outside (0, 1]")
    return gamma, min(alpha, 1.0), beta


def update_accel(params: AccelParams) -> AccelParams:
    """Coefficients for the current step and the carried ``(a, b)`` for the next one.

    ``b_next = b / sqrt(beta)`` and ``a_next = gamma * beta_next`` where
    ``beta_next`` is the beta formula evaluated at the current gamma.
    """
    rho = params.rho_value
    gamma, alpha, beta = accel_coefficients(params.a, params.b, params.sigma, rho, params.nblocks)
    beta_next = 1.0 - gamma * rho / params.nblocks
    return replace(params, gamma=gamma, alpha=alpha, beta=beta,
                   a=gamma * beta_next, b=params.b / math.sqrt(beta))


def check_restart(f_prev: float, f_next: float, gradnorm: float, c1: float) -> bool:
    """True when the decrease is strictly below ``c1 * gradnorm**2``."""
    return (f_prev - f_next) < c1 * gradnorm * gradnorm


@dataclass
class SolverConfig:
    epsilon: float = 1e-2
    c1: float = 1e-4
    max_iters: int = 1000
    selection: str = "random"
    seed: int = 0
    sigma: float = 1e-3
    rho: float | None = None
    a0: float | None = None
    b0: float = 1.0
    rank: int | None = None
    init: str = "identity"
    restart_anchor: str = "Y"
    inner_tol: float | None = None
    inner_max_steps: int = 100
    precondition: bool = True
    inner_solver: str = "rtr"
    carry: str = "P"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if not self.c1 > 0:
            raise ParameterError("restart constant c1 must be positive")
        if self.selection not in ("random", "round_robin"):
            raise ParameterError(f"unknown block selection {self.selection!r}")
        if self.restart_anchor not in ("Y", "P"):
            raise ParameterError(f"restart anchor must be 'Y' or 'P', got {self.restart_anchor!r}")
        if self.carry not in ("Y", "P"):
            raise ParameterError(f"carry must be 'Y' or 'P', got {self.carry!r}")
        if self.inner_solver not in ("rtr", "rgd"):
            raise ParameterError(f"unknown inner solver {self.inner_solver!r}")
        if self.max_iters < 0:
            raise ParameterError("max_iters must be non-negative")

    @property
    def block_tol(self) -> float:
        return self.inner_tol if self.inner_tol is not None else max(1e-3 * self.epsilon, 1e-8)

    def rank_for(self, d: int) -> int:
        r = d + 2 if self.rank is None else self.rank
        if r < d:
            raise ParameterError(f"rank {r} below dimension {d}")
        return r

    def initial_accel(self, nblocks: int) -> AccelParams:
        a0 = 1.0 / nblocks if self.a0 is None else self.a0
        return AccelParams(self.sigma, a0, self.b0, nblocks, self.rho)


@dataclass
class IterRecord:
    iter: int
    f: float
    gradnorm: float
    restarted: bool = False
    block: int = -1
    millis: float = 0.0
    gamma: float = math.nan
    alpha: float = math.nan
    beta: float = math.nan
    inner_steps: int = 0


TRACE_COLUMNS = ("iter", "f", "gradnorm", "restarted", "block", "millis")


@dataclass
class SolveReport:
    method: str
    records: list = field(default_factory=list)
    Y: np.ndarray | None = None
    termination: str = ""
    rank: int = 0

    @property
    def iterations(self) -> int:
        return self.records[-1].iter if self.records else 0

    @property
    def f(self) -> np.ndarray:
        return np.array([r.f for r in self.records])

    @property
    def gradnorm(self) -> np.ndarray:
        return np.array([r.gradnorm for r in self.records])

    @property
    def restarts(self) -> int:
        return sum(r.restarted for r in self.records)

    def trace_rows(self) -> list[tuple]:
        return [(r.iter, r.f, r.gradnorm, r.restarted, r.block, r.millis) for r in self.records]

    def to_csv(self, timing: bool = False) -> str:
        """Trace as CSV; the wall-clock column is left blank unless ``timing`` is set."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([r.iter, repr(r.f), repr(r.gradnorm), int(r.restarted), r.block,
                        f"{r.millis:.3f}" if timing else ""])
        return buf.getvalue()

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "method": self.method,
            "termination": self.termination,
            "iterations": self.iterations,
            "restarts": self.restarts,
            "rank": self.rank,
            "f_initial": self.records[0].f if self.records else None,
            "f_final": last.f if last else None,
            "gradnorm_final": last.gradnorm if last else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


# ---------------------------------------------------------------- evaluation


def local_slab(Y: np.ndarray, problem: BlockProblem) -> np.ndarray:
    return Y[:, problem.local_cols]


def evaluate(problems: list[BlockProblem], Y: np.ndarray) -> tuple[float, float]:
    """Objective (sum of owned-edge costs) and global Riemannian gradient norm.

    Both are accumulated over blocks in block order, the same reduction the
    distributed simulator performs, so the two produce identical numbers.
    """
    f = 0.0
    g2 = 0.0
    for bp in problems:
        slab = local_slab(Y, bp)
        f += bp.owned_cost(slab)
        g2 += float(np.sum(bp.gradient_local(slab) ** 2))
    return f, math.sqrt(g2)


class BlockSelector:
    def __init__(self, nblocks: int, rule: str, seed: int):
        self.nblocks = nblocks
        self.rule = rule
        self.rng = np.random.default_rng(seed)
        self.count = 0

    def next(self) -> int:
        if self.rule == "round_robin":
            b = self.count % self.nblocks
        else:
            b = int(self.rng.integers(self.nblocks))
        self.count += 1
        return b


# --------------------------------------------------------------------- steps


def minimize_local(problem: BlockProblem, own: np.ndarray, rep: np.ndarray, config: SolverConfig):
    """Minimize block ``problem`` from ``own`` with its neighbor columns frozen at ``rep``."""
    C = problem.coupling(rep)
    return problem.minimize(own, C, config.block_tol, config.inner_max_steps, config.precondition,
                            config.inner_solver)


def block_minimize(problem: BlockProblem, anchor: np.ndarray, config: SolverConfig):
    """Minimize block ``problem`` starting from, and with neighbors frozen at, ``anchor``."""
    return minimize_local(problem, anchor[:, problem.own_cols], anchor[:, problem.rep_cols], config)


def replace_block(base: np.ndarray, problem: BlockProblem, block_value: np.ndarray) -> np.ndarray:
    out = base.copy()
    out[:, problem.own_cols] = block_value
    return out


def rbcd_step(problems: list[BlockProblem], Y: np.ndarray, block: int, config: SolverConfig) -> np.ndarray:
    """Block minimization anchored at ``Y``; only ``block`` changes."""
    bp = problems[block]
    return replace_block(Y, bp, block_minimize(bp, Y, config).Y)


@dataclass
class IRBCDState:
    Y: np.ndarray
    P: np.ndarray
    V: np.ndarray
    accel: AccelParams


def owned_total(problems: list[BlockProblem], X: np.ndarray) -> float:
    f = 0.0
    for bp in problems:
        f += bp.owned_cost(local_slab(X, bp))
    return f


def candidate_decrease(bp: BlockProblem, base_own: np.ndarray, base_rep: np.ndarray, new_block: np.ndarray,
                       offset: float = 0.0) -> float:
    """``f(Y^k) - f(Y^{k+1})`` when ``Y^{k+1}`` is the base point with ``new_block`` inserted.

    Only the selected block's restricted objective is re-evaluated;
    ``offset`` is ``f(Y^k) - f(base)`` (zero when the base is ``Y^k``).
    """
    C = bp.coupling(base_rep)
    return offset - bp.change(base_own, new_block, bp.egrad(base_own, C))


def irbcd_step(problems: list[BlockProblem], state: IRBCDState, block: int, config: SolverConfig, d: int,
               f_Y: float = 0.0):
    """Extrapolate, minimize one block at ``P`` and update the momentum sequence.

    Returns ``(candidate, coeffs, inner_result, decrease)`` where the
    candidate already carries the advanced auxiliary parameters and
    ``decrease = f(Y^k) - f(candidate.Y)``. The restart test is applied by the
    caller.
    """
    coeffs = update_accel(state.accel)
    Y, V = state.Y, state.V
    P = geometry.project_state(coeffs.alpha * V + (1.0 - coeffs.alpha) * Y, d)
    bp = problems[block]
    res = block_minimize(bp, P, config)
    base = P if config.carry == "P" else Y
    offset = f_Y - owned_total(problems, P) if config.carry == "P" else 0.0
    decrease = candidate_decrease(bp, base[:, bp.own_cols], base[:, bp.rep_cols], res.Y, offset)
    Y_new = replace_block(base, bp, res.Y)
    V_new = geometry.project_state(coeffs.beta * V + (1.0 - coeffs.beta) * P + coeffs.gamma * (Y_new - P), d)
    return IRBCDState(Y_new, P, V_new, coeffs), coeffs, res, decrease


def restart(problems: list[BlockProblem], state: IRBCDState, Y_prev: np.ndarray, block: int,
            config: SolverConfig, initial: AccelParams):
    """Recompute ``block`` by monotone minimization, set ``V = Y`` and reset ``(a, b)``.

    With ``restart_anchor='Y'`` the block is re-solved against ``Y_prev`` so
    ``f`` cannot increase; with ``'P'`` the step against ``state.P`` is
    repeated. Returns the new state and the inner-solver result.
    """
    bp = problems[block]
    anchor = Y_prev if config.restart_anchor == "Y" else state.P
    res = block_minimize(bp, anchor, config)
    Y_new = replace_block(Y_prev, bp, res.Y)
    return IRBCDState(Y_new, state.P, Y_new.copy(), initial), res


# --------------------------------------------------------------------- driver


def solve(data: DataMatrix, partition, method: str = "irbcd", config: SolverConfig | None = None,
          Y0: np.ndarray | None = None, callback=None) -> SolveReport:
    """Run RBCD or IRBCD until ``||grad f|| <= epsilon`` or ``max_iters``."""
    config = config or SolverConfig()
    if method not in METHODS:
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    d = data.d
    r = config.rank_for(d)
    problems = build_block_problems(data, partition.assignment, partition.num_blocks)
    Y = initial_state(data.graph, r, config.init) if Y0 is None else np.array(Y0, dtype=float)
    data.check_state(Y)
    r = Y.shape[0]
    selector = BlockSelector(partition.num_blocks, config.selection, config.seed)
    initial = config.initial_accel(partition.num_blocks)
    state = IRBCDState(Y, Y, Y.copy(), initial)
    report = SolveReport(method, rank=r)
    t0 = time.perf_counter()
    f, g = evaluate(problems, Y)
    report.records.append(IterRecord(0, f, g))
    if callback:
        callback(state, report.records[-1])
    k = 0
    while g > config.epsilon and k < config.max_iters:
        block = selector.next()
        restarted = False
        coeffs = None
        if method == "rbcd":
            res = block_minimize(problems[block], state.Y, config)
            Y_new = replace_block(state.Y, problems[block], res.Y)
            state = IRBCDState(Y_new, Y_new, Y_new, initial)
        else:
            cand, coeffs, res, decrease = irbcd_step(problems, state, block, config, d, f)
            if check_restart(f, f - decrease, g, config.c1):
                state, res = restart(problems, cand, state.Y, block, config, initial)
                restarted = True
            else:
                state = cand
        k += 1
        f, g = evaluate(problems, state.Y)
        rec = IterRecord(k, f, g, restarted, block, 1e3 * (time.perf_counter() - t0), inner_steps=res.steps)
        if coeffs is not None:
            rec.gamma, rec.alpha, rec.beta = coeffs.gamma, coeffs.alpha, coeffs.beta
        report.records.append(rec)
        if callback:
            callback(state, rec)
    report.Y = state.Y
    report.termination = "converged" if g <= config.epsilon else "max_iters"
    return report
