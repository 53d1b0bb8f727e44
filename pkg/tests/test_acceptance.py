"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Solver runs here use chordal initialization, round-robin block selection and
``c1 = 1e-6``; see ``ACCEPT`` below.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_graph, random_trajectory
from dpgo import geometry
from dpgo.distsim import run_distributed
from dpgo.errors import ProtocolViolation
from dpgo.graph import generate_synthetic, read_g2o, trajectory_cost
from dpgo.partition import Partition, make_partition, metrics
from dpgo.problem import build_data_matrix, objective, riemannian_gradient
from dpgo.rounding import centralized_oracle, round_solution, verify
from dpgo.solver import SolverConfig, solve

pytestmark = pytest.mark.slow

ACCEPT = dict(init="chordal", selection="round_robin", c1=1e-6)
FEASIBILITY_TOL = 1e-8
DATASET_ENV = "DPGO_DATASETS"

# largest Stiefel violation seen by every monitored solver run in this module
_feasibility = []


def record(num, title, ok, detail):
    line = f"C{num:02d} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def monitored_solve(data, part, method, config):
    worst = [0.0]

    def watch(state, rec):
        for X in (state.Y, state.P, state.V):
            worst[0] = max(worst[0], geometry.stiefel_error(X, data.d))

    rep = solve(data, part, method, config, callback=watch)
    _feasibility.append(worst[0])
    return rep


# ----------------------------------------------------------------- criterion 1


def test_c01_quadratic_form_equivalence():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        d = 2 + k % 2
        n = int(rng.integers(2, 31))
        g = random_graph(rng, n, d, extra=int(rng.integers(0, 2 * n)))
        data = build_data_matrix(g)
        traj = random_trajectory(rng, n, d)
        direct = trajectory_cost(g, traj)
        quad = objective(data, traj.lifted())
        worst = max(worst, abs(quad - direct) / max(abs(direct), 1e-300))
    elapsed = time.perf_counter() - t0
    record(1, "quadratic form equivalence", worst <= 1e-10 and elapsed < 10,
           f"max rel err {worst:.2e} (<= 1e-10), {elapsed:.2f}s (< 10s) over 50 graphs")


# ----------------------------------------------------------------- criterion 2


def fd_gradient(data, Y, h=1e-5):
    """Central differences of f along the tangent projection of every coordinate direction."""
    d = data.d
    out = np.zeros_like(Y)
    for idx in np.ndindex(*Y.shape):
        E = np.zeros_like(Y)
        E[idx] = 1.0
        xi = geometry.tangent_project_state(Y, E, d)
        fp = objective(data, geometry.retract(Y, h * xi, d))
        fm = objective(data, geometry.retract(Y, -h * xi, d))
        out[idx] = (fp - fm) / (2 * h)
    return out


def test_c02_gradient_finite_differences():
    rng = np.random.default_rng(202)
    worst = 0.0
    for k in range(50):
        d = 2 + k % 2
        n = int(rng.integers(3, 13))
        g = random_graph(rng, n, d)
        data = build_data_matrix(g)
        Y = geometry.random_state(n, d + 2, d, rng)
        rg = riemannian_gradient(data, Y)
        # the finite-difference vector lies in the tangent space, so compare after projection
        fd = geometry.tangent_project_state(Y, fd_gradient(data, Y), d)
        worst = max(worst, np.linalg.norm(fd - rg) / np.linalg.norm(rg))
    record(2, "gradient vs finite differences", worst <= 1e-6,
           f"max rel err {worst:.2e} (<= 1e-6) over 50 (Y, graph) pairs")


# ----------------------------------------------------------------- criterion 4

C4_INSTANCES = [("grid3d", (4, 4, 4)), ("grid3d", (5, 5, 5)), ("grid3d", (6, 6, 6)), ("grid3d", (7, 7, 7)),
                ("grid3d", (8, 8, 7)), ("torus2_lattice", (8, 8)), ("torus2_lattice", (12, 10)),
                ("torus2_lattice", (16, 14)), ("torus2_lattice", (20, 18)), ("torus2_lattice", (25, 20))]


def test_c04_convergence_properties():
    eps = 0.01
    failures = []
    worst_rise = -np.inf
    sizes = []
    for seed in range(2):
        for kind, size in C4_INSTANCES:
            g, _ = generate_synthetic(kind, size, seed=100 + seed, loop_prob=0.5)
            data = build_data_matrix(g)
            part = make_partition(g, 4, "highest", seed=seed)
            cfg = SolverConfig(seed=seed, epsilon=eps, max_iters=5000, **ACCEPT)
            rep = monitored_solve(data, part, "irbcd", cfg)
            sizes.append(g.n)
            f, gn = rep.f, rep.gradnorm
            rise = float(np.max(np.diff(f))) if len(f) > 1 else -np.inf
            worst_rise = max(worst_rise, rise)
            short = [k for k in range(1, len(rep.records))
                     if not rep.records[k].restarted and f[k - 1] - f[k] < cfg.c1 * gn[k - 1] ** 2]
            if rise > 1e-9:
                failures.append(f"{kind}{size}/s{seed}: f rose by {rise:.2e}")
            if short:
                failures.append(f"{kind}{size}/s{seed}: {len(short)} non-restart steps below c1*g^2")
            if gn[-1] > eps:
                failures.append(f"{kind}{size}/s{seed}: gradnorm {gn[-1]:.3g} after {rep.iterations} iterations")
    record(4, "monotone descent, sufficient decrease, grad <= 0.01", not failures and len(sizes) == 20,
           f"20 instances with {min(sizes)}-{max(sizes)} poses, max f increase {worst_rise:.2e}"
           + (f"; failures: {failures}" if failures else ""))


# ----------------------------------------------------------------- criterion 5


def c5_instances():
    for seed in range(5):
        yield "grid3d", (8, 8, 8), 0.9, seed
    for seed in range(5):
        yield "torus2_lattice", (25, 20), 0.8, seed


def test_c05_acceleration():
    N = 5
    ratios, it_r, it_i, per_robot = [], [], [], []
    for kind, size, lp, seed in c5_instances():
        g, _ = generate_synthetic(kind, size, seed=seed, loop_prob=lp)
        data = build_data_matrix(g)
        part = make_partition(g, N, "highest", seed=seed)
        cfg = SolverConfig(seed=seed, max_iters=5000, **ACCEPT)
        r = monitored_solve(data, part, "rbcd", cfg)
        i = monitored_solve(data, part, "irbcd", cfg)
        assert r.termination == i.termination == "converged"
        it_r.append(r.iterations)
        it_i.append(i.iterations)
        ratios.append(i.iterations / r.iterations)
        per_robot.append(i.iterations / N)
    median_ratio = float(np.median(it_i)) / float(np.median(it_r))
    ok = median_ratio <= 0.8 and max(per_robot) <= 150
    record(5, "IRBCD acceleration", ok,
           f"median iterations irbcd {np.median(it_i):g} vs rbcd {np.median(it_r):g}, ratio {median_ratio:.2f} "
           f"(<= 0.8); per-instance ratios {[round(x, 2) for x in ratios]}; "
           f"max per-robot irbcd iterations {max(per_robot):g} (<= 150)")


# ----------------------------------------------------------------- criterion 6


def test_c06_partitioning():
    N = 8
    rows = []
    for seed in range(10):
        g, _ = generate_synthetic("manhattan2d", 1000, seed=seed, loop_prob=0.5)
        seq = metrics(g, make_partition(g, N, "sequential"))
        fast = metrics(g, make_partition(g, N, "fast", seed=seed))
        high = metrics(g, make_partition(g, N, "highest", seed=seed))
        rows.append((high.cut_edges / seq.cut_edges, high.balance, high.cut_edges, fast.cut_edges))
    rows = np.array(rows)
    worst_ratio = rows[:, 0].max()
    worst_balance = rows[:, 1].max()
    med_high, med_fast = np.median(rows[:, 2]), np.median(rows[:, 3])
    ok = worst_ratio <= 0.30 and worst_balance <= 1.05 and med_high <= med_fast
    record(6, "partition quality", ok,
           f"max highest/sequential cut {worst_ratio:.3f} (<= 0.30), max balance {worst_balance:.3f} (<= 1.05), "
           f"median cut highest {med_high:g} <= fast {med_fast:g}")


# ----------------------------------------------------------------- criterion 7

C7_INSTANCES = [("grid3d", (4, 4, 4)), ("grid3d", (4, 4, 3)), ("grid3d", (3, 3, 3)), ("torus2_lattice", (10, 10)),
                ("torus2_lattice", (8, 6)), ("manhattan2d", 100), ("manhattan2d", 60), ("grid3d", (5, 4, 4))]


def test_c07_global_optimality():
    failures = []
    worst_rel = 0.0
    worst_gap = np.inf
    noiseless_gap = 0.0
    for i in range(20):
        kind, size = C7_INSTANCES[i % len(C7_INSTANCES)]
        noise = 0.0 if i % 5 == 4 else 1.0
        g, _ = generate_synthetic(kind, size, seed=200 + i, loop_prob=0.5, noise_scale=noise)
        assert g.n <= 100
        orc = centralized_oracle(g, 5, restarts=2, seed=i)
        data = build_data_matrix(g)
        part = make_partition(g, 4, "highest", seed=i)
        cfg = SolverConfig(seed=i, epsilon=1e-4, max_iters=5000, **ACCEPT)
        rep = monitored_solve(data, part, "irbcd", cfg)
        ver = verify(g, rep.Y, round_solution(rep.Y, g.d))
        rel = abs(ver.f_relaxed - orc.value) / max(abs(orc.value), 1.0)
        worst_rel = max(worst_rel, rel)
        worst_gap = min(worst_gap, ver.gap)
        if noise == 0.0:
            noiseless_gap = max(noiseless_gap, abs(ver.gap))
        if rel > 1e-6 or ver.gap < -1e-9 or (noise == 0.0 and abs(ver.gap) > 1e-9):
            failures.append(f"#{i} {kind}{size}: rel {rel:.2e}, gap {ver.gap:.2e}")
    record(7, "match with centralized optimum", not failures,
           f"max rel err {worst_rel:.2e} (<= 1e-6), min gap {worst_gap:.2e} (>= -1e-9), "
           f"max |gap| noiseless {noiseless_gap:.2e} (<= 1e-9)" + (f"; failures: {failures}" if failures else ""))


# ----------------------------------------------------------------- criterion 8


def test_c08_distributed_equivalence():
    g, _ = generate_synthetic("grid3d", (5, 4, 4), seed=7, loop_prob=0.5)
    data = build_data_matrix(g)
    mismatches = []
    violations = 0
    for seed in range(10):
        part = make_partition(g, 4, "highest", seed=seed)
        method = "irbcd" if seed % 2 == 0 else "rbcd"
        cfg = SolverConfig(seed=seed, max_iters=150, selection="random" if seed < 5 else "round_robin",
                           init="chordal")
        ref = solve(data, part, method, cfg)
        try:
            dist, _ = run_distributed(data, part, method, cfg)
        except ProtocolViolation:
            violations += 1
            continue
        same = [r[:5] for r in ref.trace_rows()] == [r[:5] for r in dist.trace_rows()]
        if not (same and np.array_equal(ref.Y, dist.Y)):
            mismatches.append(seed)

    rng = np.random.default_rng(8)
    toy = random_graph(rng, 6, 3, extra=0)
    toy_part = Partition(np.array([0, 0, 0, 1, 1, 1]), 2)
    _, comm = run_distributed(toy, toy_part, "irbcd", SolverConfig(max_iters=20, epsilon=1e-12))
    per_round = {m.get("pose_share", 0) for m in comm.per_round_messages}
    ok = not mismatches and violations == 0 and per_round == {2}
    record(8, "distributed equivalence", ok,
           f"{10 - len(mismatches) - violations}/10 seeds with identical traces, {violations} protocol violations, "
           f"two-block toy pose_share per round {sorted(per_round)} over {comm.rounds} rounds")


# ----------------------------------------------------------------- criterion 9


def brute_cvolume(graph, assignment):
    nbrs = [set() for _ in range(graph.n)]
    for e in graph.edges:
        u, v = graph.index[e.src], graph.index[e.dst]
        nbrs[u].add(v)
        nbrs[v].add(u)
    total = 0
    for v in range(graph.n):
        total += len({int(assignment[u]) for u in nbrs[v]} - {int(assignment[v])})
    return total / graph.n


def test_c09_cvolume():
    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(10, 60))
        g = random_graph(rng, n, 2, extra=int(rng.integers(0, 2 * n)))
        k = int(rng.integers(1, 7))
        part = Partition(rng.integers(0, k, size=n), k)
        worst = max(worst, abs(metrics(g, part).cvolume - brute_cvolume(g, part.assignment)))

    consistent = 0
    detail = []
    for seed in range(10):
        g, _ = generate_synthetic("grid3d", (5, 5, 4), seed=seed, loop_prob=0.5)
        data = build_data_matrix(g)
        a = make_partition(g, 4, "highest", seed=seed)
        b = make_partition(g, 4, "sequential")
        ca, cb = metrics(g, a).cvolume, metrics(g, b).cvolume
        cfg = SolverConfig(max_iters=2, epsilon=1e-12)
        sa = run_distributed(data, a, "irbcd", cfg)[1].pose_share_scalars_per_round()
        sb = run_distributed(data, b, "irbcd", cfg)[1].pose_share_scalars_per_round()
        if ca != cb and (ca < cb) == (sa < sb):
            consistent += 1
        detail.append((round(ca, 3), round(cb, 3)))
    record(9, "Cvolume metric and traffic", worst == 0.0 and consistent == 10,
           f"recount max diff {worst:g} on 20 partitions; lower Cvolume gave fewer pose_share scalars in "
           f"{consistent}/10 paired runs")


# ----------------------------------------------------------------- criterion 3


def test_c03_feasibility():
    # extra runs covering the options the other criteria do not exercise
    g, _ = generate_synthetic("torus2_lattice", (8, 6), seed=3, loop_prob=0.5)
    data = build_data_matrix(g)
    part = make_partition(g, 3, "highest", seed=0)
    variants = [dict(), dict(selection="round_robin"), dict(carry="Y"), dict(restart_anchor="P"),
                dict(inner_solver="rgd"), dict(init="odometry", c1=1e-3)]
    for extra in variants:
        for method in ("rbcd", "irbcd"):
            monitored_solve(data, part, method, SolverConfig(max_iters=200, **extra))
    worst = max(_feasibility)
    record(3, "manifest feasibility", worst <= FEASIBILITY_TOL,
           f"max ||Y_i^T Y_i - I|| {worst:.2e} (<= 1e-8) over {len(_feasibility)} monitored runs")


# ---------------------------------------------------------------- criterion 10

DATASETS = {
    "sphere": (("sphere2500.g2o", "sphere.g2o"), lambda f: abs(f - 1687) <= 0.5, "1687"),
    "garage": (("parking-garage.g2o", "garage.g2o"), lambda f: 1.26 <= f <= 1.33, "[1.26, 1.33]"),
    "manhattan": (("manhattan.g2o",), lambda f: abs(f - 193.8) <= 0.5, "193.8 +/- 0.5"),
    "city": (("city10000.g2o", "city.g2o"), lambda f: abs(f - 638.6) <= 0.5, "638.6 +/- 0.5"),
}


def test_c10_benchmark_datasets():
    root = os.environ.get(DATASET_ENV)
    found = {}
    if root:
        for name, (files, _, _) in DATASETS.items():
            for fname in files:
                if (Path(root) / fname).exists():
                    found[name] = Path(root) / fname
                    break
    if not found:
        line = f"C10 SKIP benchmark datasets: none found (set {DATASET_ENV} to a directory of g2o files)"
        ACCEPTANCE_LINES.append(line)
        pytest.skip(line)
    results = []
    ok = True
    for name, path in found.items():
        g, _ = read_g2o(path)
        data = build_data_matrix(g)
        part = make_partition(g, 5, "highest", seed=0)
        rep = solve(data, part, "irbcd", SolverConfig(rank=5, max_iters=20000, **ACCEPT))
        f = rep.f[-1]
        good = DATASETS[name][1](f)
        ok &= good
        results.append(f"{name} {f:.4g} (target {DATASETS[name][2]})")
    record(10, "benchmark objective values", ok, "; ".join(results))
