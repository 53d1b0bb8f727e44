"""Command-line front end: ``dpgo generate | partition | solve | bench``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-convergence.
The default output directory is taken from ``DPGO_OUTPUT_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .distsim import run_distributed
from .errors import DPGOError, ParameterError
from .graph import SYNTHETIC_KINDS, generate_synthetic, read_g2o, serialize_g2o
from .partition import DEFAULT_EPSILON, make_partition, metrics
from .problem import build_data_matrix
from .rounding import round_solution, verify
from .solver import METHODS, SolverConfig, solve

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3
OUTPUT_ENV = "DPGO_OUTPUT_DIR"
PARTITION_METHODS = ("sequential", "fast", "eco", "strong", "highest")


class UsageError(Exception):
    pass


def substream_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed for the named consumer of the manifest seed."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class RunManifest:
    """Everything needed to reproduce one run."""

    input: str | None = None
    generator: dict | None = None
    num_blocks: int = 4
    partition: str = "highest"
    epsilon_partition: float = DEFAULT_EPSILON
    method: str = "irbcd"
    solver: dict = field(default_factory=dict)
    seed: int = 0
    output_dir: str | None = None
    distributed: bool = False
    name: str | None = None

    def __post_init__(self):
        if (self.input is None) == (self.generator is None):
            raise ParameterError("a manifest needs exactly one of 'input' and 'generator'")
        if self.partition not in PARTITION_METHODS:
            raise ParameterError(f"unknown partition method {self.partition!r}")
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}")
        known = {f.name for f in fields(SolverConfig)}
        unknown = set(self.solver) - known
        if unknown:
            raise ParameterError(f"unknown solver settings {sorted(unknown)}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        raw = json.loads(text)
        names = {f.name for f in fields(cls)}
        extra = set(raw) - names
        if extra:
            raise ParameterError(f"unknown manifest keys {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())

    def solver_config(self) -> SolverConfig:
        opts = dict(self.solver)
        opts.setdefault("seed", substream_seed(self.seed, "solver"))
        return SolverConfig(**opts)

    def load_graph(self):
        if self.input is not None:
            graph, _ = read_g2o(self.input)
            return graph
        gen = dict(self.generator)
        kind = gen.pop("kind")
        size = gen.pop("size", None)
        if isinstance(size, list):
            size = tuple(size)
        gen.setdefault("seed", substream_seed(self.seed, "generator"))
        graph, _ = generate_synthetic(kind, size, **gen)
        return graph

    def make_partition(self, graph):
        return make_partition(graph, self.num_blocks, self.partition, self.epsilon_partition,
                              seed=substream_seed(self.seed, "partition"))


def output_dir(arg: str | None) -> Path:
    path = Path(arg or os.environ.get(OUTPUT_ENV) or "dpgo_out")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------ commands


def _partition_row(graph, name, part) -> dict:
    row = {"method": name}
    row.update(metrics(graph, part).to_dict())
    return row


def _assignment_csv(graph, part) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "robot", "keyframe", "block"])
    for i, p in enumerate(graph.nodes):
        w.writerow([i, p.robot, p.keyframe, int(part.assignment[i])])
    return buf.getvalue()


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned plain-text table."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def cmd_partition(manifest: RunManifest, run_all: bool = False, out=None) -> int:
    out = out or sys.stdout
    graph = manifest.load_graph()
    outdir = output_dir(manifest.output_dir)
    names = PARTITION_METHODS if run_all else (manifest.partition,)
    rows = []
    for name in names:
        m = RunManifest(**{**asdict(manifest), "partition": name})
        part = m.make_partition(graph)
        rows.append(_partition_row(graph, name, part))
        (outdir / f"assignment_{name}.csv").write_text(_assignment_csv(graph, part))
    (outdir / "partition_metrics.json").write_text(json.dumps(rows, indent=2) + "\n")
    out.write(format_table(rows, ["method", "cut_edges", "balance", "cvolume"]))
    return EXIT_OK


def run_one(manifest: RunManifest, method: str | None = None, graph=None):
    """Partition, solve, round and verify one manifest; returns a result dict and the report."""
    graph = manifest.load_graph() if graph is None else graph
    method = method or manifest.method
    part = manifest.make_partition(graph)
    data = build_data_matrix(graph)
    config = manifest.solver_config()
    comm = None
    if manifest.distributed:
        report, comm = run_distributed(data, part, method, config)
    else:
        report = solve(data, part, method, config)
    traj = round_solution(report.Y, graph.d)
    ver = verify(graph, report.Y, traj)
    pm = metrics(graph, part)
    result = {
        "name": manifest.name,
        "method": method,
        "partition": manifest.partition,
        "num_blocks": manifest.num_blocks,
        "num_poses": graph.n,
        "num_edges": graph.m,
        "solve": report.summary(),
        "verification": ver.to_dict(),
        "partition_metrics": pm.to_dict(),
        "avg_iterations": report.iterations / manifest.num_blocks,
    }
    if comm is not None:
        result["communication"] = comm.to_dict()
    return result, report, traj, graph


def cmd_solve(manifest: RunManifest, compare: bool = False, timing: bool = False, out=None) -> int:
    out = out or sys.stdout
    outdir = output_dir(manifest.output_dir)
    (outdir / "manifest.json").write_text(manifest.to_json() + "\n")
    methods = METHODS if compare else (manifest.method,)
    graph = manifest.load_graph()
    code = EXIT_OK
    rows = []
    for method in methods:
        result, report, traj, graph = run_one(manifest, method, graph)
        (outdir / f"trace_{method}.csv").write_text(report.to_csv(timing=timing))
        (outdir / f"report_{method}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        (outdir / f"trajectory_{method}.g2o").write_text(serialize_g2o(graph, traj))
        rows.append({
            "method": method,
            "iterations": report.iterations,
            "f": report.records[-1].f,
            "gradnorm": report.records[-1].gradnorm,
            "gap": result["verification"]["gap"],
            "termination": report.termination,
        })
        if report.termination != "converged":
            code = EXIT_NONCONVERGED
    out.write(format_table(rows, ["method", "iterations", "f", "gradnorm", "gap", "termination"]))
    return code


BENCH_COLUMNS = ["name", "method", "partition", "num_blocks", "objective", "iterations", "avg_iterations",
                 "cut_edges", "cvolume", "termination", "error"]


def cmd_bench(manifests: list[RunManifest], outdir_arg: str | None = None, out=None) -> int:
    out = out or sys.stdout
    rows = []
    failed = nonconverged = False
    for i, m in enumerate(manifests):
        row = {"name": m.name or f"run{i}", "method": m.method, "partition": m.partition, "num_blocks": m.num_blocks}
        try:
            result, report, _, _ = run_one(m)
        except (DPGOError, OSError, ValueError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            failed = True
            rows.append(row)
            continue
        row.update({
            "objective": result["solve"]["f_final"],
            "iterations": report.iterations,
            "avg_iterations": result["avg_iterations"],
            "cut_edges": result["partition_metrics"]["cut_edges"],
            "cvolume": result["partition_metrics"]["cvolume"],
            "termination": report.termination,
        })
        nonconverged |= report.termination != "converged"
        rows.append(row)
    outdir = output_dir(outdir_arg)
    (outdir / "bench.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    text = format_table(rows, BENCH_COLUMNS)
    (outdir / "bench.txt").write_text(text)
    out.write(text)
    if failed:
        return EXIT_DATA
    return EXIT_NONCONVERGED if nonconverged else EXIT_OK


def cmd_generate(kind: str, size, out_path: str, seed: int, **params) -> int:
    graph, truth = generate_synthetic(kind, size, seed=seed, **params)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(serialize_g2o(graph, truth))
    return EXIT_OK


# ------------------------------------------------------------------ parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str):
    parts = [int(p) for p in text.split(",") if p]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _add_source(p):
    p.add_argument("--manifest", help="JSON run manifest; explicit flags override its values")
    p.add_argument("--input", help="g2o file")
    p.add_argument("--kind", choices=SYNTHETIC_KINDS, help="synthetic generator instead of --input")
    p.add_argument("--size", type=_size, help="generator size, e.g. 8,8,8 or 1000")
    p.add_argument("--loop-prob", type=float)
    p.add_argument("--noise", type=float, help="generator noise scale")
    p.add_argument("-N", "--num-blocks", type=int)
    p.add_argument("--epsilon-partition", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", help=f"output directory (default: ${OUTPUT_ENV} or ./dpgo_out)")


def _add_solver(p):
    p.add_argument("--partition", choices=PARTITION_METHODS)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--epsilon", type=float, help="gradient-norm stopping threshold")
    p.add_argument("--c1", type=float, help="restart constant")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--selection", choices=("random", "round_robin"))
    p.add_argument("--sigma", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--init", choices=("identity", "odometry", "chordal"))
    p.add_argument("--restart-anchor", choices=("Y", "P"))
    p.add_argument("--distributed", action="store_true", help="run on the simulated robot network")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpgo", description="Distributed pose-graph optimization toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic g2o instance")
    g.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    g.add_argument("--size", type=_size)
    g.add_argument("--loop-prob", type=float, default=0.3)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    p = sub.add_parser("partition", help="partition a pose graph and report cut/balance/cvolume")
    _add_source(p)
    p.add_argument("--partition", choices=PARTITION_METHODS)
    p.add_argument("--all", action="store_true", help="run the baseline and all four presets")

    s = sub.add_parser("solve", help="partition, solve, round and verify")
    _add_source(s)
    _add_solver(s)
    s.add_argument("--compare", action="store_true", help="run both rbcd and irbcd")
    s.add_argument("--timing", action="store_true", help="fill the wall-clock column of the trace")

    b = sub.add_parser("bench", help="run a list of manifests and tabulate the results")
    b.add_argument("manifests", nargs="*")
    b.add_argument("--output-dir")
    return parser


_SOLVER_FLAGS = {
    "epsilon": "epsilon", "c1": "c1", "max_iters": "max_iters", "selection": "selection", "sigma": "sigma",
    "rank": "rank", "init": "init", "restart_anchor": "restart_anchor",
}


def manifest_from_args(args) -> RunManifest:
    base = asdict(RunManifest.load(args.manifest)) if args.manifest else {}
    if args.input is not None or args.kind is not None:
        if args.input is not None and args.kind is not None:
            raise UsageError("use either --input or --kind, not both")
        base["input"] = args.input
        base["generator"] = None
        if args.kind is not None:
            gen = {"kind": args.kind}
            if args.size is not None:
                gen["size"] = list(args.size) if isinstance(args.size, tuple) else args.size
            if args.loop_prob is not None:
                gen["loop_prob"] = args.loop_prob
            if args.noise is not None:
                gen["noise_scale"] = args.noise
            base["generator"] = gen
    if "input" not in base and "generator" not in base:
        raise UsageError("an input is required: --input, --kind or --manifest")
    for key in ("num_blocks", "epsilon_partition", "seed", "output_dir", "partition", "method"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    solver = dict(base.get("solver", {}))
    for flag, key in _SOLVER_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            solver[key] = val
    base["solver"] = solver
    if getattr(args, "distributed", False):
        base["distributed"] = True
    return RunManifest(**base)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "generate":
            return cmd_generate(args.kind, args.size, args.out, args.seed, loop_prob=args.loop_prob,
                                noise_scale=args.noise)
        if args.command == "bench":
            manifests = [RunManifest.load(p) for p in args.manifests]
            return cmd_bench(manifests, args.output_dir)
        manifest = manifest_from_args(args)
        if args.command == "partition":
            return cmd_partition(manifest, run_all=args.all)
        return cmd_solve(manifest, compare=args.compare, timing=args.timing)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ParameterError as exc:
        print(f"dpgo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DPGOError, OSError, json.JSONDecodeError) as exc:
        print(f"dpgo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
