"""Command line interface: ``verify``, ``multistep``, ``gen-bench`` and ``compare``.

Exit codes: 0 the property holds, 1 it does not (a witness is written),
2 unknown or timeout, 3 malformed input or usage, 4 output not writable.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .domain import InputRegion
from .fb import Status, Verdict
from .model import GnnArch, JobGraph, StructureError, TransitionSystem, features_to_input, gnn_scores, input_to_features
from .multistep import ENCODINGS, check_with_trace_enumeration
from .specs import (MODES, FeatureSchema, build_k_locality, build_single_step_sp, build_tstep_sp, engine_for,
                    gen_benchmarks, verify_single_step)

EXIT_ERROR = 3
EXIT_UNWRITABLE = 4
REPORT_FIELDS = ("iterations", "lp_calls", "branch_nodes", "traces_explored", "abstract_attempts",
                 "abstract_successes", "strict_eps", "timeout")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "fb-converge+abs"
    encoding: str = "proof-transfer"
    timeout: float = 600.0
    threads: int = 1
    seed: int = 0
    out: Path = Path("out")
    fallback: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}")
        if self.encoding not in ENCODINGS:
            raise UsageError(f"encoding must be one of {ENCODINGS}")
        if not self.timeout > 0:
            raise UsageError("timeout must be positive")
        if self.threads < 1:
            raise UsageError("threads must be at least 1")


@dataclass
class RunReport:
    rows: list = field(default_factory=list)

    def add(self, query: str, mode: str, verdict: Verdict, encoding: str | None = None, spurious=None) -> dict:
        row = {"schema_version": io.SCHEMA_VERSION, "query": query, "mode": mode, "encoding": encoding,
               "verdict": verdict.status.value, "wall_time": float(verdict.stats.get("wall_time", 0.0))}
        for k in REPORT_FIELDS:
            if k in verdict.stats:
                v = verdict.stats[k]
                row[k] = bool(v) if k == "timeout" else (float(v) if k == "strict_eps" else int(v))
        if spurious is not None:
            row["spurious_traces"] = int(spurious)
        io.validate(row, "report", "report row")
        self.rows.append(row)
        return row

    def totals(self) -> dict:
        out = {"queries": len(self.rows)}
        for status in ("hold", "not-hold", "unknown"):
            out[status] = sum(r["verdict"] == status for r in self.rows)
        for k in ("lp_calls", "branch_nodes", "traces_explored"):
            out[k] = sum(r.get(k, 0) for r in self.rows)
        out["wall_time"] = sum(r["wall_time"] for r in self.rows)
        return out

    def write(self, out: Path, title: str = ""):
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.jsonl", "w") as fh:
            for r in self.rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        lines = [title] if title else []
        lines.append(f"{'query':<28} {'mode':<16} {'encoding':<15} {'verdict':<9} {'time[s]':>8} {'LPs':>6} "
                     f"{'nodes':>6} {'traces':>6}")
        for r in self.rows:
            lines.append(f"{r['query']:<28} {r['mode']:<16} {str(r.get('encoding') or '-'):<15} {r['verdict']:<9} "
                         f"{r['wall_time']:>8.2f} {r.get('lp_calls', 0):>6} {r.get('branch_nodes', 0):>6} "
                         f"{r.get('traces_explored', 0):>6}")
        t = self.totals()
        lines.append(f"total: {t['queries']} queries, hold {t['hold']}, not-hold {t['not-hold']}, "
                     f"unknown {t['unknown']}, {t['wall_time']:.2f}s")
        (out / "summary.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# loading

def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_problem(args) -> tuple:
    arch = io.load_arch(args.net)
    spec = io.load_spec(args.spec)
    spec_dir = Path(args.spec).parent
    if args.graph:
        graph = io.load_graph(args.graph)
    elif "graph" in spec:
        graph = io.load_graph(_resolve(spec_dir, spec["graph"]))
    else:
        raise io.InputError(f"{args.spec}: field 'graph': no graph given in the spec or on the command line")
    system = TransitionSystem()
    if getattr(args, "transitions", None):
        system = io.load_transitions(args.transitions)
    elif "transitions" in spec:
        system = io.load_transitions(_resolve(spec_dir, spec["transitions"]))
    feats = spec.get("features")
    schema = FeatureSchema(**feats) if feats else FeatureSchema()
    if graph.dim != arch.dim:
        raise io.InputError(f"{args.graph or spec.get('graph')}: field 'nodes/features': dimension {graph.dim} "
                            f"does not match the architecture's {arch.dim}")
    return arch, graph, spec, system, schema


def locality_region(graph: JobGraph, spec: dict) -> InputRegion:
    x = features_to_input(graph)
    lb, ub = x.copy(), x.copy()
    for node, feat, lo, hi in spec.get("perturb", []):
        if node not in graph.position or not 0 <= feat < graph.dim:
            raise io.InputError(f"spec: field 'perturb': unknown node/feature {(node, feat)}")
        k = graph.position[node] * graph.dim + feat
        lb[k], ub[k] = lo, hi
    return InputRegion(lb, ub)


def sp_witness_valid(graph: JobGraph, arch: GnnArch, query, x, tol: float = 1e-6) -> bool:
    if not bool(query.region.contains(x, tol)):
        return False
    scores = gnn_scores(graph.with_features(input_to_features(graph, x)), arch)
    others = [t[1] for t in query.template.competitors]
    return any(all(scores[v] > scores[j] - tol for j in others) for v in query.adversarial_frontier)


def write_witness(out: Path, graph: JobGraph, x, extra: dict | None = None):
    feats = input_to_features(graph, x)
    data = {"input": list(map(float, x)), "features": {str(v): feats[graph.position[v]].tolist() for v in graph.nodes}}
    data.update(extra or {})
    io.write_json(out / "witness.json", data)


# --------------------------------------------------------------------------
# commands

def cmd_verify(args) -> int:
    cfg = RunConfig(mode=args.mode, encoding=args.encoding, timeout=args.timeout, threads=args.threads,
                    out=Path(args.out), fallback=args.fallback)
    arch, graph, spec, system, schema = load_problem(args)
    if spec["type"] != "sp-single":
        return run_multistep(args, cfg, arch, graph, spec, system, schema, compare=False)
    query = build_single_step_sp(graph, spec["adversary"], spec["alpha_d"], spec["alpha_t"], schema)
    verdict = verify_single_step(query, arch, cfg.mode, cfg.fallback, cfg.timeout, cfg.threads, args.refine)
    if verdict.status == Status.NOT_HOLD and not sp_witness_valid(graph, arch, query, verdict.witness):
        verdict = Verdict(Status.UNKNOWN, stats={**verdict.stats, "witness_rejected": True})
    report = RunReport()
    report.add(Path(args.spec).stem, cfg.mode, verdict)
    _write(cfg.out, report, f"verify {args.spec}")
    if verdict.status == Status.NOT_HOLD:
        write_witness(cfg.out, graph, verdict.witness)
    print(f"{verdict.status.value}")
    return verdict.status.exit_code


def run_multistep(args, cfg: RunConfig, arch, graph, spec, system, schema, compare: bool) -> int:
    if spec["type"] == "sp-multi":
        region, matcher = build_tstep_sp(graph, spec["adversary"], spec["alpha_d"], spec["alpha_t"], spec["T"], arch,
                                         system, schema)
    elif spec["type"] == "locality":
        region = locality_region(graph, spec)
        matcher = build_k_locality(graph, spec["K"], spec.get("T"), system)
    else:
        region = build_single_step_sp(graph, spec["adversary"], spec["alpha_d"], spec["alpha_t"], schema).region
        _, matcher = build_tstep_sp(graph, spec["adversary"], spec["alpha_d"], spec["alpha_t"], 1, arch, system, schema)
    config, abstraction = engine_for(cfg.mode, fallback=cfg.fallback, threads=cfg.threads, refine=args.refine)
    abstraction = abstraction or not args.no_abstraction
    encodings = [cfg.encoding]
    if compare:
        encodings = ["incomplete", cfg.encoding if cfg.encoding != "incomplete" else "proof-transfer"]
    report = RunReport()
    results = {}
    for enc in encodings:
        rep = check_with_trace_enumeration(graph, arch, region, matcher, enc, system, config, abstraction,
                                           exhaustive=compare, timeout=cfg.timeout)
        results[enc] = rep
    spurious = None
    if compare and len(results) > 1:
        complete = [e for e in encodings if e != "incomplete"][0]
        spurious = len(results["incomplete"].trace_set - results[complete].trace_set)
    cfg.out.mkdir(parents=True, exist_ok=True)
    for enc, rep in results.items():
        report.add(Path(args.spec).stem, cfg.mode, rep.verdict, enc, spurious)
        with open(cfg.out / f"traces-{enc}.jsonl", "w") as fh:
            for entry in rep.log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _write(cfg.out, report, f"multistep {args.spec}")
    final = results[encodings[-1]].verdict
    if final.status == Status.NOT_HOLD:
        rep = results[encodings[-1]]
        write_witness(cfg.out, graph, final.witness, {"trace": list(rep.matched[0]) if rep.matched else []})
    for enc, rep in results.items():
        print(f"{enc}: {rep.verdict.status.value} ({len(rep.explored)} traces explored)")
    if spurious is not None:
        print(f"spurious traces: {spurious}")
    return final.status.exit_code


def cmd_multistep(args) -> int:
    cfg = RunConfig(mode=args.mode, encoding=args.encoding, timeout=args.timeout, threads=args.threads,
                    out=Path(args.out), fallback=not args.no_fallback)
    arch, graph, spec, system, schema = load_problem(args)
    return run_multistep(args, cfg, arch, graph, spec, system, schema, args.compare_encodings)


def cmd_gen_bench(args) -> int:
    out = Path(args.out)
    schema = FeatureSchema(args.dim, args.duration, args.tasks)
    arch = io.load_arch(args.net) if args.net else None
    benches = gen_benchmarks(args.seed, args.jobs, args.count, schema, arch, args.metric, args.threshold,
                             args.alpha_d, args.alpha_t, args.hidden, nodes_mean=args.nodes_mean,
                             nodes_std=args.nodes_std, max_nodes=args.max_nodes, spec_type=args.type,
                             horizon=args.horizon)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    if benches:
        io.save_arch(out / "arch.json", benches[0].arch)
    for i, b in enumerate(benches):
        name = f"bench-{args.jobs}j-{i:03d}"
        io.save_graph(out / f"{name}.graph.json", b.graph)
        spec = {"schema_version": io.SCHEMA_VERSION, **b.spec, "graph": f"{name}.graph.json",
                "features": {"dim": schema.dim, "duration": schema.duration, "tasks": schema.tasks}}
        io.write_json(out / f"{name}.spec.json", spec)
        entries.append({"name": name, "graph": f"{name}.graph.json", "arch": "arch.json", "spec": f"{name}.spec.json"})
    manifest = {"schema_version": io.SCHEMA_VERSION, "seed": args.seed, "jobs": args.jobs, "entries": entries}
    if len(benches) < args.count:
        manifest["note"] = f"closeness filter kept {len(benches)} of {args.count} requested instances"
    io.write_json(out / "manifest.json", manifest)
    print(f"wrote {len(entries)} benchmarks to {out}")
    if not benches:
        print("note: no candidate passed the closeness filter; relax --threshold", file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    manifest = io.read_json(args.manifest, "manifest")
    base = Path(args.manifest).parent
    out = Path(args.out)
    report = RunReport()
    table = {m: {"solved": 0, "time": 0.0, "n": 0} for m in args.modes}
    for entry in manifest["entries"]:
        arch = io.load_arch(base / entry["arch"])
        spec = io.load_spec(base / entry["spec"])
        graph = io.load_graph(_resolve(base, entry["graph"]))
        schema = FeatureSchema(**spec["features"]) if "features" in spec else FeatureSchema()
        query = build_single_step_sp(graph, spec["adversary"], spec["alpha_d"], spec["alpha_t"], schema)
        for mode in args.modes:
            v = verify_single_step(query, arch, mode, args.fallback, args.timeout, args.threads, args.refine)
            report.add(entry["name"], mode, v)
            table[mode]["n"] += 1
            table[mode]["time"] += v.stats.get("wall_time", 0.0)
            table[mode]["solved"] += v.status != Status.UNKNOWN
    _write(out, report, f"compare {args.manifest}")
    lines = [f"{'mode':<16} {'solved':>7} {'of':>4} {'avg time[s]':>12}"]
    for m, r in table.items():
        lines.append(f"{m:<16} {r['solved']:>7} {r['n']:>4} {r['time'] / max(r['n'], 1):>12.2f}")
    text = "\n".join(lines) + "\n"
    (out / "table.txt").write_text(text)
    print(text, end="")
    return 0


def _write(out: Path, report: RunReport, title: str):
    report.write(out, title)


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="schedcert", description="Verify GNN job schedulers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    threads = os.cpu_count() or 1

    def common(sp, mode_default, encoding_default):
        sp.add_argument("--net", required=True, help="architecture/weights file")
        sp.add_argument("--graph", help="job graph file (overrides the spec's graph)")
        sp.add_argument("--spec", required=True, help="property file")
        sp.add_argument("--transitions", help="transition rules file")
        sp.add_argument("--mode", choices=MODES, default=mode_default)
        sp.add_argument("--encoding", choices=ENCODINGS, default=encoding_default)
        sp.add_argument("--timeout", type=float, default=600.0, help="seconds")
        sp.add_argument("--threads", type=int, default=threads)
        sp.add_argument("--refine", choices=("all", "unstable"), default="all",
                        help="neurons tightened in backward passes")
        sp.add_argument("--no-abstraction", action="store_true", help="check next actions one node at a time")
        sp.add_argument("--out", default="out")

    v = sub.add_parser("verify", help="single-step verification")
    common(v, "fb-converge+abs", "proof-transfer")
    v.add_argument("--fallback", action="store_true", help="complete branch-and-bound after the abstraction")
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("multistep", help="multi-step verification by trace enumeration")
    common(m, "forward", "proof-transfer")
    m.add_argument("--compare-encodings", action="store_true", help="also run the incomplete encoding")
    m.add_argument("--no-fallback", action="store_true", help="use the incomplete engine only")
    m.set_defaults(func=cmd_multistep)

    g = sub.add_parser("gen-bench", help="generate a benchmark suite")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--jobs", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", default="bench")
    g.add_argument("--net", help="use these weights instead of random ones")
    g.add_argument("--type", choices=("sp-single", "sp-multi"), default="sp-single")
    g.add_argument("--horizon", type=int, default=5)
    g.add_argument("--metric", choices=("ratio", "gap"), default="ratio")
    g.add_argument("--threshold", type=float, default=0.9)
    g.add_argument("--alpha-d", type=float, default=20.0)
    g.add_argument("--alpha-t", type=float, default=20.0)
    g.add_argument("--hidden", type=int, default=8)
    g.add_argument("--dim", type=int, default=5)
    g.add_argument("--duration", type=int, default=3)
    g.add_argument("--tasks", type=int, default=4)
    g.add_argument("--nodes-mean", type=float, default=9.0)
    g.add_argument("--nodes-std", type=float, default=4.0)
    g.add_argument("--max-nodes", type=int)
    g.set_defaults(func=cmd_gen_bench)

    c = sub.add_parser("compare", help="run every mode over a benchmark manifest")
    c.add_argument("--manifest", required=True)
    c.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    c.add_argument("--timeout", type=float, default=600.0)
    c.add_argument("--threads", type=int, default=threads)
    c.add_argument("--refine", choices=("all", "unstable"), default="all")
    c.add_argument("--fallback", action="store_true")
    c.add_argument("--out", default="out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_ERROR
    try:
        return args.func(args)
    except (io.InputError, StructureError, UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_UNWRITABLE
