"""Scheduler properties turned into verification queries.

Strategy-proofness: the adversarial job ``a`` may inflate the duration and task
count of its frontier nodes (keeping duration per task at least as large).  The
property says this never lets one of its frontier nodes be scheduled, in one
step or within ``T`` steps.  K-locality says that once the scheduler enters a
job with at least ``K`` remaining nodes it stays there for ``K`` steps.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import InputRegion, LinCons
from .fb import EngineConfig, Status, Verdict
from .model import (GnnArch, JobGraph, StructureError, TransitionSystem, features_to_input, gnn_scores,
                    random_job_graph, simulate, unroll)
from .multistep import Match, TraceMatcher, replay
from .nodeabs import ScoreTemplate, node_abstraction

MODES = ("forward", "fb-once", "fb-converge", "fb-converge+abs")

# meaning of the default five-feature layout
DEFAULT_FEATURES = (
    "executors in the job",
    "source executor is local",
    "executors available",
    "estimated total duration",
    "number of tasks",
)


@dataclass(frozen=True)
class FeatureSchema:
    dim: int = 5
    duration: int = 3
    tasks: int = 4

    def __post_init__(self):
        if not (0 <= self.duration < self.dim and 0 <= self.tasks < self.dim) or self.duration == self.tasks:
            raise ValueError(f"duration/tasks indices {self.duration}/{self.tasks} invalid for dimension {self.dim}")


@dataclass(frozen=True, eq=False)
class SpQuery:
    graph: JobGraph
    adversary: int
    region: InputRegion
    targets: tuple
    template: ScoreTemplate

    @property
    def adversarial_frontier(self) -> tuple:
        return tuple(t[1] for t in self.targets)


def sp_region(graph: JobGraph, adversary: int, alpha_d: float, alpha_t: float,
              schema: FeatureSchema = FeatureSchema()) -> InputRegion:
    if adversary not in graph.jobs:
        raise StructureError(f"job {adversary} does not exist; jobs are {sorted(graph.jobs)}")
    if alpha_d < 1 or alpha_t < 1:
        raise ValueError("scales alpha_d and alpha_t must be at least 1")
    if graph.dim != schema.dim:
        raise StructureError(f"graph features have dimension {graph.dim}, schema expects {schema.dim}")
    x = features_to_input(graph).copy()
    lb, ub = x.copy(), x.copy()
    side = []
    d = graph.dim
    for v in graph.frontier:
        if graph.job_of[v] != adversary:
            continue
        base = graph.position[v] * d
        xd, xt = graph.feature(v)[schema.duration], graph.feature(v)[schema.tasks]
        if xd <= 0 or xt <= 0:
            raise ValueError(f"node {v}: duration and task count must be positive for the ratio constraint "
                             f"(got {xd}, {xt}); rescale the features")
        i_d, i_t = base + schema.duration, base + schema.tasks
        ub[i_d] = alpha_d * xd
        ub[i_t] = alpha_t * xt
        # x'_d / x'_t >= x_d / x_t  <=>  x'_d * x_t - x'_t * x_d >= 0
        side.append(LinCons.ge({i_d: xt, i_t: -xd}, 0.0))
    return InputRegion(lb, ub, tuple(side))


def build_single_step_sp(graph: JobGraph, adversary: int, alpha_d: float, alpha_t: float,
                         schema: FeatureSchema = FeatureSchema()) -> SpQuery:
    """Region plus, per adversarial frontier node ``v``, the bad set ``s_v > s_j`` for all other-job frontier ``j``."""
    region = sp_region(graph, adversary, alpha_d, alpha_t, schema)
    mine = [v for v in graph.frontier if graph.job_of[v] == adversary]
    others = [v for v in graph.frontier if graph.job_of[v] != adversary]
    template = ScoreTemplate(tuple(("s", j, 0) for j in others), strict=True)
    return SpQuery(graph, adversary, region, tuple(("s", v, 0) for v in mine), template)


def engine_for(mode: str, fallback: bool = False, threads: int = 1, refine: str = "all") -> tuple:
    """Engine configuration and whether node abstraction is on."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    base = "fb-converge" if mode == "fb-converge+abs" else mode
    return EngineConfig(mode=base, fallback=fallback, threads=threads, refine=refine), mode == "fb-converge+abs"


def verify_single_step(query: SpQuery, arch: GnnArch, mode: str = "fb-converge+abs", fallback: bool = False,
                       timeout: float | None = None, threads: int = 1, refine: str = "all") -> Verdict:
    config, abstraction = engine_for(mode, fallback, threads, refine)
    if not query.targets:
        return Verdict(Status.HOLD, stats={"note": "adversarial job has no frontier node"})
    net = unroll(query.graph, arch)
    deadline = None if timeout is None else time.monotonic() + timeout
    res = node_abstraction(net, query.region, query.targets, query.template, config, stop_on_failure=True,
                           abstraction=abstraction, deadline=deadline)
    return res.verdict


# --------------------------------------------------------------------------
# multi-step properties

class SpMultiMatcher(TraceMatcher):
    """Bad traces: some node of the adversarial job scheduled within ``horizon`` steps."""

    def __init__(self, job_nodes: Sequence, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.job_nodes = frozenset(job_nodes)
        self.horizon = horizon

    def match(self, trace):
        trace = tuple(trace)
        if any(v in self.job_nodes for v in trace[:self.horizon]):
            return Match.MATCH
        if len(trace) >= self.horizon:
            return Match.NO_MATCH
        return Match.INCONCLUSIVE


def build_tstep_sp(graph: JobGraph, adversary: int, alpha_d: float, alpha_t: float, horizon: int, arch: GnnArch,
                   system: TransitionSystem = TransitionSystem(), schema: FeatureSchema = FeatureSchema()) -> tuple:
    """(region, matcher); the nominal rollout must keep the adversarial job waiting for ``horizon`` steps."""
    region = sp_region(graph, adversary, alpha_d, alpha_t, schema)
    nominal = simulate(graph, arch, horizon, system)
    hit = [v for v in nominal if graph.job_of[v] == adversary]
    if hit:
        raise ValueError(f"nominal trace {nominal} already schedules node {hit[0]} of job {adversary}; "
                         "the property is violated without any misreporting")
    return region, SpMultiMatcher(graph.jobs[adversary], horizon)


class LocalityMatcher(TraceMatcher):
    """K-locality violations: leaving a job within ``K`` steps of entering it while it had ``>= K`` nodes left."""

    def __init__(self, graph: JobGraph, k: int, horizon: int | None = None,
                 system: TransitionSystem = TransitionSystem()):
        if k < 2:
            raise ValueError("locality needs K >= 2")
        self.graph = graph
        self.k = k
        self.horizon = horizon
        self.system = system

    def remaining(self, trace) -> list:
        """Nodes left in the job of ``trace[i]`` just before step ``i``."""
        graphs, _ = replay(self.graph, trace, self.system)
        job = self.graph.job_of
        return [sum(1 for u in graphs[i].nodes if job[u] == job[v]) for i, v in enumerate(trace)]

    def match(self, trace):
        trace = tuple(trace)
        job = self.graph.job_of
        left = self.remaining(trace) if trace else []
        for i, v in enumerate(trace):
            entering = i == 0 or job[trace[i - 1]] != job[v]
            if not entering or left[i] < self.k:
                continue
            for m in range(1, self.k):
                if i + m < len(trace) and job[trace[i + m]] != job[v]:
                    return Match.MATCH
        if self.horizon is not None and len(trace) >= self.horizon:
            return Match.NO_MATCH
        if len(trace) == len(self.graph.nodes):
            return Match.NO_MATCH
        return Match.INCONCLUSIVE


def build_k_locality(graph: JobGraph, k: int, horizon: int | None = None,
                     system: TransitionSystem = TransitionSystem()) -> LocalityMatcher:
    return LocalityMatcher(graph, k, horizon, system)


# --------------------------------------------------------------------------
# benchmarks

@dataclass(frozen=True, eq=False)
class Benchmark:
    graph: JobGraph
    arch: GnnArch
    spec: dict


def job_totals(graph: JobGraph, arch: GnnArch) -> dict:
    scores = gnn_scores(graph, arch)
    totals = {j: 0.0 for j in graph.jobs}
    for v, s in scores.items():
        totals[graph.job_of[v]] += float(s)
    return totals


def closeness(totals: dict, metric: str = "ratio") -> tuple:
    """(top job, second job, score) where a larger ratio or a smaller gap means closer."""
    ranked = sorted(totals, key=lambda j: (-totals[j], j))
    top, second = ranked[0], ranked[1]
    if metric == "gap":
        return top, second, totals[top] - totals[second]
    if metric == "ratio":
        if totals[top] <= 0 or totals[second] <= 0:
            return top, second, float("nan")
        return top, second, totals[second] / totals[top]
    raise ValueError(f"metric must be 'ratio' or 'gap', got {metric!r}")


def is_close(score: float, metric: str, threshold: float) -> bool:
    if np.isnan(score):
        return False
    return score >= threshold if metric == "ratio" else score < threshold


def random_benchmark_graph(rng: np.random.Generator, jobs: int, schema: FeatureSchema,
                           nodes_mean: float = 9.0, nodes_std: float = 4.0, max_nodes: int | None = None) -> JobGraph:
    def count(r):
        n = int(round(r.normal(nodes_mean, nodes_std)))
        n = max(1, n)
        return min(n, max_nodes) if max_nodes else n

    g = random_job_graph(rng, jobs, count, schema.dim, edge_prob=0.4)
    feats = g.features.copy()
    feats[:, schema.tasks] = rng.integers(1, 20, size=len(g.nodes)) / 10.0
    return g.with_features(feats)


def gen_benchmarks(seed: int, jobs: int, count: int, schema: FeatureSchema = FeatureSchema(),
                   arch: GnnArch | None = None, metric: str = "ratio", threshold: float = 0.9,
                   alpha_d: float = 20.0, alpha_t: float = 20.0, hidden: int = 8, max_tries: int = 200,
                   nodes_mean: float = 9.0, nodes_std: float = 4.0, max_nodes: int | None = None,
                   spec_type: str = "sp-single", horizon: int = 5) -> list:
    """Random profiles whose two best jobs score closely; the runner-up becomes the adversary."""
    rng = np.random.default_rng(seed)
    arch = arch or GnnArch.random(schema.dim, rng, hidden=hidden)
    out = []
    tries = 0
    while len(out) < count and tries < max_tries:
        tries += 1
        g = random_benchmark_graph(rng, jobs, schema, nodes_mean, nodes_std, max_nodes)
        if len(g.jobs) < 2:
            continue
        top, second, score = closeness(job_totals(g, arch), metric)
        if not is_close(score, metric, threshold):
            continue
        spec = {"type": spec_type, "adversary": int(second), "alpha_d": alpha_d, "alpha_t": alpha_t}
        if spec_type == "sp-multi":
            spec["T"] = horizon
            if any(g.job_of[v] == second for v in simulate(g, arch, horizon)):
                continue
        out.append(Benchmark(g, arch, spec))
    return out


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()
