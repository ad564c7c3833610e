"""Multi-step verification by enumerating scheduler traces.

A trace is a sequence of scheduled nodes.  For a partial trace the scheduler's
possible next actions are computed from a constraint system over the initial
features: every step's network, the action taken at each step and the feature
updates of the transition system.  Three encodings are supported:

* ``incomplete``: only the network of the current step.
* ``naive``: every step encoded from scratch.
* ``proof-transfer``: as ``naive`` but message-passing blocks of jobs that did
  not change since an earlier step are shared instead of re-encoded.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .domain import InputRegion
from .fb import EngineConfig, Status, Verdict
from .model import (GnnArch, GnnEncoder, JobGraph, LayeredNet, StructureError, TransitionSystem, apply_transition,
                    gnn_scores, identity_maps, input_to_features)
from .nodeabs import ScoreTemplate, node_abstraction

ENCODINGS = ("incomplete", "naive", "proof-transfer")
SCORE_TOL = 1e-6


class Match(str, Enum):
    MATCH = "match"
    NO_MATCH = "no-match"
    INCONCLUSIVE = "inconclusive"


class TraceMatcher:
    """Classifies partial traces against a (possibly implicit) set of bad traces."""

    def match(self, trace: tuple) -> Match:
        raise NotImplementedError

    def __call__(self, trace) -> Match:
        return self.match(tuple(trace))


class TraceSetMatcher(TraceMatcher):
    def __init__(self, bad: Iterable[Sequence]):
        self.bad = {tuple(t) for t in bad}
        self.prefixes = {t[:k] for t in self.bad for k in range(len(t))}

    def match(self, trace):
        trace = tuple(trace)
        if trace in self.bad:
            return Match.MATCH
        if trace in self.prefixes:
            return Match.INCONCLUSIVE
        return Match.NO_MATCH


class HorizonMatcher(TraceMatcher):
    """Matches nothing; explores every trace up to length ``horizon``."""

    def __init__(self, horizon: int):
        self.horizon = horizon

    def match(self, trace):
        return Match.NO_MATCH if len(trace) >= self.horizon else Match.INCONCLUSIVE


def match_trace(trace, matcher: TraceMatcher) -> Match:
    return matcher(tuple(trace))


# --------------------------------------------------------------------------
# encodings

@dataclass
class StepEncoding:
    net: LayeredNet
    graphs: list
    trace: tuple
    encoding: str
    steps: list
    path: list = field(default_factory=list)
    reused_jobs: int = 0
    encoded_jobs: int = 0

    @property
    def final_graph(self) -> JobGraph:
        return self.graphs[-1]

    @property
    def step(self) -> int:
        return len(self.trace)

    @property
    def constraint_count(self) -> int:
        return self.net.num_neurons + len(self.path)


def replay(graph0: JobGraph, trace: Sequence, system: TransitionSystem = TransitionSystem()) -> tuple:
    """Graphs along ``trace`` and each step's features as affine maps of the initial ones."""
    graphs = [graph0]
    maps = [identity_maps(graph0)]
    for k, v in enumerate(trace):
        g = graphs[-1]
        if v not in g.frontier:
            raise StructureError(f"action {v} at step {k} is not on the frontier {g.frontier}")
        fm = dict(maps[-1])
        for node, m, b in system.updates(g, v):
            f, c = fm[node]
            fm[node] = (m @ f, m @ c + b)
        g2 = apply_transition(g, v, system)
        graphs.append(g2)
        maps.append({n: fm[n] for n in g2.nodes})
    return graphs, maps


def _job_signature(graph: JobGraph, label, fmap) -> tuple:
    vs = graph.jobs[label]
    members = set(vs)
    edges = tuple(sorted(e for e in graph.edges if e[0] in members))
    feats = tuple((v, fmap[v][0].tobytes(), fmap[v][1].tobytes()) for v in vs)
    return vs, edges, feats


def encode_steps(graph0: JobGraph, arch: GnnArch, trace: Sequence, encoding: str = "proof-transfer",
                 system: TransitionSystem = TransitionSystem()) -> StepEncoding:
    """Layered network over the initial features with outputs ``("s", v, k)``.

    Complete encodings expose every step's frontier scores and record the path
    constraints (the chosen action scores at least as high as the rest).
    """
    if encoding not in ENCODINGS:
        raise ValueError(f"encoding must be one of {ENCODINGS}, got {encoding!r}")
    trace = tuple(trace)
    graphs, maps = replay(graph0, trace, system)
    steps = [len(trace)] if encoding == "incomplete" else list(range(len(trace) + 1))
    enc = GnnEncoder(graph0, arch)
    b = enc.builder
    cache: dict = {}
    outputs, path = [], []
    reused = fresh = 0
    for k in steps:
        g, fm = graphs[k], maps[k]
        emb = {}
        for label in sorted(g.jobs):
            sig = _job_signature(g, label, fm)
            if encoding == "proof-transfer" and sig in cache:
                emb.update(cache[sig])
                reused += 1
                continue
            block = enc.encode_job(g, g.jobs[label], fm)
            cache[sig] = block
            emb.update(block)
            fresh += 1
        y = enc.encode_summary(g, emb, fm)
        for v, layer in emb.items():
            b.node_map[("e", v, k)] = (layer, np.arange(arch.dim))
        if y is not None:
            b.node_map[("y", k)] = (y, np.arange(b.layers[y].size))
        for v in g.frontier:
            outputs.append((("s", v, k), enc.encode_pred(emb[v], y), 0))
        if k < len(trace):
            chosen = ("s", trace[k], k)
            for j in g.frontier:
                if j != trace[k]:
                    path.append(({chosen: 1.0, ("s", j, k): -1.0}, 0.0, ">="))
    net = b.build(outputs, pred=arch.pred)
    return StepEncoding(net, graphs, trace, encoding, steps, path, reused, fresh)


# --------------------------------------------------------------------------
# next actions

@dataclass
class DisjunctResult:
    actions: list
    witnesses: dict
    unknown: list
    stats: dict


def check_disjuncts(enc: StepEncoding, region: InputRegion, config: EngineConfig = EngineConfig(),
                    abstraction: bool = True, deadline: float | None = None) -> DisjunctResult:
    """Frontier nodes the scheduler may pick next (ties included), checked job by job."""
    g = enc.final_graph
    k = enc.step
    front = g.frontier
    stats = {"lp_calls": 0, "branch_nodes": 0, "abstract_attempts": 0, "abstract_successes": 0,
             "individual_checks": 0}
    if len(front) == 1:
        return DisjunctResult([front[0]], {}, [], stats)
    names = [("s", v, k) for v in front]
    template = ScoreTemplate(tuple(names), strict=False, extra=tuple(enc.path))
    actions, witnesses, unknown = [], {}, []
    for label in sorted(g.jobs):
        targets = [("s", v, k) for v in g.jobs[label] if v in set(front)]
        if not targets:
            continue
        res = node_abstraction(enc.net, region, targets, template, config, stop_on_failure=False,
                               abstraction=abstraction, deadline=deadline)
        for key in ("lp_calls", "branch_nodes"):
            stats[key] += res.verdict.stats.get(key, 0)
        stats["abstract_attempts"] += res.abstract_attempts
        stats["abstract_successes"] += res.abstract_successes
        stats["individual_checks"] += res.individual_checks
        for t in res.failing:
            actions.append(t[1])
            witnesses[t[1]] = res.witnesses[t]
        for t in res.unknown:
            actions.append(t[1])
            unknown.append(t[1])
    return DisjunctResult(sorted(actions), witnesses, sorted(unknown), stats)


def trace_realized(graph0: JobGraph, arch: GnnArch, x0, trace: Sequence, system: TransitionSystem = TransitionSystem(),
                   tol: float = SCORE_TOL) -> bool:
    """Whether initial input ``x0`` lets the scheduler follow ``trace`` (ties allowed up to ``tol``)."""
    g = graph0.with_features(input_to_features(graph0, x0))
    for v in trace:
        if v not in g.frontier:
            return False
        scores = gnn_scores(g, arch)
        if any(scores[j] > scores[v] + tol for j in g.frontier):
            return False
        g = apply_transition(g, v, system)
    return True


# --------------------------------------------------------------------------
# enumeration

@dataclass
class TraceReport:
    verdict: Verdict
    explored: list
    log: list
    matched: list
    witnesses: dict
    constraint_counts: dict

    @property
    def trace_set(self) -> set:
        return set(self.explored)


def check_with_trace_enumeration(graph0: JobGraph, arch: GnnArch, region: InputRegion, matcher: TraceMatcher,
                                 encoding: str = "proof-transfer", system: TransitionSystem = TransitionSystem(),
                                 config: EngineConfig = EngineConfig(mode="forward", fallback=True),
                                 abstraction: bool = True, exhaustive: bool = False,
                                 timeout: float | None = None, max_traces: int | None = None) -> TraceReport:
    """Depth-first exploration of partial traces; children are pushed so the smallest id pops first."""
    if encoding not in ENCODINGS:
        raise ValueError(f"encoding must be one of {ENCODINGS}, got {encoding!r}")
    t0 = time.monotonic()
    deadline = None if timeout is None else t0 + timeout
    complete = encoding != "incomplete" and config.complete
    stack = [()]
    seen: set = set()
    explored, log, matched = [], [], []
    witnesses: dict = {}
    counts: dict = {}
    stats = {"lp_calls": 0, "branch_nodes": 0, "abstract_attempts": 0, "abstract_successes": 0,
             "individual_checks": 0}
    status = Status.HOLD
    witness = None
    start = region.sample(np.random.default_rng(0), 1)
    if len(start):
        witnesses[()] = start[0]
    while stack:
        if deadline is not None and time.monotonic() > deadline:
            stats["timeout"] = True
            status = Status.UNKNOWN
            break
        if max_traces is not None and len(explored) >= max_traces:
            stats["trace_cap"] = True
            status = Status.UNKNOWN
            break
        t = stack.pop()
        if t in seen:
            raise AssertionError(f"trace {t} explored twice")
        seen.add(t)
        explored.append(t)
        started = time.monotonic()
        r = match_trace(t, matcher)
        if r == Match.MATCH:
            matched.append(t)
            w = witnesses.get(t)
            log.append({"trace": list(t), "status": "matched", "time": time.monotonic() - started})
            verdict_here = Status.NOT_HOLD if complete and w is not None and trace_realized(
                graph0, arch, w, t, system) else Status.UNKNOWN
            if status != Status.NOT_HOLD:
                status = verdict_here
                witness = w if verdict_here == Status.NOT_HOLD else None
            if not exhaustive:
                break
            continue
        if r == Match.NO_MATCH:
            log.append({"trace": list(t), "status": "pruned", "time": time.monotonic() - started})
            continue
        enc = encode_steps(graph0, arch, t, encoding, system)
        counts[t] = enc.constraint_count
        if not enc.final_graph.nodes:
            log.append({"trace": list(t), "status": "finished", "time": time.monotonic() - started})
            continue
        res = check_disjuncts(enc, region, config, abstraction, deadline)
        for key in stats:
            if key in res.stats:
                stats[key] += res.stats[key]
        for v, w in res.witnesses.items():
            witnesses[t + (v,)] = w
        if len(res.actions) == 1 and not res.unknown and t in witnesses and len(enc.final_graph.frontier) == 1:
            witnesses.setdefault(t + (res.actions[0],), witnesses[t])
        for v in sorted(res.actions, reverse=True):
            stack.append(t + (v,))
        log.append({"trace": list(t), "status": "extended", "next": list(res.actions), "unknown": list(res.unknown),
                    "constraints": enc.constraint_count, "time": time.monotonic() - started})
    stats.update(traces_explored=len(explored), wall_time=time.monotonic() - t0, encoding=encoding,
                 complete=complete)
    return TraceReport(Verdict(status, witness, stats), explored, log, matched, witnesses, counts)


def reachable_traces(graph0: JobGraph, arch: GnnArch, region: InputRegion, horizon: int, **kw) -> set:
    """All traces of length at most ``horizon`` the enumeration cannot rule out."""
    rep = check_with_trace_enumeration(graph0, arch, region, HorizonMatcher(horizon), **kw)
    return rep.trace_set
