"""Independent oracles and instance generators shared by the tests.

Nothing here calls the package's analysis code: networks are evaluated with
plain numpy loops and LPs are assembled from scratch for scipy.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog

from schedcert.domain import InputRegion
from schedcert.model import (Activation, Affine, GnnArch, JobGraph, TransitionSystem, features_to_input,
                             input_to_features, random_job_graph, simulate_batch)


# --------------------------------------------------------------------------
# reference GNN semantics

def _mlp(mlp, x, alpha):
    h = np.asarray(x, dtype=float)
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = w @ h + b
        if k < len(mlp.weights) - 1:
            h = np.array([v if v >= 0 else alpha * v for v in h])
    return h


def ref_embeddings(graph: JobGraph, arch: GnnArch, feats) -> dict:
    """Memoized recursion e_v = g(sum of f(e_c) over children c) + x_v, one node at a time."""
    feats = np.asarray(feats, dtype=float)
    memo = {}

    def emb(v):
        if v not in memo:
            total = np.zeros(arch.f.out_dim)
            for c in sorted(p[1] for p in graph.edges if p[0] == v):
                total = total + _mlp(arch.f, emb(c), arch.alpha)
            memo[v] = _mlp(arch.g, total, arch.alpha) + feats[graph.nodes.index(v)]
        return memo[v]

    return {v: emb(v) for v in graph.nodes}


def ref_scores(graph: JobGraph, arch: GnnArch, feats=None) -> dict:
    feats = graph.features if feats is None else np.asarray(feats, dtype=float)
    e = ref_embeddings(graph, arch, feats)
    frontier = sorted(v for v in graph.nodes if not any(p[0] == v for p in graph.edges))
    y = None
    if arch.summary is not None:
        pooled = np.concatenate([feats.sum(axis=0), sum(e[v] for v in graph.nodes)])
        y = _mlp(arch.summary, pooled, arch.alpha)
    out = {}
    for v in frontier:
        z = e[v] if y is None else np.concatenate([e[v], y])
        out[v] = float(_mlp(arch.pred, z, arch.alpha)[0])
    return out


def ref_simulate(graph: JobGraph, arch: GnnArch, feats, steps: int) -> tuple:
    """Greedy scheduling by repeated full re-evaluation; ties go to the smallest id."""
    nodes = list(graph.nodes)
    edges = set(graph.edges)
    feats = {v: np.asarray(feats, dtype=float)[k] for k, v in enumerate(graph.nodes)}
    trace = []
    for _ in range(steps):
        if not nodes:
            break
        g = JobGraph(tuple(nodes), frozenset(edges), np.array([feats[v] for v in nodes]),
                     {j: tuple(v for v in vs if v in nodes) for j, vs in graph.jobs.items()
                      if any(v in nodes for v in vs)})
        s = ref_scores(g, arch)
        best = sorted(s, key=lambda v: (-s[v], v))[0]
        trace.append(best)
        nodes.remove(best)
        edges = {e for e in edges if best not in e}
    return tuple(trace)


# --------------------------------------------------------------------------
# layered-network oracles

def ref_eval(net, x) -> list:
    vals = [np.asarray(x, dtype=float)]
    for layer in net.layers[1:]:
        if isinstance(layer, Affine):
            v = np.array(layer.bias, dtype=float)
            for s, w in layer.inputs:
                v = v + w @ vals[s]
            vals.append(v)
        else:
            src = vals[layer.source]
            vals.append(np.where(src >= 0, src, layer.alpha * src))
    return vals


def interval_bounds(net, lb, ub) -> list:
    """Plain interval propagation."""
    boxes = [(np.asarray(lb, float), np.asarray(ub, float))]
    for layer in net.layers[1:]:
        if isinstance(layer, Affine):
            lo = np.array(layer.bias, dtype=float)
            hi = lo.copy()
            for s, w in layer.inputs:
                l, u = boxes[s]
                lo = lo + np.clip(w, 0, None) @ l + np.clip(w, None, 0) @ u
                hi = hi + np.clip(w, 0, None) @ u + np.clip(w, None, 0) @ l
            boxes.append((lo, hi))
        else:
            l, u = boxes[layer.source]
            a = layer.alpha
            boxes.append((np.where(l >= 0, l, a * l), np.where(u >= 0, u, a * u)))
    return boxes


def oracle_unstable(net, lb, ub) -> list:
    boxes = interval_bounds(net, lb, ub)
    out = []
    for k, layer in enumerate(net.layers):
        if isinstance(layer, Activation):
            l, u = boxes[layer.source]
            out += [(k, i) for i in range(layer.size) if l[i] < 0 < u[i]]
    return out


def phase_oracle(net, lb, ub, side=(), bad=(), max_unstable: int = 10, strict_eps: float = 0.0):
    """Satisfiability of ``region and bad`` by enumerating all 2^u activation patterns.

    Returns (sat, point) or None when more than ``max_unstable`` neurons are unstable
    under interval bounds.  ``bad``/``side`` are LinCons over outputs/inputs.
    """
    boxes = interval_bounds(net, lb, ub)
    unstable = oracle_unstable(net, lb, ub)
    if len(unstable) > max_unstable:
        return None
    offs, n = [], 0
    for layer in net.layers:
        offs.append(n)
        n += layer.size
    base_eq, base_ub = [], []
    for k, layer in enumerate(net.layers[1:], start=1):
        if isinstance(layer, Affine):
            for i in range(layer.size):
                row = np.zeros(n)
                row[offs[k] + i] = 1.0
                for s, w in layer.inputs:
                    row[offs[s]:offs[s] + w.shape[1]] -= w[i]
                base_eq.append((row, layer.bias[i]))
    for c in side:
        row = np.zeros(n)
        for j, v in c.coeffs:
            row[j] = v
        if c.rel == "==":
            base_eq.append((row, c.bound))
        else:
            base_ub.append((row, c.bound - (strict_eps if c.rel == "<" else 0.0)))
    out0 = offs[-1]
    for c in bad:
        row = np.zeros(n)
        for j, v in c.coeffs:
            row[out0 + j] = v
        if c.rel == "==":
            base_eq.append((row, c.bound))
        else:
            base_ub.append((row, c.bound - (strict_eps if c.rel == "<" else 0.0)))
    bounds = [(None, None)] * n
    for i in range(net.layers[0].size):
        bounds[i] = (float(lb[i]), float(ub[i]))
    for pattern in itertools.product((False, True), repeat=len(unstable)):
        pos = dict(zip(unstable, pattern))
        eq, ubr = list(base_eq), list(base_ub)
        for k, layer in enumerate(net.layers):
            if not isinstance(layer, Activation):
                continue
            l, u = boxes[layer.source]
            for i in range(layer.size):
                x, y = offs[layer.source] + i, offs[k] + i
                p = pos.get((k, i), l[i] >= 0)
                row = np.zeros(n)
                row[y] = 1.0
                row[x] = -1.0 if p else -layer.alpha
                eq.append((row, 0.0))
                r = np.zeros(n)
                r[x] = -1.0 if p else 1.0
                ubr.append((r, 0.0))
        res = linprog(np.zeros(n), A_ub=np.array([r for r, _ in ubr]) if ubr else None,
                      b_ub=np.array([b for _, b in ubr]) if ubr else None,
                      A_eq=np.array([r for r, _ in eq]), b_eq=np.array([b for _, b in eq]),
                      bounds=bounds, method="highs")
        if res.status == 0:
            return True, res.x[:net.layers[0].size]
    return False, None


def vertex_lp(a_ub, b_ub, c, sense="max"):
    """Optimum of c.x over {A x <= b} (bounded, small) by enumerating basic solutions."""
    a_ub = np.asarray(a_ub, float)
    b_ub = np.asarray(b_ub, float)
    n = a_ub.shape[1]
    best = None
    for rows in itertools.combinations(range(a_ub.shape[0]), n):
        m = a_ub[list(rows)]
        if abs(np.linalg.det(m)) < 1e-12:
            continue
        x = np.linalg.solve(m, b_ub[list(rows)])
        if np.all(a_ub @ x <= b_ub + 1e-9):
            v = float(c @ x)
            if best is None or (v > best if sense == "max" else v < best):
                best = v
    return best


# --------------------------------------------------------------------------
# generators

def small_instance(rng, max_jobs=3, max_nodes=5, max_dim=4, hidden=None, summary=True):
    jobs = int(rng.integers(1, max_jobs + 1))
    dim = int(rng.integers(1, max_dim + 1))
    g = random_job_graph(rng, jobs, lambda r: int(r.integers(1, max_nodes + 1)), dim)
    h = hidden or int(rng.integers(2, 4))
    arch = GnnArch.random(dim, rng, hidden=h, summary_dim=2 if summary else None)
    return g, arch


def local_region(rng, x0, radius, dims=None):
    """Box of half-width ``radius`` around ``x0`` on ``dims`` (default: all)."""
    lb, ub = x0.copy(), x0.copy()
    dims = range(len(x0)) if dims is None else dims
    for d in dims:
        lb[d] -= radius
        ub[d] += radius
    return lb, ub


def hand_locality(trace, job_of, remaining, k):
    """Flag a job switch within k steps of entering a job that had at least k nodes left."""
    n = len(trace)
    for i in range(n):
        if i > 0 and job_of[trace[i - 1]] == job_of[trace[i]]:
            continue
        if remaining[i] < k:
            continue
        window = trace[i:i + k]
        if any(job_of[v] != job_of[trace[i]] for v in window):
            return True
    return False


def multistep_instance(rng, max_jobs=3, max_nodes=2, max_dim=2, hidden=2, radius=0.3, dims=None):
    """Small graph and a region perturbing ``dims`` input coordinates (default: all)."""
    g, arch = small_instance(rng, max_jobs=max_jobs, max_nodes=max_nodes, max_dim=max_dim, hidden=hidden)
    x0 = features_to_input(g)
    if dims is not None and not isinstance(dims, (list, tuple, range)):
        dims = sorted(rng.choice(len(x0), size=min(int(dims), len(x0)), replace=False).tolist())
    lb, ub = local_region(rng, x0, radius, dims)
    return g, arch, InputRegion(lb, ub)


def grid_traces(graph, arch, region, horizon, per_dim=101, system=None):
    """Prefix-closed set of traces seen by simulating every point of a grid over the perturbed coordinates."""
    free = [d for d in range(len(region.lb)) if region.ub[d] > region.lb[d]]
    axes = [np.linspace(region.lb[d], region.ub[d], per_dim) for d in free]
    mesh = np.meshgrid(*axes, indexing="ij") if axes else []
    pts = np.tile(region.lb, (int(np.prod([per_dim] * len(free))) if free else 1, 1))
    for d, m in zip(free, mesh):
        pts[:, d] = m.ravel()
    feats = np.stack([input_to_features(graph, p) for p in pts])
    out = set()
    for t in simulate_batch(graph, arch, horizon, feats, system or TransitionSystem()):
        out.update(t[:k] for k in range(len(t) + 1))
    return out

