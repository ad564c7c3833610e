"""Job graphs, GNN architectures and the unrolled layered network.

A job graph is a DAG per job; an edge ``(p, c)`` makes ``c`` a child of ``p``
and ``p`` cannot run before ``c`` is finished.  Nodes without children form the
frontier, i.e. the candidates the scheduler may pick next.  Embeddings flow from
children to parents::

    e_i = g(sum_{c in children(i)} f(e_c)) + x_i

and the score of a target node is ``pred([e_i, y])`` with the summary
``y = summary(sum_i [x_i, e_i])`` over every node of the current graph.
"""
from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class StructureError(ValueError):
    """Malformed graph, architecture or network."""


def leaky_relu(x, alpha):
    return np.where(x >= 0, x, alpha * x)


# --------------------------------------------------------------------------
# architecture

@dataclass(frozen=True, eq=False)
class Mlp:
    """Dense network with a leaky ReLU after every layer but the last."""

    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(np.atleast_2d(np.asarray(w, dtype=float)) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float).reshape(-1) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise StructureError("an MLP needs one bias per weight matrix")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape[0] != b.shape[0]:
                raise StructureError(f"layer {k}: weight rows {w.shape[0]} != bias size {b.shape[0]}")
            if k and ws[k - 1].shape[0] != w.shape[1]:
                raise StructureError(f"layer {k}: expects {w.shape[1]} inputs, previous layer gives {ws[k - 1].shape[0]}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def __call__(self, x, alpha):
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if k < last:
                h = leaky_relu(h, alpha)
        return h

    @classmethod
    def random(cls, dims: Sequence[int], rng: np.random.Generator, scale: float = 1.0, bias_scale: float = 0.1):
        ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            ws.append(rng.normal(0.0, scale / np.sqrt(n_in), size=(n_out, n_in)))
            bs.append(rng.normal(0.0, bias_scale, size=n_out))
        return cls(tuple(ws), tuple(bs))


@dataclass(frozen=True, eq=False)
class GnnArch:
    """Message function ``f``, update ``g``, prediction ``pred`` and optional ``summary``."""

    f: Mlp
    g: Mlp
    pred: Mlp
    summary: Mlp | None = None
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise StructureError(f"leaky slope must lie in (0, 1), got {self.alpha}")
        if self.g.in_dim != self.f.out_dim:
            raise StructureError(f"g expects {self.g.in_dim} inputs but f emits {self.f.out_dim}")
        if self.f.in_dim != self.g.out_dim:
            raise StructureError("f input and g output must both equal the feature dimension")
        d = self.f.in_dim
        if self.summary is not None and self.summary.in_dim != 2 * d:
            raise StructureError(f"summary expects {self.summary.in_dim} inputs, needs {2 * d}")
        want = d + (self.summary.out_dim if self.summary is not None else 0)
        if self.pred.in_dim != want:
            raise StructureError(f"pred expects {self.pred.in_dim} inputs, needs {want}")
        if self.pred.out_dim != 1:
            raise StructureError("pred must emit a single score")

    @property
    def dim(self) -> int:
        return self.f.in_dim

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, hidden: int = 4, msg_dim: int | None = None,
               summary_dim: int | None = 2, scale: float = 1.0, alpha: float = 0.2):
        msg_dim = msg_dim or dim
        f = Mlp.random([dim, hidden, msg_dim], rng, scale)
        g = Mlp.random([msg_dim, hidden, dim], rng, scale)
        summary = Mlp.random([2 * dim, hidden, summary_dim], rng, scale) if summary_dim else None
        pred = Mlp.random([dim + (summary_dim or 0), hidden, 1], rng, scale)
        return cls(f, g, pred, summary, alpha)


# --------------------------------------------------------------------------
# job graphs

@dataclass(frozen=True, eq=False)
class JobGraph:
    """Immutable job profile.  ``jobs`` maps a stable job label to its node ids."""

    nodes: tuple
    edges: frozenset
    features: np.ndarray
    jobs: dict = field(default=None)

    def __post_init__(self):
        nodes = tuple(int(v) for v in self.nodes)
        if len(set(nodes)) != len(nodes):
            raise StructureError("duplicate node ids")
        feats = np.array(self.features, dtype=float, copy=True)
        if feats.ndim != 2 or feats.shape[0] != len(nodes):
            raise StructureError(f"features must be {len(nodes)} x d, got shape {feats.shape}")
        feats.setflags(write=False)
        edges = frozenset((int(p), int(c)) for p, c in self.edges)
        known = set(nodes)
        for p, c in edges:
            if p not in known or c not in known:
                raise StructureError(f"edge {(p, c)} references an unknown node")
            if p == c:
                raise StructureError(f"self loop on node {p}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        if self.jobs is None:
            jobs = {k: comp for k, comp in enumerate(_undirected_components(nodes, edges))}
        else:
            jobs = {int(k): tuple(int(v) for v in vs) for k, vs in dict(self.jobs).items() if len(vs)}
            seen = [v for vs in jobs.values() for v in vs]
            if sorted(seen) != sorted(nodes):
                raise StructureError("jobs must partition the node set")
        object.__setattr__(self, "jobs", jobs)
        job_of = self.job_of
        for p, c in edges:
            if job_of[p] != job_of[c]:
                raise StructureError(f"edge {(p, c)} crosses jobs {job_of[p]} and {job_of[c]}")
        try:
            tuple(graphlib.TopologicalSorter({v: self.children(v) for v in nodes}).static_order())
        except graphlib.CycleError as exc:
            raise StructureError(f"job graph has a cycle: {exc.args[1]}") from None

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def position(self) -> dict:
        return {v: k for k, v in enumerate(self.nodes)}

    @cached_property
    def job_of(self) -> dict:
        return {v: k for k, vs in self.jobs.items() for v in vs}

    @cached_property
    def _children(self) -> dict:
        out = {v: [] for v in self.nodes}
        for p, c in sorted(self.edges):
            out[p].append(c)
        return {v: tuple(cs) for v, cs in out.items()}

    def children(self, v) -> tuple:
        return self._children[v]

    def parents(self, v) -> tuple:
        return tuple(sorted(p for p, c in self.edges if c == v))

    def feature(self, v) -> np.ndarray:
        return self.features[self.position[v]]

    @cached_property
    def frontier(self) -> tuple:
        return tuple(sorted(v for v in self.nodes if not self._children[v]))

    @property
    def num_jobs(self) -> int:
        return len(self.jobs)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((len(self.nodes), len(self.nodes)), dtype=int)
        for p, c in self.edges:
            a[self.position[p], self.position[c]] = 1
        return a

    def leaves_first(self, nodes: Iterable | None = None) -> list:
        """Nodes ordered so every child precedes its parents."""
        keep = set(self.nodes if nodes is None else nodes)
        ts = graphlib.TopologicalSorter({v: [c for c in self._children[v] if c in keep] for v in sorted(keep)})
        return list(ts.static_order())

    def with_features(self, features) -> "JobGraph":
        return JobGraph(self.nodes, self.edges, features, self.jobs)

    def job_signature(self, label) -> tuple:
        vs = self.jobs[label]
        edges = tuple(sorted((p, c) for p, c in self.edges if p in set(vs)))
        return tuple(vs), edges, tuple(self.feature(v).tobytes() for v in vs)

    def to_dict(self) -> dict:
        return {
            "nodes": [{"id": v, "features": self.feature(v).tolist()} for v in self.nodes],
            "edges": [list(e) for e in sorted(self.edges)],
            "jobs": [list(self.jobs[k]) for k in sorted(self.jobs)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "JobGraph":
        nodes = [n["id"] for n in data["nodes"]]
        feats = [n["features"] for n in data["nodes"]]
        jobs = data.get("jobs")
        if jobs is not None:
            jobs = {k: tuple(vs) for k, vs in enumerate(jobs)}
        return cls(tuple(nodes), frozenset(map(tuple, data["edges"])), np.array(feats, dtype=float), jobs)


def _undirected_components(nodes, edges) -> list:
    nbrs = {v: set() for v in nodes}
    for p, c in edges:
        nbrs[p].add(c)
        nbrs[c].add(p)
    seen, comps = set(), []
    for v in nodes:
        if v in seen:
            continue
        stack, comp = [v], []
        seen.add(v)
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in nbrs[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        comps.append(tuple(sorted(comp)))
    return comps


def random_job_graph(rng: np.random.Generator, num_jobs: int, nodes_per_job, dim: int,
                     edge_prob: float = 0.35, feature_low: float = 0.1, feature_high: float = 1.0) -> JobGraph:
    """Random profile; ``nodes_per_job`` is an int or a callable ``rng -> int``."""
    nodes, edges, jobs = [], set(), {}
    nxt = 0
    for k in range(num_jobs):
        n = nodes_per_job(rng) if callable(nodes_per_job) else int(nodes_per_job)
        n = max(1, n)
        ids = list(range(nxt, nxt + n))
        nxt += n
        # a random tree keeps each job connected, extra forward edges keep it acyclic
        for j in range(1, n):
            edges.add((ids[int(rng.integers(0, j))], ids[j]))
        for a in range(n):
            for b in range(a + 1, n):
                if (ids[a], ids[b]) not in edges and rng.random() < edge_prob / n:
                    edges.add((ids[a], ids[b]))
        nodes.extend(ids)
        jobs[k] = tuple(ids)
    feats = rng.uniform(feature_low, feature_high, size=(len(nodes), dim))
    return JobGraph(tuple(nodes), frozenset(edges), feats, jobs)


# --------------------------------------------------------------------------
# reference semantics

def embeddings(graph: JobGraph, arch: GnnArch, features=None) -> dict:
    """Node embeddings by direct recursion; ``features`` may carry a leading batch axis."""
    x = graph.features if features is None else np.asarray(features, dtype=float)
    batch = x.shape[:-2]
    g_zero = arch.g(np.zeros(arch.f.out_dim), arch.alpha)
    emb, msg = {}, {}
    for v in graph.leaves_first():
        xv = x[..., graph.position[v], :]
        kids = graph.children(v)
        if kids:
            total = sum(msg[c] for c in kids)
            emb[v] = arch.g(total, arch.alpha) + xv
        else:
            emb[v] = np.broadcast_to(g_zero, batch + g_zero.shape) + xv
        if graph.parents(v):
            msg[v] = arch.f(emb[v], arch.alpha)
    return emb


def gnn_scores(graph: JobGraph, arch: GnnArch, features=None, targets=None) -> dict:
    """Scores ``{node: s}`` for ``targets`` (default: the frontier)."""
    x = graph.features if features is None else np.asarray(features, dtype=float)
    emb = embeddings(graph, arch, x)
    targets = graph.frontier if targets is None else targets
    if arch.summary is not None:
        pooled_x = x.sum(axis=-2)
        pooled_e = sum(emb[v] for v in graph.nodes)
        y = arch.summary(np.concatenate([pooled_x, pooled_e], axis=-1), arch.alpha)
    out = {}
    for v in targets:
        z = emb[v] if arch.summary is None else np.concatenate([emb[v], y], axis=-1)
        out[v] = arch.pred(z, arch.alpha)[..., 0]
    return out


# --------------------------------------------------------------------------
# transitions

@dataclass(frozen=True, eq=False)
class Transition:
    """One rule of the cluster environment.

    ``kind`` is ``"remove"`` (drop ``targets``, which must be frontier nodes) or
    ``"affine"`` (``x <- matrix @ x + bias`` on ``targets``).  ``targets=None``
    on an affine rule means every remaining node of the scheduled node's job.
    ``trigger=None`` fires the rule on every step.
    """

    kind: str
    targets: tuple | None = None
    matrix: np.ndarray | None = None
    bias: np.ndarray | None = None
    trigger: int | None = None

    def __post_init__(self):
        if self.kind not in ("remove", "affine"):
            raise StructureError(f"unknown transition kind {self.kind!r}")
        if self.kind == "affine":
            if self.matrix is None:
                raise StructureError("affine transition needs a matrix")
            m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            b = np.zeros(m.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=float).reshape(-1)
            if m.shape[0] != m.shape[1] or b.shape[0] != m.shape[0]:
                raise StructureError("affine transition needs a square matrix and matching bias")
            object.__setattr__(self, "matrix", m)
            object.__setattr__(self, "bias", b)
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))

    def fires(self, action) -> bool:
        return self.trigger is None or self.trigger == action


@dataclass(frozen=True)
class TransitionSystem:
    rules: tuple = ()

    def updates(self, graph: JobGraph, action) -> list:
        """Affine updates ``(node, matrix, bias)`` applied after scheduling ``action``."""
        out = []
        remaining = set(graph.nodes) - {action}
        for r in self.rules:
            if r.kind != "affine" or not r.fires(action):
                continue
            targets = r.targets if r.targets is not None else graph.jobs[graph.job_of[action]]
            out.extend((v, r.matrix, r.bias) for v in targets if v in remaining)
        return out

    def removals(self, graph: JobGraph, action) -> list:
        out = [action]
        for r in self.rules:
            if r.kind == "remove" and r.fires(action) and r.targets:
                out.extend(v for v in r.targets if v in graph.position and v not in out)
        return out

    def to_dict(self) -> dict:
        rules = []
        for r in self.rules:
            d = {"kind": r.kind, "targets": None if r.targets is None else list(r.targets), "trigger": r.trigger}
            if r.kind == "affine":
                d["matrix"] = r.matrix.tolist()
                d["bias"] = r.bias.tolist()
            rules.append(d)
        return {"rules": rules}

    @classmethod
    def from_dict(cls, data: dict) -> "TransitionSystem":
        return cls(tuple(Transition(r["kind"], r.get("targets"), r.get("matrix"), r.get("bias"), r.get("trigger"))
                         for r in data.get("rules", [])))


def apply_transition(graph: JobGraph, action, system: TransitionSystem = TransitionSystem()) -> JobGraph:
    if action not in graph.frontier:
        raise ValueError(f"node {action} is not on the frontier {graph.frontier}")
    removed = system.removals(graph, action)
    feats = graph.features.copy()
    for v, m, b in system.updates(graph, action):
        k = graph.position[v]
        feats[k] = m @ feats[k] + b
    gone = set(removed)
    # extra removals must be frontier once earlier ones are gone
    for v in removed[1:]:
        if any(c not in gone for c in graph.children(v)):
            raise ValueError(f"transition removes non-frontier node {v}")
    keep = [k for k, v in enumerate(graph.nodes) if v not in gone]
    nodes = tuple(graph.nodes[k] for k in keep)
    edges = frozenset(e for e in graph.edges if e[0] not in gone and e[1] not in gone)
    jobs = {j: tuple(v for v in vs if v not in gone) for j, vs in graph.jobs.items()}
    return JobGraph(nodes, edges, feats[keep], {j: vs for j, vs in jobs.items() if vs})


def changed_components(before: JobGraph, after: JobGraph) -> set:
    """Labels of jobs whose node set or feature values differ."""
    labels = set(before.jobs) | set(after.jobs)
    out = set()
    for j in labels:
        if j not in before.jobs or j not in after.jobs:
            out.add(j)
        elif before.job_signature(j) != after.job_signature(j):
            out.add(j)
    return out


# --------------------------------------------------------------------------
# layered network

@dataclass(frozen=True, eq=False)
class InputLayer:
    size: int

    @property
    def sources(self) -> tuple:
        return ()


@dataclass(frozen=True, eq=False)
class Affine:
    """``out = sum_k W_k @ layer[src_k] + bias``; several sources model residual edges."""

    inputs: tuple
    bias: np.ndarray

    @property
    def size(self) -> int:
        return self.bias.shape[0]

    @property
    def sources(self) -> tuple:
        return tuple(s for s, _ in self.inputs)


@dataclass(frozen=True, eq=False)
class Activation:
    source: int
    size: int
    alpha: float
    kind: str = "leaky_relu"

    @property
    def sources(self) -> tuple:
        return (self.source,)


class LayeredNet:
    """Topologically ordered DAG of layers; layer 0 is the input, the last layer the output."""

    def __init__(self, layers: Sequence, output_names: Sequence = (), node_map: dict | None = None,
                 pred: Mlp | None = None, alpha: float | None = None):
        self.layers = tuple(layers)
        if not self.layers or not isinstance(self.layers[0], InputLayer):
            raise StructureError("layer 0 must be the input layer")
        for k, layer in enumerate(self.layers[1:], start=1):
            if isinstance(layer, InputLayer):
                raise StructureError(f"layer {k}: only layer 0 may be an input")
            for s in layer.sources:
                if not 0 <= s < k:
                    raise StructureError(f"layer {k} reads layer {s}, which does not precede it")
            if isinstance(layer, Affine):
                for s, w in layer.inputs:
                    if w.shape != (layer.size, self.layers[s].size):
                        raise StructureError(f"layer {k}: weight {w.shape} does not fit source {s} "
                                             f"of size {self.layers[s].size}")
            elif layer.size != self.layers[layer.source].size:
                raise StructureError(f"layer {k}: activation size differs from its source")
        self.output_names = tuple(output_names) or tuple(range(self.layers[-1].size))
        if len(self.output_names) != self.layers[-1].size:
            raise StructureError("one output name per output neuron is required")
        self.node_map = dict(node_map or {})
        self.pred = pred
        self.alpha = alpha

    def __len__(self):
        return len(self.layers)

    @property
    def sizes(self) -> list:
        return [layer.size for layer in self.layers]

    @property
    def input_size(self) -> int:
        return self.layers[0].size

    @property
    def output_size(self) -> int:
        return self.layers[-1].size

    @property
    def output_layer(self) -> int:
        return len(self.layers) - 1

    @cached_property
    def consumers(self) -> list:
        out = [[] for _ in self.layers]
        for k, layer in enumerate(self.layers):
            for s in set(layer.sources):
                out[s].append(k)
        return out

    def activation_layers(self) -> list:
        return [k for k, layer in enumerate(self.layers) if isinstance(layer, Activation)]

    def output_index(self, name) -> int:
        return self.output_names.index(name)

    @property
    def num_neurons(self) -> int:
        return sum(self.sizes[1:])

    def descendants(self, layer: int) -> list:
        seen = set()
        stack = [layer]
        while stack:
            k = stack.pop()
            for c in self.consumers[k]:
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        return sorted(seen)

    def refinement_order(self) -> list:
        """Post-order of a DFS along consumer edges: every layer follows all layers reading it."""
        order, seen = [], set()

        def visit(k):
            stack = [(k, iter(sorted(self.consumers[k])))]
            seen.add(k)
            while stack:
                node, it = stack[-1]
                for c in it:
                    if c not in seen:
                        seen.add(c)
                        stack.append((c, iter(sorted(self.consumers[c]))))
                        break
                else:
                    stack.pop()
                    order.append(node)

        for k in range(len(self.layers)):
            if k not in seen:
                visit(k)
        # visiting from the input may still miss layers unreachable from it (constant layers)
        return order

    def pruned(self) -> "LayeredNet":
        """Drop layers that do not reach the output."""
        live = {self.output_layer}
        for k in range(self.output_layer, -1, -1):
            if k in live:
                live.update(self.layers[k].sources)
        live.add(0)
        keep = sorted(live)
        remap = {old: new for new, old in enumerate(keep)}
        layers = []
        for k in keep:
            layer = self.layers[k]
            if isinstance(layer, Affine):
                layer = Affine(tuple((remap[s], w) for s, w in layer.inputs), layer.bias)
            elif isinstance(layer, Activation):
                layer = Activation(remap[layer.source], layer.size, layer.alpha, layer.kind)
            layers.append(layer)
        node_map = {key: (remap[l], idx) for key, (l, idx) in self.node_map.items() if l in remap}
        return LayeredNet(layers, self.output_names, node_map, self.pred, self.alpha)


def eval_layers(net: LayeredNet, x) -> list:
    """Values of every layer; ``x`` is ``(n0,)`` or ``(batch, n0)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_size:
        raise ValueError(f"input has {x.shape[-1]} entries, the network expects {net.input_size}")
    vals = [x]
    for layer in net.layers[1:]:
        if isinstance(layer, Affine):
            v = layer.bias + sum(vals[s] @ w.T for s, w in layer.inputs)
            vals.append(np.broadcast_to(v, x.shape[:-1] + (layer.size,)) if not layer.inputs else v)
        else:
            vals.append(leaky_relu(vals[layer.source], layer.alpha))
    return vals


def eval_concrete(net: LayeredNet, x) -> np.ndarray:
    return eval_layers(net, x)[-1]


# --------------------------------------------------------------------------
# unrolling

class NetBuilder:
    """Incremental construction of a :class:`LayeredNet`."""

    def __init__(self, n_inputs: int, alpha: float):
        self.layers: list = [InputLayer(n_inputs)]
        self.node_map: dict = {}
        self.alpha = alpha

    def affine(self, inputs, bias) -> int:
        merged: dict = {}
        for s, w in inputs:
            w = np.atleast_2d(np.asarray(w, dtype=float))
            merged[s] = merged[s] + w if s in merged else w
        self.layers.append(Affine(tuple(sorted(merged.items(), key=lambda t: t[0])), np.asarray(bias, dtype=float)))
        return len(self.layers) - 1

    def activation(self, source: int) -> int:
        self.layers.append(Activation(source, self.layers[source].size, self.alpha))
        return len(self.layers) - 1

    def mlp(self, mlp: Mlp, first_inputs, extra_last=(), extra_bias=0.0) -> int:
        """Encode ``mlp``; ``first_inputs`` pairs (layer, W) whose sum is ``W1 @ input``.

        ``extra_last`` adds residual sources to the final affine layer.
        """
        last = len(mlp.weights) - 1
        ins = list(first_inputs)
        k = None
        for i, b in enumerate(mlp.biases):
            if i:
                ins = [(k, mlp.weights[i])]
            if i == last:
                k = self.affine(ins + list(extra_last), b + extra_bias)
            else:
                k = self.activation(self.affine(ins, b))
        return k

    def build(self, outputs, pred=None) -> LayeredNet:
        """Append a gather layer over ``outputs`` = [(name, layer, index)]."""
        inputs = []
        for row, (_, layer, idx) in enumerate(outputs):
            w = np.zeros((len(outputs), self.layers[layer].size))
            w[row, idx] = 1.0
            inputs.append((layer, w))
        out = self.affine(inputs, np.zeros(len(outputs)))
        for row, (name, _, _) in enumerate(outputs):
            self.node_map[name] = (out, np.array([row]))
        return LayeredNet(self.layers, [o[0] for o in outputs], self.node_map, pred, self.alpha).pruned()


def input_block(graph0: JobGraph, node, dim: int) -> slice:
    p = graph0.position[node]
    return slice(p * dim, (p + 1) * dim)


class GnnEncoder:
    """Encodes GNN states over a fixed input layer holding the initial features."""

    def __init__(self, graph0: JobGraph, arch: GnnArch):
        if graph0.dim != arch.dim:
            raise StructureError(f"graph features have dimension {graph0.dim}, architecture expects {arch.dim}")
        self.graph0 = graph0
        self.arch = arch
        self.dim = arch.dim
        self.builder = NetBuilder(len(graph0.nodes) * arch.dim, arch.alpha)
        self.g_zero = arch.g(np.zeros(arch.f.out_dim), arch.alpha)
        for v in graph0.nodes:
            self.builder.node_map[("x", v)] = (0, np.arange(len(graph0.nodes) * self.dim)[input_block(graph0, v, self.dim)])

    def feature_source(self, node, fmap) -> tuple:
        """(layer 0, W), c with ``x_node = W @ input + c`` under the affine map ``fmap``."""
        m, c = fmap
        w = np.zeros((self.dim, self.builder.layers[0].size))
        w[:, input_block(self.graph0, node, self.dim)] = m
        return (0, w), c

    def encode_job(self, graph: JobGraph, nodes, fmaps: dict) -> dict:
        """Embedding layers of ``nodes`` (one job), leaves first."""
        b, arch = self.builder, self.arch
        emb, msg = {}, {}
        for v in graph.leaves_first(nodes):
            src, c = self.feature_source(v, fmaps[v])
            kids = graph.children(v)
            if kids:
                w1 = arch.g.weights[0]
                first = [(msg[k], w1) for k in kids]
                if len(arch.g.weights) == 1:
                    emb[v] = b.affine(first + [src], arch.g.biases[0] + c)
                else:
                    emb[v] = b.mlp(arch.g, first, extra_last=[src], extra_bias=c)
            else:
                emb[v] = b.affine([src], self.g_zero + c)
            if graph.parents(v):
                msg[v] = b.mlp(arch.f, [(emb[v], arch.f.weights[0])])
        return emb

    def encode_summary(self, graph: JobGraph, emb: dict, fmaps: dict) -> int | None:
        arch, d = self.arch, self.dim
        if arch.summary is None:
            return None
        w1 = arch.summary.weights[0]
        wx, we = w1[:, :d], w1[:, d:]
        first, const = [], np.zeros(w1.shape[0])
        for v in graph.nodes:
            (l0, w), c = self.feature_source(v, fmaps[v])
            first.append((l0, wx @ w))
            const = const + wx @ c
            first.append((emb[v], we))
        if len(arch.summary.weights) == 1:
            return self.builder.affine(first, arch.summary.biases[0] + const)
        first_layer = self.builder.activation(self.builder.affine(first, arch.summary.biases[0] + const))
        rest = Mlp(arch.summary.weights[1:], arch.summary.biases[1:])
        return self.builder.mlp(rest, [(first_layer, rest.weights[0])])

    def encode_pred(self, e_layer: int, y_layer: int | None) -> int:
        w1 = self.arch.pred.weights[0]
        first = [(e_layer, w1[:, :self.dim])]
        if y_layer is not None:
            first.append((y_layer, w1[:, self.dim:]))
        return self.builder.mlp(self.arch.pred, first)


def identity_maps(graph: JobGraph) -> dict:
    d = graph.dim
    return {v: (np.eye(d), np.zeros(d)) for v in graph.nodes}


def unroll(graph: JobGraph, arch: GnnArch, targets=None) -> LayeredNet:
    """Layered network mapping all node features (node-major) to the target scores.

    Outputs are named ``("s", node, 0)``; ``node_map`` also locates ``("x", v)``,
    ``("e", v, 0)`` and ``("y", 0)``.
    """
    targets = graph.frontier if targets is None else tuple(targets)
    missing = [t for t in targets if t not in graph.position]
    if missing:
        raise StructureError(f"targets {missing} are not graph nodes")
    enc = GnnEncoder(graph, arch)
    fmaps = identity_maps(graph)
    emb = {}
    for label in sorted(graph.jobs):
        emb.update(enc.encode_job(graph, graph.jobs[label], fmaps))
    y = enc.encode_summary(graph, emb, fmaps)
    b = enc.builder
    for v, layer in emb.items():
        b.node_map[("e", v, 0)] = (layer, np.arange(arch.dim))
    if y is not None:
        b.node_map[("y", 0)] = (y, np.arange(b.layers[y].size))
    outputs = []
    for v in targets:
        s = enc.encode_pred(emb[v], y)
        outputs.append((("s", v, 0), s, 0))
    return b.build(outputs, pred=arch.pred)


def features_to_input(graph: JobGraph, features=None) -> np.ndarray:
    x = graph.features if features is None else np.asarray(features, dtype=float)
    return x.reshape(x.shape[:-2] + (-1,))


def input_to_features(graph: JobGraph, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape[:-1] + (len(graph.nodes), graph.dim))


def embedding_neurons(net: LayeredNet, node, step: int = 0) -> tuple:
    key = ("e", node, step)
    if key not in net.node_map:
        raise StructureError(f"network has no embedding for node {node} at step {step}")
    return net.node_map[key]


def names_by_key(net: LayeredNet, kind: str) -> list:
    return [k for k in net.node_map if isinstance(k, tuple) and k and k[0] == kind]



def select_outputs(net: LayeredNet, names: Sequence) -> LayeredNet:
    """Same network restricted to the named outputs, with dead layers pruned."""
    last = net.layers[-1]
    if not isinstance(last, Affine):
        raise StructureError("the output layer must be affine to select outputs")
    rows = [net.output_index(n) for n in names]
    inputs = tuple((s, w[rows]) for s, w in last.inputs if np.any(w[rows]))
    layers = list(net.layers[:-1]) + [Affine(inputs, last.bias[rows])]
    node_map = {k: v for k, v in net.node_map.items() if v[0] != net.output_layer}
    out = len(layers) - 1
    for row, n in enumerate(names):
        node_map[n] = (out, np.array([row]))
    return LayeredNet(layers, names, node_map, net.pred, net.alpha).pruned()


def simulate(graph: JobGraph, arch: GnnArch, steps: int, system: TransitionSystem = TransitionSystem(),
             features=None) -> tuple:
    """Greedy rollout: schedule the top-scoring frontier node (ties to the smallest id)."""
    g = graph if features is None else graph.with_features(features)
    trace = []
    for _ in range(steps):
        if not g.nodes:
            break
        scores = gnn_scores(g, arch)
        best = max(g.frontier, key=lambda v: (scores[v], -v))
        trace.append(best)
        g = apply_transition(g, best, system)
    return tuple(trace)


def simulate_batch(graph: JobGraph, arch: GnnArch, steps: int, features, system: TransitionSystem = TransitionSystem()) -> list:
    """:func:`simulate` for a batch of initial feature matrices, grouping rows that share a prefix."""
    features = np.asarray(features, dtype=float)
    out = [()] * features.shape[0]
    groups = [(graph, features, np.arange(features.shape[0]), ())]
    for _ in range(steps):
        nxt = []
        for g, feats, rows, prefix in groups:
            if not g.nodes or not len(rows):
                continue
            scores = gnn_scores(g, arch, feats)
            front = g.frontier
            table = np.stack([scores[v] for v in front], axis=-1)
            # argmax keeps the first maximum, frontier is in node order
            choice = np.argmax(table, axis=-1)
            for ci, v in enumerate(front):
                sel = choice == ci
                if not np.any(sel):
                    continue
                trace = prefix + (v,)
                for r in rows[sel]:
                    out[r] = trace
                g2 = apply_transition(g, v, system)
                nf = _transition_features(g, v, system, feats[sel])
                nxt.append((g2, nf, rows[sel], trace))
        groups = nxt
    return out


def _transition_features(graph: JobGraph, action, system: TransitionSystem, feats) -> np.ndarray:
    feats = np.array(feats, dtype=float, copy=True)
    for v, m, b in system.updates(graph, action):
        k = graph.position[v]
        feats[:, k] = feats[:, k] @ m.T + b
    gone = set(system.removals(graph, action))
    keep = [k for k, v in enumerate(graph.nodes) if v not in gone]
    return feats[:, keep]
