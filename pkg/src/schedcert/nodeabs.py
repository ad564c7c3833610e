"""Node abstraction: prove a per-node property for many nodes with one query.

The embeddings of a set ``A`` of target nodes are replaced by one free vector
``e~`` constrained to the interval join of their forward boxes; a single copy
of the prediction network then scores ``e~`` against the shared summary.  If
the abstract score satisfies the property, so does every node in ``A``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .domain import InputRegion, LinCons
from .fb import EngineConfig, Status, Verdict, analyze, forward_boxes
from .model import Affine, InputLayer, LayeredNet, NetBuilder, StructureError, select_outputs

S_TILDE = ("s~",)
WIDTH_FLOOR = 1e-12


@dataclass(frozen=True)
class ScoreTemplate:
    """Bad set of target ``v``: ``extra`` and ``s_v - s_j >= 0`` (``> 0`` if strict) for each competitor ``j != v``.

    ``extra`` holds shared conjuncts ``(coeffs by output name, bound, rel)``.
    """

    competitors: tuple
    strict: bool = False
    extra: tuple = ()

    def conjuncts(self, target, skip=()) -> list:
        out = []
        for j in self.competitors:
            if j == target or j in skip:
                continue
            out.append(({target: 1.0, j: -1.0}, 0.0, ">" if self.strict else ">="))
        return out + list(self.extra)

    def names(self, target, skip=()) -> set:
        names = {target}
        for coeffs, _, _ in self.conjuncts(target, skip):
            names.update(coeffs)
        return names


def to_lincons(conjuncts, index) -> list:
    out = []
    for coeffs, bound, rel in conjuncts:
        cf = {index[n]: v for n, v in coeffs.items()}
        if rel == ">=":
            out.append(LinCons.ge(cf, bound))
        elif rel == ">":
            out.append(LinCons.gt(cf, bound))
        elif rel == "<=":
            out.append(LinCons.le(cf, bound))
        elif rel == "<":
            out.append(LinCons.lt(cf, bound))
        elif rel == "==":
            out.append(LinCons.eq(cf, bound))
        else:
            raise ValueError(f"unknown relation {rel!r}")
    return out


def embedding_key(target) -> tuple:
    _, v, step = target
    return ("e", v, step)


def embedding_boxes(net: LayeredNet, region: InputRegion, targets: Sequence, boxes=None) -> dict:
    """Forward-analysis box of each target's embedding, keyed by target output name."""
    boxes = boxes if boxes is not None else forward_boxes(net, region)
    out = {}
    for t in targets:
        key = embedding_key(t)
        if key not in net.node_map:
            raise StructureError(f"no embedding recorded for {t}")
        layer, idx = net.node_map[key]
        out[t] = (np.asarray(boxes[layer][0])[idx].copy(), np.asarray(boxes[layer][1])[idx].copy())
    return out


def join_invariant(boxes: Sequence) -> tuple:
    boxes = list(boxes)
    if not boxes:
        raise ValueError("join of an empty set of boxes")
    lo = np.min([np.asarray(b[0], dtype=float) for b in boxes], axis=0)
    hi = np.max([np.asarray(b[1], dtype=float) for b in boxes], axis=0)
    return lo, hi


def log_volume(box) -> float:
    lo, hi = box
    return float(np.sum(np.log(np.maximum(np.asarray(hi) - np.asarray(lo), WIDTH_FLOOR))))


def pick_node(active: Sequence, boxes: dict):
    """Member whose removal shrinks the join's volume the most; ties go to the smallest id."""
    active = sorted(active)
    if len(active) == 1:
        return active[0]
    full = log_volume(join_invariant([boxes[a] for a in active]))
    best, gain = None, -np.inf
    for a in active:
        rest = join_invariant([boxes[b] for b in active if b != a])
        g = full - log_volume(rest)
        if g > gain + 1e-12:
            best, gain = a, g
    return best


def build_abstract_net(net: LayeredNet, step_of_y, invariant, keep: Sequence) -> LayeredNet:
    """Net over inputs ``[x, e~]`` whose outputs are ``keep`` followed by ``s~ = pred(e~, y)``."""
    if net.pred is None or net.alpha is None:
        raise StructureError("network carries no prediction network to copy")
    sub = select_outputs(net, list(keep)) if keep else net
    lo, hi = invariant
    d = len(lo)
    n0 = sub.input_size
    layers = [InputLayer(n0 + d)]
    for layer in sub.layers[1:-1]:
        if isinstance(layer, Affine):
            layer = Affine(tuple((s, _pad(w, d) if s == 0 else w) for s, w in layer.inputs), layer.bias)
        layers.append(layer)
    b = NetBuilder(n0 + d, sub.alpha)
    b.layers = layers
    b.node_map = {k: v for k, v in sub.node_map.items() if v[0] != sub.output_layer}
    w1 = sub.pred.weights[0]
    e_cols = np.zeros((w1.shape[0], n0 + d))
    e_cols[:, n0:] = w1[:, :d]
    first = [(0, e_cols)]
    y_key = ("y", step_of_y)
    if w1.shape[1] > d:
        if y_key not in sub.node_map:
            raise StructureError(f"summary {y_key} missing from the network")
        y_layer, y_idx = sub.node_map[y_key]
        wy = np.zeros((w1.shape[0], sub.layers[y_layer].size))
        wy[:, y_idx] = w1[:, d:]
        first.append((y_layer, wy))
    s_layer = b.mlp(sub.pred, first)
    last = sub.layers[-1]
    ins = [(s, np.vstack([w, np.zeros((1, w.shape[1]))])) for s, w in last.inputs] if keep else []
    sel = np.zeros((len(keep) + 1, 1))
    sel[-1, 0] = 1.0
    ins.append((s_layer, sel))
    out = b.affine(ins, np.concatenate([last.bias, [0.0]]) if keep else np.zeros(1))
    names = list(keep) + [S_TILDE]
    for row, n in enumerate(names):
        b.node_map[n] = (out, np.array([row]))
    return LayeredNet(b.layers, names, b.node_map, sub.pred, sub.alpha).pruned()


def _pad(w, d):
    return np.hstack([w, np.zeros((w.shape[0], d))])


@dataclass
class NodeAbsResult:
    verdict: Verdict
    failing: list = field(default_factory=list)
    unknown: list = field(default_factory=list)
    witnesses: dict = field(default_factory=dict)
    abstract_attempts: int = 0
    abstract_successes: int = 0
    individual_checks: int = 0


def check_individual(net: LayeredNet, region: InputRegion, template: ScoreTemplate, target,
                     config: EngineConfig, deadline=None) -> Verdict:
    names = sorted(template.names(target), key=repr)
    sub = select_outputs(net, names)
    index = {n: i for i, n in enumerate(sub.output_names)}
    return analyze(sub, region, to_lincons(template.conjuncts(target), index), config, deadline)


def check_abstract(net: LayeredNet, region: InputRegion, template: ScoreTemplate, active: Sequence,
                   invariant, config: EngineConfig, deadline=None) -> Verdict:
    step = active[0][2]
    skip = set(active)
    conj = template.conjuncts(S_TILDE, skip)
    keep = sorted({n for c, _, _ in conj for n in c if n != S_TILDE}, key=repr)
    anet = build_abstract_net(net, step, invariant, keep)
    index = {n: i for i, n in enumerate(anet.output_names)}
    lo, hi = invariant
    aregion = InputRegion(np.concatenate([region.lb, lo]), np.concatenate([region.ub, hi]), region.side)
    return analyze(anet, aregion, to_lincons(conj, index), config, deadline)


def node_abstraction(net: LayeredNet, region: InputRegion, targets: Sequence, template: ScoreTemplate,
                     config: EngineConfig = EngineConfig(), stop_on_failure: bool = True,
                     abstraction: bool = True, deadline: float | None = None, psi: dict | None = None) -> NodeAbsResult:
    """Refinement loop over the active set; with ``stop_on_failure=False`` all failing targets are collected."""
    t0 = time.monotonic()
    targets = sorted(targets, key=repr)
    if abstraction and psi is None:
        psi = embedding_boxes(net, region, targets)
    res = NodeAbsResult(Verdict(Status.HOLD))
    active = list(targets)
    confirmed: set = set()
    stats = {"lp_calls": 0, "branch_nodes": 0}

    def absorb(v: Verdict):
        stats["lp_calls"] += v.stats.get("lp_calls", 0)
        stats["branch_nodes"] += v.stats.get("branch_nodes", 0)

    while len(confirmed) < len(targets) and active:
        if abstraction and len(active) > 1:
            inv = join_invariant([psi[a] for a in active])
            res.abstract_attempts += 1
            v = check_abstract(net, region, template, active, inv, config, deadline)
            absorb(v)
            if v.status == Status.HOLD:
                res.abstract_successes += 1
                confirmed.update(active)
                active = []
                break
            k = pick_node(active, psi)
        else:
            k = min(active, key=repr)
        active.remove(k)
        res.individual_checks += 1
        v = check_individual(net, region, template, k, config, deadline)
        absorb(v)
        confirmed.add(k)
        if v.status == Status.HOLD:
            continue
        if v.status == Status.NOT_HOLD:
            res.failing.append(k)
            res.witnesses[k] = v.witness
            if stop_on_failure:
                res.verdict = Verdict(Status.NOT_HOLD, v.witness, {})
                break
        else:
            res.unknown.append(k)
    if res.verdict.status != Status.NOT_HOLD:
        res.verdict = Verdict(Status.UNKNOWN if res.unknown or res.failing else Status.HOLD)
        if res.failing:
            res.verdict = Verdict(Status.NOT_HOLD, res.witnesses[res.failing[0]])
    res.verdict.stats.update(stats, wall_time=time.monotonic() - t0, abstract_attempts=res.abstract_attempts,
                             abstract_successes=res.abstract_successes, individual_checks=res.individual_checks,
                             unknown=list(res.unknown), failing=list(res.failing))
    return res


def check_with_node_abstraction(net, region, targets, template, config=EngineConfig(), **kw) -> Verdict:
    return node_abstraction(net, region, targets, template, config, **kw).verdict
