"""Forward-backward abstraction refinement with an optional complete fallback.

Each layer keeps a forward element (over-approximating values under the
precondition) and a backward box (over-approximating values of executions that
also reach the bad output set).  Forward passes use the intersection of both;
backward passes tighten the boxes with one min and one max LP per neuron.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .domain import (InputRegion, LinCons, PolyElement, abstract_input, affine_transform, backsub, bottom,
                     cond, leaky_relu_transform, meet, top)
from .model import Activation, Affine, LayeredNet
from .solver import STRICT_EPS, CompleteStatus, is_witness, solve_complete, tighten_layer

MODES = ("forward", "fb-once", "fb-converge")
DEGENERATE_WIDTH = 1e-9


class Status(str, Enum):
    HOLD = "hold"
    NOT_HOLD = "not-hold"
    UNKNOWN = "unknown"

    @property
    def exit_code(self) -> int:
        return {Status.HOLD: 0, Status.NOT_HOLD: 1, Status.UNKNOWN: 2}[self]


@dataclass(frozen=True)
class EngineConfig:
    mode: str = "fb-converge"
    fallback: bool = False
    max_iterations: int = 6
    refine: str = "all"  # "all" or "unstable"
    depth: int | None = None
    threads: int = 1
    timeout: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.refine not in ("all", "unstable"):
            raise ValueError(f"refine must be 'all' or 'unstable', got {self.refine!r}")
        if self.timeout is not None and self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    @property
    def complete(self) -> bool:
        return self.fallback


@dataclass
class Verdict:
    status: Status
    witness: np.ndarray | None = None
    stats: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def hold(self) -> bool:
        return self.status == Status.HOLD


class Timeout(Exception):
    pass


@dataclass
class AnalysisState:
    forward: list
    backward: list
    iteration: int = 0
    fixed: list = field(default_factory=list)

    @classmethod
    def initial(cls, net: LayeredNet) -> "AnalysisState":
        return cls([top(s) for s in net.sizes], [top(s) for s in net.sizes])

    def box(self, k: int):
        f, b = self.forward[k], self.backward[k]
        return np.maximum(f.lb, b.lb), np.minimum(f.ub, b.ub)

    def boxes(self) -> list:
        return [self.box(k) for k in range(len(self.forward))]

    def is_bottom(self) -> bool:
        for k in range(len(self.forward)):
            if self.forward[k].bottom or self.backward[k].bottom:
                return True
            lo, hi = self.box(k)
            if np.any(lo > hi + 1e-9):
                return True
        return False

    def snapshot(self) -> dict:
        return {
            "forward": [e.widths().copy() for e in self.forward],
            "backward": [e.widths().copy() for e in self.backward],
        }


def fixed_phases(net: LayeredNet, boxes) -> int:
    n = 0
    for layer in net.layers:
        if isinstance(layer, Activation):
            l, u = boxes[layer.source]
            n += int(np.sum((l >= 0) | (u <= 0)))
    return n


def forward_pass(net: LayeredNet, state: AnalysisState, region: InputRegion, depth: int | None = None,
                 deadline: float | None = None) -> bool:
    """Recompute forward elements as the transformer image met with the old ones; False on bottom."""
    new = [meet(abstract_input(region), state.forward[0]) if state.forward[0].symbolic else abstract_input(region)]
    if new[0].bottom:
        state.forward = new + [bottom(s) for s in net.sizes[1:]]
        return False
    boxes = [_eff(new[0], state.backward[0])]
    for k, layer in enumerate(net.layers[1:], start=1):
        _check(deadline)
        if isinstance(layer, Affine):
            e = affine_transform(net, new, k, boxes, depth)
        else:
            e = leaky_relu_transform(net, k, boxes[layer.source])
        old = state.forward[k]
        e = meet(e, old) if not _is_top(old) else e
        new.append(e)
        if e.bottom:
            state.forward = new + [bottom(s) for s in net.sizes[k + 1:]]
            return False
        box = _eff(e, state.backward[k])
        if np.any(box[0] > box[1] + 1e-9):
            state.forward = new + [bottom(s) for s in net.sizes[k + 1:]]
            return False
        boxes.append(box)
    state.forward = new
    return True


def _is_top(e: PolyElement) -> bool:
    return not e.bottom and not e.symbolic and bool(np.all(np.isneginf(e.lb)) and np.all(np.isposinf(e.ub)))


def _eff(f: PolyElement, b: PolyElement):
    lo, hi = np.maximum(f.lb, b.lb), np.minimum(f.ub, b.ub)
    return lo, hi


def _check(deadline):
    if deadline is not None and time.monotonic() > deadline:
        raise Timeout


def split_equalities(bad: Sequence[LinCons]) -> list:
    out = []
    for c in bad:
        if c.rel == "==":
            out.append(LinCons(c.coeffs, c.bound, "<="))
            out.append(LinCons(tuple((k, -v) for k, v in c.coeffs), -c.bound, "<="))
        else:
            out.append(c)
    return out


def output_refuted(net: LayeredNet, state: AnalysisState, bad: Sequence[LinCons], depth=None) -> bool:
    """True when some bad conjunct is unsatisfiable over the forward abstraction."""
    conj = split_equalities(bad)
    if not conj:
        return False
    k = net.output_layer
    coef = np.array([c.vector(net.output_size) for c in conj])
    lows = backsub(net, state.forward, k, coef, np.zeros(len(conj)), state.boxes(), True, depth)
    return bool(np.any(lows > np.array([c.bound for c in conj]) + 1e-9))


def refinement_targets(net: LayeredNet, k: int, box, policy: str) -> list:
    lo, hi = box
    wide = (hi - lo) > DEGENERATE_WIDTH
    if policy == "all" or k == net.output_layer:
        return list(np.flatnonzero(wide))
    feeds = np.zeros(net.layers[k].size, dtype=bool)
    for c in net.consumers[k]:
        if isinstance(net.layers[c], Activation):
            feeds[:] = True
    return list(np.flatnonzero(wide & feeds & (lo < 0) & (hi > 0)))


def backward_pass(net: LayeredNet, state: AnalysisState, region: InputRegion, bad: Sequence[LinCons],
                  config: EngineConfig, deadline: float | None = None) -> tuple:
    """Refine backward boxes in post-order.  Returns (still_feasible, lp_calls)."""
    out = net.output_layer
    calls = 0
    b = cond(_as_box(state.forward[out]), split_equalities(bad))
    state.backward[out] = meet(b, state.backward[out])
    if state.backward[out].bottom:
        return False, calls
    for k in net.refinement_order():
        if k == 0:
            continue
        _check(deadline)
        boxes = state.boxes()
        targets = refinement_targets(net, k, boxes[k], config.refine)
        if not targets:
            continue
        lb, ub, nc, infeasible = tighten_layer(net, k, boxes, split_equalities(bad), region.side, targets,
                                               threads=config.threads, deadline=deadline)
        calls += nc
        if infeasible:
            state.backward[k] = bottom(net.sizes[k])
            return False, calls
        state.backward[k] = meet(PolyElement(lb, ub), state.backward[k])
        if state.backward[k].bottom:
            return False, calls
        layer = net.layers[k]
        if isinstance(layer, Activation) and layer.source != 0:
            # leaky ReLU is monotone and invertible: pull the refined box back to its source
            lo, hi = state.box(k)
            src = layer.source
            inv = PolyElement(_leaky_inverse(lo, layer.alpha), _leaky_inverse(hi, layer.alpha))
            state.backward[src] = meet(inv, state.backward[src])
            if state.backward[src].bottom:
                return False, calls
    return True, calls


def _leaky_inverse(v, alpha):
    return np.where(v >= 0, v, v / alpha)


def _as_box(e: PolyElement) -> PolyElement:
    return PolyElement(e.lb.copy(), e.ub.copy())


def analyze(net: LayeredNet, region: InputRegion, bad: Sequence[LinCons], config: EngineConfig = EngineConfig(),
            deadline: float | None = None, state: AnalysisState | None = None) -> Verdict:
    """Decide whether ``region`` can reach the conjunction ``bad`` over the outputs."""
    t0 = time.monotonic()
    if config.timeout is not None:
        own = t0 + config.timeout
        deadline = own if deadline is None else min(deadline, own)
    bad = tuple(bad)
    state = state or AnalysisState.initial(net)
    stats = {"mode": config.mode, "iterations": 0, "lp_calls": 0, "branch_nodes": 0, "fixed_phases": [],
             "fallback": False}
    if any(c.strict for c in bad):
        stats["strict_eps"] = STRICT_EPS if config.fallback else 0.0
    history: list = []

    def done(status, witness=None):
        stats["wall_time"] = time.monotonic() - t0
        stats["unstable"] = _count_unstable(net, state)
        return Verdict(status, witness, stats, history)

    def record(fixed):
        snap = state.snapshot()
        history.append({"iteration": state.iteration, "fixed": fixed,
                        "forward_width": [float(np.sum(w)) for w in snap["forward"]],
                        "backward_width": [float(np.sum(w)) for w in snap["backward"]],
                        "widths": snap})

    try:
        if not forward_pass(net, state, region, config.depth, deadline) or output_refuted(net, state, bad, config.depth):
            record(fixed_phases(net, state.boxes()) if not state.is_bottom() else 0)
            return done(Status.HOLD)
        fixed = fixed_phases(net, state.boxes())
        stats["fixed_phases"].append(fixed)
        record(fixed)
        rounds = {"forward": 0, "fb-once": 1, "fb-converge": config.max_iterations}[config.mode]
        while state.iteration < rounds:
            state.iteration += 1
            stats["iterations"] = state.iteration
            ok, calls = backward_pass(net, state, region, bad, config, deadline)
            stats["lp_calls"] += calls
            if not ok:
                record(0)
                return done(Status.HOLD)
            if not forward_pass(net, state, region, config.depth, deadline) or output_refuted(net, state, bad, config.depth):
                record(0)
                return done(Status.HOLD)
            now = fixed_phases(net, state.boxes())
            stats["fixed_phases"].append(now)
            record(now)
            if config.mode == "fb-converge" and now <= fixed:
                break
            fixed = now
    except Timeout:
        stats["timeout"] = True
        return done(Status.UNKNOWN)
    if not config.fallback:
        return done(Status.UNKNOWN)
    stats["fallback"] = True
    res = solve_complete(net, region, state.boxes(), bad, deadline)
    stats["branch_nodes"] = res.nodes
    stats["lp_calls"] += res.lp_calls
    if res.numeric_issue:
        stats["numeric_issue"] = True
    if res.status == CompleteStatus.UNSAT:
        return done(Status.HOLD)
    if res.status == CompleteStatus.SAT and is_witness(net, region, bad, res.witness):
        return done(Status.NOT_HOLD, res.witness)
    if res.status == CompleteStatus.TIMEOUT:
        stats["timeout"] = True
    return done(Status.UNKNOWN)


def _count_unstable(net: LayeredNet, state: AnalysisState) -> int:
    if state.is_bottom():
        return 0
    total = sum(net.sizes[k] for k in net.activation_layers())
    return total - fixed_phases(net, state.boxes())


def forward_boxes(net: LayeredNet, region: InputRegion, depth: int | None = None) -> list:
    """Bounding boxes of plain forward analysis under ``region`` alone."""
    state = AnalysisState.initial(net)
    forward_pass(net, state, region, depth)
    return [(e.lb, e.ub) for e in state.forward]
