"""LP encodings of a layered network and a complete branch-and-bound solver.

LPs go through ``scipy.optimize.linprog`` (HiGHS).  Activation layers are encoded
exactly when their phase is fixed and by the triangle relaxation otherwise.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .domain import InputRegion, LinCons
from .model import Activation, Affine, LayeredNet, eval_concrete

STRICT_EPS = 1e-6
WITNESS_TOL = 1e-6
LP_SLACK = 1e-6


class LpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    INDETERMINATE = "indeterminate"


@dataclass
class LpResult:
    status: LpStatus
    value: float = float("nan")
    point: np.ndarray | None = None


class Phase(str, Enum):
    POSITIVE = "+"
    NEGATIVE = "-"
    UNFIXED = "?"


@dataclass
class LpProblem:
    """``min/max c.x`` s.t. ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``lb <= x <= ub``."""

    lb: np.ndarray
    ub: np.ndarray
    ub_rows: list = field(default_factory=list)
    eq_rows: list = field(default_factory=list)
    names: list | None = None
    _cache: tuple | None = field(default=None, repr=False)

    @property
    def num_vars(self) -> int:
        return self.lb.shape[0]

    def add_le(self, cols, vals, rhs):
        self.ub_rows.append((np.asarray(cols, dtype=int), np.asarray(vals, dtype=float), float(rhs)))
        self._cache = None

    def add_eq(self, cols, vals, rhs):
        self.eq_rows.append((np.asarray(cols, dtype=int), np.asarray(vals, dtype=float), float(rhs)))
        self._cache = None

    def add_cons(self, cons: LinCons, index, strict_eps: float = 0.0):
        cols = [index(k) for k, _ in cons.coeffs]
        vals = [v for _, v in cons.coeffs]
        if cons.rel == "==":
            self.add_eq(cols, vals, cons.bound)
        else:
            self.add_le(cols, vals, cons.bound - (strict_eps if cons.strict else 0.0))

    def matrices(self):
        if self._cache is None:
            self._cache = (_stack(self.ub_rows, self.num_vars), _stack(self.eq_rows, self.num_vars))
        return self._cache

    @property
    def num_constraints(self) -> int:
        return len(self.ub_rows) + len(self.eq_rows)

    def copy(self) -> "LpProblem":
        return LpProblem(self.lb.copy(), self.ub.copy(), list(self.ub_rows), list(self.eq_rows), self.names)

    def to_lp_text(self, objective=None, sense: str = "min") -> str:
        name = (lambda j: self.names[j]) if self.names else (lambda j: f"x{j}")

        def expr(cols, vals):
            return " ".join(f"{'+' if v >= 0 else '-'} {abs(v):.12g} {name(c)}" for c, v in zip(cols, vals)) or "0"

        out = ["Minimize" if sense == "min" else "Maximize"]
        if objective is None:
            out.append(" obj: 0")
        else:
            nz = np.flatnonzero(objective)
            out.append(" obj: " + expr(nz, np.asarray(objective)[nz]))
        out.append("Subject To")
        for i, (c, v, r) in enumerate(self.ub_rows):
            out.append(f" u{i}: {expr(c, v)} <= {r:.12g}")
        for i, (c, v, r) in enumerate(self.eq_rows):
            out.append(f" e{i}: {expr(c, v)} = {r:.12g}")
        out.append("Bounds")
        for j in range(self.num_vars):
            lo = "-inf" if np.isneginf(self.lb[j]) else f"{self.lb[j]:.12g}"
            hi = "+inf" if np.isposinf(self.ub[j]) else f"{self.ub[j]:.12g}"
            out.append(f" {lo} <= {name(j)} <= {hi}")
        out.append("End")
        return "\n".join(out) + "\n"


def _stack(rows, n):
    if not rows:
        return None, None
    r = np.concatenate([np.full(len(c), i) for i, (c, _, _) in enumerate(rows)])
    c = np.concatenate([c for c, _, _ in rows])
    v = np.concatenate([v for _, v, _ in rows])
    a = sp.csr_matrix((v, (r, c)), shape=(len(rows), n))
    return a, np.array([b for _, _, b in rows])


def solve_lp(p: LpProblem, objective=None, sense: str = "min") -> LpResult:
    n = p.num_vars
    c = np.zeros(n) if objective is None else np.asarray(objective, dtype=float)
    if np.any(p.lb > p.ub + 1e-9):
        return LpResult(LpStatus.INFEASIBLE)
    if sense == "max":
        c = -c
    (a_ub, b_ub), (a_eq, b_eq) = p.matrices()
    bounds = np.column_stack([np.where(np.isfinite(p.lb), p.lb, -np.inf),
                              np.where(np.isfinite(p.ub), np.maximum(p.ub, p.lb), np.inf)])
    bounds = [(None if np.isneginf(lo) else lo, None if np.isposinf(hi) else hi) for lo, hi in bounds]
    try:
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs")
    except (ValueError, np.linalg.LinAlgError):
        return LpResult(LpStatus.INDETERMINATE)
    if res.status == 0:
        val = float(res.fun)
        return LpResult(LpStatus.OPTIMAL, -val if sense == "max" else val, res.x)
    if res.status == 2:
        return LpResult(LpStatus.INFEASIBLE)
    if res.status == 3:
        return LpResult(LpStatus.UNBOUNDED)
    return LpResult(LpStatus.INDETERMINATE)


# --------------------------------------------------------------------------
# network encodings

@dataclass
class NetEncoding:
    problem: LpProblem
    offsets: dict

    def var(self, layer: int, neuron: int) -> int:
        return self.offsets[layer] + neuron

    def block(self, layer: int, size: int) -> slice:
        return slice(self.offsets[layer], self.offsets[layer] + size)


def encode_relaxed(net: LayeredNet, boxes: Sequence, bad: Sequence[LinCons] = (), side: Sequence[LinCons] = (),
                   from_layer: int = 1, phases: dict | None = None, strict_eps: float = 0.0) -> NetEncoding:
    """LP over layers ``>= from_layer`` and their sources.

    ``boxes[k]`` are the (effective) bounds of layer ``k``; ``bad`` are the
    conjuncts of the negated postcondition over output neurons; ``side`` are
    linear input constraints, added when the input layer is part of the LP.
    ``phases`` maps ``(layer, neuron)`` to a :class:`Phase` for branching.
    """
    phases = phases or {}
    keep = set(range(max(from_layer, 1), len(net.layers)))
    for k in list(keep):
        keep.update(net.layers[k].sources)
    order = sorted(keep)
    offsets, n = {}, 0
    for k in order:
        offsets[k] = n
        n += net.layers[k].size
    lb = np.concatenate([np.asarray(boxes[k][0], dtype=float) for k in order])
    ub = np.concatenate([np.asarray(boxes[k][1], dtype=float) for k in order])
    p = LpProblem(lb, ub)
    enc = NetEncoding(p, offsets)
    for k in order:
        if k < from_layer or k == 0:
            continue
        layer = net.layers[k]
        base = offsets[k]
        if isinstance(layer, Affine):
            for i in range(layer.size):
                cols, vals = [base + i], [1.0]
                for s, w in layer.inputs:
                    nz = np.flatnonzero(w[i])
                    cols.extend(offsets[s] + nz)
                    vals.extend(-w[i, nz])
                p.add_eq(cols, vals, layer.bias[i])
        else:
            _encode_activation(p, net, boxes, k, layer, offsets, phases)
    if 0 in offsets:
        for c in side:
            p.add_cons(c, lambda j: offsets[0] + j, strict_eps)
    out = net.output_layer
    for c in bad:
        p.add_cons(c, lambda j: offsets[out] + j, strict_eps)
    return enc


def _encode_activation(p: LpProblem, net, boxes, k, layer: Activation, offsets, phases):
    a = layer.alpha
    src = offsets[layer.source]
    base = offsets[k]
    l_in, u_in = boxes[layer.source]
    for i in range(layer.size):
        x, y = src + i, base + i
        ph = phases.get((k, i), Phase.UNFIXED)
        l, u = l_in[i], u_in[i]
        if ph == Phase.POSITIVE or (ph == Phase.UNFIXED and l >= 0):
            p.add_eq([y, x], [1.0, -1.0], 0.0)
            if ph == Phase.POSITIVE:
                p.add_le([x], [-1.0], 0.0)
        elif ph == Phase.NEGATIVE or (ph == Phase.UNFIXED and u <= 0):
            p.add_eq([y, x], [1.0, -a], 0.0)
            if ph == Phase.NEGATIVE:
                p.add_le([x], [1.0], 0.0)
        else:
            p.add_le([x, y], [1.0, -1.0], 0.0)
            p.add_le([x, y], [a, -1.0], 0.0)
            if np.isfinite(l) and np.isfinite(u):
                lam = (u - a * l) / (u - l)
                p.add_le([y, x], [1.0, -lam], a * l - lam * l)


def tighten_layer(net: LayeredNet, layer: int, boxes: Sequence, bad: Sequence[LinCons], side: Sequence[LinCons],
                  neurons: Sequence[int] | None = None, from_layer: int | None = None, threads: int = 1,
                  deadline: float | None = None):
    """Min/max LPs for ``neurons`` of ``layer``.

    Returns ``(lb, ub, lp_calls, infeasible)``; bounds are clamped to the prior box.
    """
    enc = encode_relaxed(net, boxes, bad, side, layer if from_layer is None else from_layer)
    prior_l = np.asarray(boxes[layer][0], dtype=float)
    prior_u = np.asarray(boxes[layer][1], dtype=float)
    lb, ub = prior_l.copy(), prior_u.copy()
    neurons = list(range(net.layers[layer].size)) if neurons is None else list(neurons)
    if not neurons:
        return lb, ub, 0, False

    def run(i):
        if deadline is not None and time.monotonic() > deadline:
            return None, None, 0
        c = np.zeros(enc.problem.num_vars)
        c[enc.var(layer, i)] = 1.0
        lo = solve_lp(enc.problem, c, "min")
        if lo.status == LpStatus.INFEASIBLE:
            return lo, None, 1
        hi = solve_lp(enc.problem, c, "max")
        return lo, hi, 2

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, neurons))
    else:
        results = []
        for i in neurons:
            results.append(run(i))
            if results[-1][0] is not None and results[-1][0].status == LpStatus.INFEASIBLE:
                break
    calls = 0
    for i, (lo, hi, nc) in zip(neurons, results):
        calls += nc
        if lo is None:
            continue
        if lo.status == LpStatus.INFEASIBLE or (hi is not None and hi.status == LpStatus.INFEASIBLE):
            return lb, ub, calls, True
        if lo.status == LpStatus.OPTIMAL:
            lb[i] = max(lb[i], lo.value - LP_SLACK * (1 + abs(lo.value)))
        if hi is not None and hi.status == LpStatus.OPTIMAL:
            ub[i] = min(ub[i], hi.value + LP_SLACK * (1 + abs(hi.value)))
    if np.any(lb > ub + 1e-9):
        return lb, ub, calls, True
    return lb, np.maximum(ub, lb), calls, False


# --------------------------------------------------------------------------
# complete solver

class CompleteStatus(str, Enum):
    UNSAT = "unsat"
    SAT = "sat"
    TIMEOUT = "timeout"
    UNKNOWN = "unknown"


@dataclass
class CompleteResult:
    status: CompleteStatus
    witness: np.ndarray | None = None
    nodes: int = 0
    lp_calls: int = 0
    numeric_issue: bool = False


def is_witness(net: LayeredNet, region: InputRegion, bad: Sequence[LinCons], x, tol: float = WITNESS_TOL) -> bool:
    x = np.asarray(x, dtype=float)
    if not bool(region.contains(x, tol)):
        return False
    y = eval_concrete(net, x)
    for c in bad:
        lhs = float(c.lhs(y))
        if c.rel == "==":
            if abs(lhs - c.bound) > tol:
                return False
        elif lhs > c.bound + tol:
            return False
    return True


def unstable_neurons(net: LayeredNet, boxes) -> list:
    out = []
    for k, layer in enumerate(net.layers):
        if isinstance(layer, Activation):
            l, u = boxes[layer.source]
            out.extend((k, i) for i in np.flatnonzero((l < 0) & (u > 0)))
    return out


def solve_complete(net: LayeredNet, region: InputRegion, boxes: Sequence, bad: Sequence[LinCons],
                   deadline: float | None = None, strict_eps: float = STRICT_EPS) -> CompleteResult:
    """Branch and bound over activation phases; decides ``region and bad`` exactly."""
    todo = unstable_neurons(net, boxes)
    width = {(k, i): float(boxes[net.layers[k].source][1][i] - boxes[net.layers[k].source][0][i]) for k, i in todo}
    ranked = sorted(todo, key=lambda t: (-width[t], t[0], t[1]))
    stack = [{}]
    res = CompleteResult(CompleteStatus.UNSAT)
    while stack:
        if deadline is not None and time.monotonic() > deadline:
            res.status = CompleteStatus.TIMEOUT
            return res
        phases = stack.pop()
        res.nodes += 1
        enc = encode_relaxed(net, boxes, bad, region.side, 1, phases, strict_eps)
        lp = solve_lp(enc.problem)
        res.lp_calls += 1
        if lp.status == LpStatus.INFEASIBLE:
            continue
        if lp.status != LpStatus.OPTIMAL:
            res.numeric_issue = True
            continue
        x = np.clip(lp.point[enc.block(0, net.input_size)], region.lb, region.ub)
        if is_witness(net, region, bad, x):
            res.status = CompleteStatus.SAT
            res.witness = x
            return res
        nxt = next((t for t in ranked if t not in phases), None)
        if nxt is None:
            # every phase fixed yet no concrete witness: numerical trouble at this leaf
            res.numeric_issue = True
            continue
        stack.append({**phases, nxt: Phase.POSITIVE})
        stack.append({**phases, nxt: Phase.NEGATIVE})
    if res.numeric_issue:
        res.status = CompleteStatus.UNKNOWN
    return res
