"""DeepPoly-style abstract domain over a :class:`LayeredNet`.

Every layer carries a :class:`PolyElement`: a concrete box plus, optionally, one
affine lower and one affine upper bound per neuron over the layer's source
layers.  Concrete bounds come from back-substituting those symbolic bounds down
to the input box.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import Activation, Affine, LayeredNet

BOTTOM_SLACK = 1e-9
COEF_FLOOR = 1e-12


# --------------------------------------------------------------------------
# linear constraints

@dataclass(frozen=True)
class LinCons:
    """``sum_k coeffs[k] * v_k  rel  bound`` with ``rel`` one of ``<=``, ``<``, ``==``."""

    coeffs: tuple
    bound: float
    rel: str = "<="

    def __post_init__(self):
        if self.rel not in ("<=", "<", "=="):
            raise ValueError(f"relation must be <=, < or ==, got {self.rel!r}")
        items = dict(self.coeffs.items() if isinstance(self.coeffs, Mapping) else self.coeffs)
        clean = tuple(sorted((int(k), float(v)) for k, v in items.items() if v != 0.0))
        if not all(np.isfinite(v) for _, v in clean) or not np.isfinite(self.bound):
            raise ValueError("constraint coefficients must be finite")
        object.__setattr__(self, "coeffs", clean)
        object.__setattr__(self, "bound", float(self.bound))

    @classmethod
    def le(cls, coeffs, bound):
        return cls(coeffs, bound, "<=")

    @classmethod
    def lt(cls, coeffs, bound):
        return cls(coeffs, bound, "<")

    @classmethod
    def ge(cls, coeffs, bound):
        return cls(_negate(coeffs), -bound, "<=")

    @classmethod
    def gt(cls, coeffs, bound):
        return cls(_negate(coeffs), -bound, "<")

    @classmethod
    def eq(cls, coeffs, bound):
        return cls(coeffs, bound, "==")

    @property
    def strict(self) -> bool:
        return self.rel == "<"

    @property
    def trivial(self) -> bool:
        return not self.coeffs

    def vector(self, n: int) -> np.ndarray:
        a = np.zeros(n)
        for k, v in self.coeffs:
            a[k] = v
        return a

    def lhs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return sum((v * x[..., k] for k, v in self.coeffs), np.zeros(x.shape[:-1]))

    def holds(self, x, tol: float = 0.0):
        lhs = self.lhs(x)
        if self.rel == "==":
            return np.abs(lhs - self.bound) <= tol
        if self.rel == "<":
            return lhs < self.bound + tol
        return lhs <= self.bound + tol

    def shifted(self, offset: int) -> "LinCons":
        return LinCons(tuple((k + offset, v) for k, v in self.coeffs), self.bound, self.rel)

    def remapped(self, index) -> "LinCons":
        return LinCons(tuple((index[k], v) for k, v in self.coeffs), self.bound, self.rel)

    def to_dict(self) -> dict:
        return {"coeffs": [[k, v] for k, v in self.coeffs], "bound": self.bound, "rel": self.rel}

    @classmethod
    def from_dict(cls, d: dict) -> "LinCons":
        return cls(tuple((int(k), float(v)) for k, v in d["coeffs"]), d["bound"], d["rel"])

    def __str__(self):
        terms = " + ".join(f"{v:g}*v{k}" for k, v in self.coeffs) or "0"
        return f"{terms} {self.rel} {self.bound:g}"


def _negate(coeffs):
    items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
    return tuple((k, -v) for k, v in items)


def all_hold(cons: Sequence[LinCons], x, tol: float = 0.0):
    x = np.asarray(x, dtype=float)
    ok = np.ones(x.shape[:-1], dtype=bool)
    for c in cons:
        ok &= c.holds(x, tol)
    return ok


@dataclass(frozen=True, eq=False)
class InputRegion:
    """Box over the input neurons plus linear side constraints."""

    lb: np.ndarray
    ub: np.ndarray
    side: tuple = ()

    def __post_init__(self):
        lb = np.asarray(self.lb, dtype=float).reshape(-1)
        ub = np.asarray(self.ub, dtype=float).reshape(-1)
        if lb.shape != ub.shape:
            raise ValueError("lower and upper bound vectors differ in length")
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        object.__setattr__(self, "side", tuple(self.side))
        for c in self.side:
            if c.coeffs and c.coeffs[-1][0] >= lb.shape[0]:
                raise ValueError(f"side constraint {c} references an unknown input")

    @property
    def size(self) -> int:
        return self.lb.shape[0]

    @property
    def empty_box(self) -> bool:
        return bool(np.any(self.lb > self.ub))

    def contains(self, x, tol: float = 1e-9):
        x = np.asarray(x, dtype=float)
        ok = np.all((x >= self.lb - tol) & (x <= self.ub + tol), axis=-1)
        return ok & all_hold(self.side, x, tol)

    def sample(self, rng: np.random.Generator, n: int, max_tries: int = 50) -> np.ndarray:
        """Uniform samples from the box filtered by the side constraints."""
        out, tries = [], 0
        while sum(len(o) for o in out) < n and tries < max_tries:
            pts = rng.uniform(self.lb, self.ub, size=(max(n, 16), self.size))
            out.append(pts[self.contains(pts)])
            tries += 1
        pts = np.concatenate(out) if out else np.zeros((0, self.size))
        return pts[:n]


# --------------------------------------------------------------------------
# elements

@dataclass(frozen=True, eq=False)
class PolyElement:
    """Abstract value of one layer.

    ``lower``/``upper`` map source layer -> coefficient matrix; together with the
    constant vectors they give per-neuron affine bounds.  ``None`` means the
    element is a plain box (used for backward elements and top).
    """

    lb: np.ndarray
    ub: np.ndarray
    lower: dict | None = None
    lower_const: np.ndarray | None = None
    upper: dict | None = None
    upper_const: np.ndarray | None = None
    bottom: bool = False
    side: tuple = ()

    @property
    def size(self) -> int:
        return self.lb.shape[0]

    @property
    def symbolic(self) -> bool:
        return self.lower is not None

    def box(self):
        if self.bottom:
            raise ValueError("bottom element has no bounding box")
        return self.lb, self.ub

    def contains(self, x, tol: float = 1e-9):
        if self.bottom:
            return np.zeros(np.asarray(x).shape[:-1], dtype=bool)
        return np.all((x >= self.lb - tol) & (x <= self.ub + tol), axis=-1)

    def widths(self) -> np.ndarray:
        return np.zeros(self.size) if self.bottom else self.ub - self.lb


def top(size: int) -> PolyElement:
    return PolyElement(np.full(size, -np.inf), np.full(size, np.inf))


def bottom(size: int) -> PolyElement:
    return PolyElement(np.full(size, np.inf), np.full(size, -np.inf), bottom=True)


def box_element(lb, ub, side=()) -> PolyElement:
    lb = np.asarray(lb, dtype=float).copy()
    ub = np.asarray(ub, dtype=float).copy()
    if np.any(lb > ub + BOTTOM_SLACK):
        return bottom(lb.shape[0])
    ub = np.maximum(ub, lb)
    return PolyElement(lb, ub, side=tuple(side))


def abstract_input(region: InputRegion) -> PolyElement:
    """Exact box abstraction; side constraints ride along for the LP encodings."""
    if region.empty_box:
        return bottom(region.size)
    eye = {}
    return PolyElement(region.lb.copy(), region.ub.copy(), eye, region.lb.copy(), eye, region.ub.copy(),
                       side=region.side)


def bounding_box(elem: PolyElement):
    return elem.box()


def meet(a: PolyElement, b: PolyElement) -> PolyElement:
    if a.size != b.size:
        raise ValueError("meet of elements with different arity")
    if a.bottom or b.bottom:
        return bottom(a.size)
    lb = np.maximum(a.lb, b.lb)
    ub = np.minimum(a.ub, b.ub)
    if np.any(lb > ub + BOTTOM_SLACK):
        return bottom(a.size)
    ub = np.maximum(ub, lb)
    side = a.side + tuple(c for c in b.side if c not in a.side)
    if not a.symbolic and not b.symbolic:
        return PolyElement(lb, ub, side=side)
    if not b.symbolic or not a.symbolic:
        src = a if a.symbolic else b
        return PolyElement(lb, ub, src.lower, src.lower_const, src.upper, src.upper_const, side=side)
    take_b_low = b.lb > a.lb
    take_b_up = b.ub < a.ub
    lower, lc = _pick_rows(a.lower, a.lower_const, b.lower, b.lower_const, take_b_low, a.size)
    upper, uc = _pick_rows(a.upper, a.upper_const, b.upper, b.upper_const, take_b_up, a.size)
    return PolyElement(lb, ub, lower, lc, upper, uc, side=side)


def _pick_rows(ma, ca, mb, cb, take_b, n):
    if not np.any(take_b):
        return ma, ca
    if np.all(take_b):
        return mb, cb
    out = {}
    for s in set(ma) | set(mb):
        wa = ma.get(s)
        wb = mb.get(s)
        shape = (wa if wa is not None else wb).shape
        wa = np.zeros(shape) if wa is None else wa
        wb = np.zeros(shape) if wb is None else wb
        out[s] = np.where(take_b[:, None], wb, wa)
    return out, np.where(take_b, cb, ca)


def cond(elem: PolyElement, cons: Sequence[LinCons], rounds: int = 20) -> PolyElement:
    """Interval tightening by ``cons`` (over this layer's neurons), kept as side constraints."""
    if elem.bottom:
        return elem
    lb, ub = elem.lb.copy(), elem.ub.copy()
    cons = tuple(cons)
    for c in cons:
        if c.trivial:
            bad = 0.0 > c.bound + BOTTOM_SLACK or (c.rel == "==" and abs(c.bound) > BOTTOM_SLACK)
            if bad:
                return bottom(elem.size)
    rows = []
    for c in cons:
        if c.trivial:
            continue
        idx = np.array([k for k, _ in c.coeffs])
        a = np.array([v for _, v in c.coeffs])
        rows.append((idx, a, c.bound))
        if c.rel == "==":
            rows.append((idx, -a, -c.bound))
    for _ in range(rounds):
        changed = False
        for idx, a, b in rows:
            lo = np.where(a > 0, a * lb[idx], a * ub[idx])
            inf = ~np.isfinite(lo)
            n_inf = int(inf.sum())
            if n_inf > 1:
                continue
            total = float(np.sum(np.where(inf, 0.0, lo)))
            for j, (k, aj) in enumerate(zip(idx, a)):
                if (n_inf and not inf[j]) or abs(aj) < COEF_FLOOR:
                    continue
                limit = (b - (total - (0.0 if inf[j] else lo[j]))) / aj
                if aj > 0 and limit < ub[k] - 1e-12:
                    ub[k] = limit
                    changed = True
                elif aj < 0 and limit > lb[k] + 1e-12:
                    lb[k] = limit
                    changed = True
            if np.any(lb > ub + BOTTOM_SLACK):
                return bottom(elem.size)
        if not changed:
            break
    ub = np.maximum(ub, lb)
    return PolyElement(lb, ub, elem.lower, elem.lower_const, elem.upper, elem.upper_const,
                       side=elem.side + tuple(c for c in cons if c not in elem.side))


def cond_box(elem: PolyElement, lb, ub) -> PolyElement:
    """cond with the per-neuron bound constraints ``lb <= x <= ub``."""
    return meet(elem, PolyElement(np.asarray(lb, dtype=float), np.asarray(ub, dtype=float)))


# --------------------------------------------------------------------------
# back-substitution

def backsub(net: LayeredNet, elems: Sequence[PolyElement], layer: int, coef: np.ndarray, const,
            boxes: Sequence | None = None, lower: bool = True, depth: int | None = None) -> np.ndarray:
    """Lower (or upper) bounds of ``coef @ x_layer + const`` by substituting to the input.

    ``boxes[k]`` is the box used when a layer is concretized (the input layer
    always, and layers further than ``depth`` below ``layer``).
    """
    coef = np.atleast_2d(np.asarray(coef, dtype=float))
    acc = np.broadcast_to(np.asarray(const, dtype=float), coef.shape[:1]).copy()
    sign = 1.0 if lower else -1.0
    pending = {layer: coef * sign}
    acc *= sign
    while pending:
        k = max(pending)
        c = pending.pop(k)
        if not c.any():
            continue
        e = elems[k]
        stop = k == 0 or not e.symbolic or (depth is not None and layer - k > depth)
        if stop:
            lb, ub = (boxes[k] if boxes is not None else (e.lb, e.ub))
            acc += np.maximum(c, 0.0) @ _finite(lb, -1) + np.minimum(c, 0.0) @ _finite(ub, 1)
            continue
        cp, cn = np.maximum(c, 0.0), np.minimum(c, 0.0)
        # minimizing: positive coefficients take the lower relaxation, negative the upper
        for s in set(e.lower) | set(e.upper):
            add = 0.0
            if s in e.lower:
                add = add + cp @ e.lower[s]
            if s in e.upper:
                add = add + cn @ e.upper[s]
            pending[s] = pending[s] + add if s in pending else add
        acc += cp @ e.lower_const + cn @ e.upper_const
    return acc * sign


def _finite(v, sgn):
    # infinite box ends only appear for unbounded inputs; keep arithmetic defined
    return np.where(np.isfinite(v), v, sgn * 1e30)


def interval_affine(layer: Affine, boxes) -> tuple:
    lo = layer.bias.copy()
    hi = layer.bias.copy()
    for s, w in layer.inputs:
        l, u = boxes[s]
        wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
        lo = lo + wp @ l + wn @ u
        hi = hi + wp @ u + wn @ l
    return lo, hi


def leaky(x, alpha):
    return np.where(x >= 0, x, alpha * x)


def relaxation(l, u, alpha):
    """Per-neuron (lower slope, upper slope, upper const) of the leaky ReLU relaxation."""
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    pos = l >= 0
    neg = u <= 0
    unstable = ~(pos | neg)
    low = np.where(neg, alpha, 1.0)
    up = np.where(neg, alpha, 1.0)
    upc = np.zeros_like(l)
    if np.any(unstable):
        lu, uu = l[unstable], u[unstable]
        lam = (uu - alpha * lu) / (uu - lu)
        up[unstable] = lam
        upc[unstable] = alpha * lu - lam * lu
        # area heuristic; ties keep the identity
        low[unstable] = np.where(-lu <= uu, 1.0, alpha)
    return low, up, upc


def affine_transform(net: LayeredNet, elems: Sequence[PolyElement], k: int, boxes=None,
                     depth: int | None = None) -> PolyElement:
    layer = net.layers[k]
    if not isinstance(layer, Affine):
        raise TypeError(f"layer {k} is not affine")
    if any(elems[s].bottom for s in layer.sources):
        return bottom(layer.size)
    for s, w in layer.inputs:
        if w.shape[1] != elems[s].size:
            raise ValueError(f"layer {k}: source {s} has {elems[s].size} neurons, weight expects {w.shape[1]}")
    sym = dict(layer.inputs)
    tmp = list(elems[:k]) + [PolyElement(np.zeros(layer.size), np.zeros(layer.size), sym, layer.bias, sym, layer.bias)]
    eye = np.eye(layer.size)
    lo = backsub(net, tmp, k, eye, np.zeros(layer.size), boxes, True, depth)
    hi = backsub(net, tmp, k, eye, np.zeros(layer.size), boxes, False, depth)
    ilo, ihi = interval_affine(layer, boxes if boxes is not None else [(e.lb, e.ub) for e in elems])
    lo, hi = np.maximum(lo, ilo), np.minimum(hi, ihi)
    hi = np.maximum(hi, lo)
    return PolyElement(lo, hi, sym, layer.bias, sym, layer.bias)


def leaky_relu_transform(net: LayeredNet, k: int, pre_box, alpha: float | None = None) -> PolyElement:
    """Transformer of activation layer ``k`` given its source's (effective) box."""
    layer = net.layers[k]
    if not isinstance(layer, Activation):
        raise TypeError(f"layer {k} is not an activation")
    alpha = layer.alpha if alpha is None else alpha
    l, u = pre_box
    if np.any(l > u + BOTTOM_SLACK):
        return bottom(layer.size)
    low, up, upc = relaxation(l, u, alpha)
    z = np.zeros(layer.size)
    return PolyElement(leaky(l, alpha), leaky(u, alpha), {layer.source: np.diag(low)}, z,
                       {layer.source: np.diag(up)}, upc)


def forward_elements(net: LayeredNet, region: InputRegion, depth: int | None = None) -> list:
    """Plain forward analysis: one element per layer."""
    elems = [abstract_input(region)]
    if elems[0].bottom:
        return elems + [bottom(layer.size) for layer in net.layers[1:]]
    for k, layer in enumerate(net.layers[1:], start=1):
        boxes = [(e.lb, e.ub) for e in elems]
        if isinstance(layer, Affine):
            elems.append(affine_transform(net, elems, k, boxes, depth))
        else:
            elems.append(leaky_relu_transform(net, k, boxes[layer.source]))
    return elems


def backsub_bounds(net: LayeredNet, elems, layer: int, coef, const=0.0, boxes=None, depth=None):
    """(lower, upper) of ``coef @ x_layer + const`` over the abstraction."""
    return (backsub(net, elems, layer, coef, const, boxes, True, depth),
            backsub(net, elems, layer, coef, const, boxes, False, depth))


def dump_tsv(net: LayeredNet, elems: Sequence[PolyElement]) -> str:
    """Per-neuron table: layer, neuron, l, u, symbolic lower, symbolic upper."""
    lines = ["layer\tneuron\tl\tu\tsym_lower\tsym_upper"]
    for k, e in enumerate(elems):
        for i in range(e.size):
            lo, hi = ("bottom", "bottom") if e.bottom else (f"{e.lb[i]:.9g}", f"{e.ub[i]:.9g}")
            lines.append(f"{k}\t{i}\t{lo}\t{hi}\t{_expr(e.lower, e.lower_const, i)}\t{_expr(e.upper, e.upper_const, i)}")
    return "\n".join(lines) + "\n"


def _expr(mats, const, i) -> str:
    if mats is None or not mats:
        return "-"
    terms = []
    for s in sorted(mats):
        row = mats[s][i]
        terms += [f"{v:.6g}*L{s}[{j}]" for j, v in enumerate(row) if v != 0.0]
    terms.append(f"{const[i]:.6g}")
    return " + ".join(terms)
