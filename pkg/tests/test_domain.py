import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from schedcert.domain import (InputRegion, LinCons, PolyElement, abstract_input, backsub_bounds, bottom, bounding_box,
                              box_element, cond, dump_tsv, forward_elements, meet, relaxation, top)
from schedcert.model import NetBuilder, eval_layers, features_to_input, unroll

from helpers import interval_bounds, small_instance


def tiny_net(weights, bias, alpha=0.1, act=False):
    b = NetBuilder(len(weights[0]), alpha)
    k = b.affine([(0, np.array(weights))], bias)
    if act:
        k = b.activation(k)
    return b.build([(i, k, i) for i in range(len(bias))])


# abstractInput

def test_abstract_input_unit_box():
    e = abstract_input(InputRegion([0, 0], [1, 1]))
    lo, hi = bounding_box(e)
    assert list(lo) == [0, 0] and list(hi) == [1, 1]


def test_abstract_input_empty_is_bottom():
    assert abstract_input(InputRegion([1.0], [0.0])).bottom


def test_abstract_input_keeps_side_constraint():
    side = (LinCons.ge({0: 1.0}, 0.5),)
    e = abstract_input(InputRegion([0, 0], [1, 1], side))
    assert e.side == side
    assert list(e.lb) == [0, 0]
    # oracle: the conjunction is feasible and its x0 range is [0.5, 1]
    res = linprog([1, 0], A_ub=[[-1, 0]], b_ub=[-0.5], bounds=[(0, 1), (0, 1)])
    assert res.status == 0 and res.fun == pytest.approx(0.5)


# affineT

def test_affine_sum_bounds():
    net = tiny_net([[1.0, 1.0]], [0.0])
    elems = forward_elements(net, InputRegion([0, 0], [1, 1]))
    assert bounding_box(elems[1])[0][0] == 0 and bounding_box(elems[1])[1][0] == 2


def test_backsub_cancellation_beats_intervals():
    # x - x: symbolic bounds give [0,0], interval arithmetic gives [-1,1]
    b = NetBuilder(1, 0.1)
    k1 = b.affine([(0, np.array([[1.0]]))], [0.0])
    k2 = b.affine([(0, np.array([[1.0]])), (k1, np.array([[-1.0]]))], [0.0])
    net = b.build([(0, k2, 0)])
    elems = forward_elements(net, InputRegion([0.0], [1.0]))
    lo, hi = bounding_box(elems[-1])
    assert lo[0] == pytest.approx(0) and hi[0] == pytest.approx(0)
    ilo, ihi = interval_bounds(net, [0.0], [1.0])[-1]
    assert ilo[0] == -1 and ihi[0] == 1


def test_residual_bounds_match_vertex_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = NetBuilder(2, 0.1)
        k1 = b.affine([(0, rng.normal(size=(3, 2)))], rng.normal(size=3))
        k2 = b.affine([(k1, rng.normal(size=(2, 3)))], rng.normal(size=2))
        k3 = b.affine([(k2, rng.normal(size=(2, 2)))], rng.normal(size=2))
        k4 = b.affine([(k1, rng.normal(size=(1, 3))), (k3, rng.normal(size=(1, 2)))], [0.3])
        net = b.build([(0, k4, 0)])
        elems = forward_elements(net, InputRegion([-1, 0], [1, 2]))
        corners = np.array([[x, y] for x in (-1, 1) for y in (0, 2)])
        vals = eval_layers(net, corners)[-1][:, 0]
        lo, hi = bounding_box(elems[-1])
        assert lo[0] == pytest.approx(vals.min(), abs=1e-9)
        assert hi[0] == pytest.approx(vals.max(), abs=1e-9)


# leakyReluT

@pytest.mark.parametrize("l, u, expect", [
    (1.0, 2.0, (1.0, 2.0)),
    (-2.0, -1.0, (-0.2, -0.1)),
    (-1.0, 1.0, (-0.1, 1.0)),
])
def test_leaky_relu_bounds(l, u, expect):
    net = tiny_net([[1.0]], [0.0], alpha=0.1, act=True)
    elems = forward_elements(net, InputRegion([l], [u]))
    act = next(i for i, layer in enumerate(net.layers) if type(layer).__name__ == "Activation")
    lo, hi = bounding_box(elems[act])
    assert (lo[0], hi[0]) == pytest.approx(expect)
    # oracle: dense sampling of sigma lies inside and reaches both ends
    xs = np.linspace(l, u, 2001)
    ys = np.where(xs >= 0, xs, 0.1 * xs)
    assert ys.min() >= lo[0] - 1e-12 and ys.max() <= hi[0] + 1e-12
    assert ys.min() == pytest.approx(lo[0]) and ys.max() == pytest.approx(hi[0])


def test_relaxation_chord_and_area_choice():
    low, up, upc = relaxation(np.array([-1.0]), np.array([1.0]), 0.1)
    assert up[0] == pytest.approx(0.55) and upc[0] == pytest.approx(0.45)
    assert low[0] == 1.0  # |l| = u: tie keeps the identity
    low, _, _ = relaxation(np.array([-3.0]), np.array([1.0]), 0.1)
    assert low[0] == 0.1
    xs = np.linspace(-1, 1, 1001)
    ys = np.where(xs >= 0, xs, 0.1 * xs)
    assert np.all(ys <= 0.55 * xs + 0.45 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 5), st.floats(0.01, 0.99))
def test_relaxation_is_sound(l, w, alpha):
    u = l + w
    low, up, upc = relaxation(np.array([l]), np.array([u]), alpha)
    xs = np.linspace(l, u, 101)
    ys = np.where(xs >= 0, xs, alpha * xs)
    assert np.all(low[0] * xs <= ys + 1e-9)
    assert np.all(ys <= up[0] * xs + upc[0] + 1e-9)
    if l >= 0 or u <= 0:
        # fixed phase: the relaxation is the exact function
        assert np.allclose(low[0] * xs, ys) and np.allclose(up[0] * xs + upc[0], ys)


# cond

def test_cond_contradiction_is_bottom():
    assert cond(box_element([-2.0], [2.0]), [LinCons.ge({0: 1.0}, 3.0)]).bottom


def test_cond_tightens():
    e = cond(box_element([-2.0], [2.0]), [LinCons.le({0: 1.0}, 1.0)])
    assert list(e.lb) == [-2.0] and list(e.ub) == [1.0]


def test_cond_fixes_phase_negative():
    e = cond(box_element([-0.3], [0.5]), [LinCons.le({0: 1.0}, -0.275)])
    assert e.lb[0] == pytest.approx(-0.3) and e.ub[0] == pytest.approx(-0.275)
    assert e.ub[0] <= 0


def test_cond_on_sum_propagates():
    e = cond(box_element([0.0, 0.0], [1.0, 1.0]), [LinCons.ge({0: 1.0, 1: 1.0}, 1.5)])
    assert e.lb == pytest.approx([0.5, 0.5])


# meet

def test_meet_top_identity():
    a = box_element([-1.0], [3.0])
    m = meet(a, top(1))
    assert list(m.lb) == [-1.0] and list(m.ub) == [3.0]


def test_meet_intersection():
    m = meet(box_element([-1.0], [3.0]), box_element([0.0], [5.0]))
    assert list(m.lb) == [0.0] and list(m.ub) == [3.0]


def test_meet_disjoint_is_bottom():
    assert meet(box_element([-7.5], [-1.5]), box_element([-0.1], [1.0])).bottom


def test_bottom_has_no_box():
    with pytest.raises(ValueError):
        bounding_box(bottom(2))
    assert not bottom(2).contains(np.zeros(2))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 5)), min_size=1, max_size=4),
       st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 5)), min_size=4, max_size=4),
       st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(-5, 5))
def test_cond_and_meet_never_enlarge(a, b, coeffs, bound):
    n = len(a)
    ea = box_element([x for x, _ in a], [x + w for x, w in a])
    eb = box_element([x for x, _ in b[:n]], [x + w for x, w in b[:n]])
    m = meet(ea, eb)
    if not m.bottom:
        # bottom detection allows 1e-9 outward slack
        assert np.all(m.lb >= ea.lb) and np.all(m.ub <= ea.ub + 1e-9)
        assert np.all(m.lb >= eb.lb) and np.all(m.ub <= eb.ub + 1e-9)
    c = cond(ea, [LinCons.le({i: coeffs[i] for i in range(n)}, bound)])
    if not c.bottom:
        assert np.all(c.lb >= ea.lb - 1e-12) and np.all(c.ub <= ea.ub + 1e-12)
        # soundness: every box point satisfying the constraint stays inside
        pts = np.random.default_rng(0).uniform(ea.lb, ea.ub, size=(200, n))
        ok = pts @ np.array(coeffs[:n]) <= bound
        assert np.all(c.contains(pts[ok], 1e-9))
    else:
        pts = np.random.default_rng(0).uniform(ea.lb, ea.ub, size=(200, n))
        assert not np.any(pts @ np.array(coeffs[:n]) <= bound - 1e-9)


# soundness on unrolled GNNs

def test_forward_boxes_contain_samples_and_beat_intervals():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g, arch = small_instance(rng)
        net = unroll(g, arch)
        x0 = features_to_input(g)
        lb, ub = x0 - 0.2, x0 + 0.2
        elems = forward_elements(net, InputRegion(lb, ub))
        xs = rng.uniform(lb, ub, size=(500, len(x0)))
        vals = eval_layers(net, xs)
        ib = interval_bounds(net, lb, ub)
        for k, e in enumerate(elems):
            assert np.all(vals[k] >= e.lb - 1e-6) and np.all(vals[k] <= e.ub + 1e-6)
            assert np.all(e.lb >= ib[k][0] - 1e-9) and np.all(e.ub <= ib[k][1] + 1e-9)


def test_symbolic_bounds_hold_pointwise():
    rng = np.random.default_rng(2)
    g, arch = small_instance(rng)
    net = unroll(g, arch)
    x0 = features_to_input(g)
    region = InputRegion(x0 - 0.3, x0 + 0.3)
    elems = forward_elements(net, region)
    xs = region.sample(rng, 300)
    vals = eval_layers(net, xs)
    for k in range(1, len(net.layers)):
        e = elems[k]
        lo = e.lower_const + sum(vals[s] @ w.T for s, w in e.lower.items())
        hi = e.upper_const + sum(vals[s] @ w.T for s, w in e.upper.items())
        assert np.all(lo <= vals[k] + 1e-9) and np.all(vals[k] <= hi + 1e-9)


def test_backsub_bounds_of_linear_form():
    net = tiny_net([[1.0, 2.0], [1.0, -1.0]], [0.0, 0.0])
    elems = forward_elements(net, InputRegion([0, 0], [1, 1]))
    lo, hi = backsub_bounds(net, elems, 1, np.array([[1.0, 1.0]]))
    # x0 + 2x1 + x0 - x1 = 2x0 + x1 over the unit box
    assert lo[0] == pytest.approx(0) and hi[0] == pytest.approx(3)


def test_dump_tsv_has_one_row_per_neuron():
    net = tiny_net([[1.0, 1.0]], [0.0], act=True)
    elems = forward_elements(net, InputRegion([0, 0], [1, 1]))
    rows = dump_tsv(net, elems).strip().split("\n")
    assert rows[0].startswith("layer\tneuron")
    assert len(rows) == 1 + sum(net.sizes)


def test_lincons_normal_form():
    c = LinCons.ge({0: 2.0, 1: 0.0}, 1.0)
    assert c.coeffs == ((0, -2.0),) and c.bound == -1.0 and c.rel == "<="
    assert LinCons.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        LinCons({0: float("inf")}, 0.0)


def test_region_samples_satisfy_side_constraints():
    side = (LinCons.ge({0: 1.0, 1: -1.0}, 0.0),)
    r = InputRegion([0, 0], [1, 1], side)
    pts = r.sample(np.random.default_rng(0), 200)
    assert len(pts) == 200 and np.all(pts[:, 0] >= pts[:, 1])


def test_polyelement_widths():
    e = PolyElement(np.array([0.0, 1.0]), np.array([2.0, 1.5]))
    assert list(e.widths()) == [2.0, 0.5]
