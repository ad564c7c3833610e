import numpy as np
import pytest

from schedcert.domain import InputRegion, LinCons, forward_elements
from schedcert.fb import (AnalysisState, EngineConfig, Status, analyze, backward_pass, forward_pass,
                          output_refuted)
from schedcert.model import NetBuilder, eval_concrete, eval_layers, features_to_input, unroll
from schedcert.solver import tighten_layer

from helpers import phase_oracle, small_instance
from instances import threshold_query


def one_neuron_net(w=2.0, b=-1.0, alpha=0.1):
    nb = NetBuilder(1, alpha)
    k = nb.activation(nb.affine([(0, np.array([[w]]))], [b]))
    return nb.build([(0, k, 0)])


def test_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(mode="backward")
    with pytest.raises(ValueError):
        EngineConfig(timeout=0)
    assert EngineConfig(fallback=True).complete


def test_first_forward_pass_equals_plain_analysis():
    rng = np.random.default_rng(0)
    g, arch = small_instance(rng)
    net = unroll(g, arch)
    x0 = features_to_input(g)
    region = InputRegion(x0 - 0.2, x0 + 0.2)
    state = AnalysisState.initial(net)
    assert forward_pass(net, state, region)
    for a, b in zip(state.forward, forward_elements(net, region)):
        np.testing.assert_array_equal(a.lb, b.lb)
        np.testing.assert_array_equal(a.ub, b.ub)


def test_backward_inverts_activation_exactly():
    # out = leaky(2x - 1) >= 0.5 pulls the pre-activation to [0.5, 1] and the input to [0.75, 1]
    net = one_neuron_net()
    region = InputRegion([0.0], [1.0])
    state = AnalysisState.initial(net)
    v = analyze(net, region, [LinCons.ge({0: 1.0}, 0.5)], EngineConfig(mode="fb-converge"), state=state)
    assert v.status == Status.UNKNOWN
    boxes = state.boxes()
    act = net.activation_layers()[0]
    pre = net.layers[act].source
    assert boxes[pre][0][0] == pytest.approx(0.5, abs=1e-5) and boxes[pre][1][0] == pytest.approx(1.0, abs=1e-5)
    # the input range follows from one more LP over the refined boxes
    lb, ub, _, _ = tighten_layer(net, 0, boxes, [LinCons.ge({0: 1.0}, 0.5)], (), from_layer=0)
    assert lb[0] == pytest.approx(0.75, abs=1e-5) and ub[0] == pytest.approx(1.0, abs=1e-5)


def test_input_backward_element_stays_top():
    net = one_neuron_net()
    state = AnalysisState.initial(net)
    analyze(net, InputRegion([0.0], [1.0]), [LinCons.ge({0: 1.0}, 0.5)], EngineConfig(), state=state)
    assert np.all(np.isneginf(state.backward[0].lb)) and np.all(np.isposinf(state.backward[0].ub))


def test_inconsistent_output_is_immediate_hold():
    net = one_neuron_net()
    v = analyze(net, InputRegion([0.0], [1.0]), [LinCons.ge({0: 1.0}, 2.0)], EngineConfig(mode="forward"))
    assert v.status == Status.HOLD and v.stats["lp_calls"] == 0


def test_refinement_order_is_reverse_topological():
    # layer 3 feeds layers 5 and 7: it must be refined after both
    b = NetBuilder(2, 0.1)
    l1 = b.affine([(0, np.eye(2))], np.zeros(2))
    l2 = b.activation(l1)
    l3 = b.affine([(l2, np.eye(2))], np.zeros(2))
    l4 = b.activation(l3)
    l5 = b.affine([(l4, np.eye(2)), (l3, np.eye(2))], np.zeros(2))
    l6 = b.activation(l5)
    l7 = b.affine([(l6, np.eye(2)), (l3, np.eye(2))], np.zeros(2))
    net = b.build([(0, l7, 0)])
    order = net.refinement_order()
    assert order.index(3) > order.index(5) and order.index(3) > order.index(7)
    for k in range(len(net.layers)):
        for c in net.consumers[k]:
            assert order.index(k) > order.index(c)


def test_not_hold_witness_is_concrete():
    rng = np.random.default_rng(1)
    found = 0
    for _ in range(15):
        net, region, bad = threshold_query(rng, frac=-0.5)
        v = analyze(net, region, bad, EngineConfig(fallback=True))
        assert v.status == Status.NOT_HOLD
        x = v.witness
        assert region.contains(x, 1e-6)
        y = eval_concrete(net, x)
        assert all(c.holds(y, 1e-6) for c in bad)
        found += 1
    assert found == 15


def test_timeout_gives_unknown():
    rng = np.random.default_rng(2)
    net, region, bad = threshold_query(rng, frac=0.5)
    v = analyze(net, region, bad, EngineConfig(fallback=True), deadline=0.0)
    assert v.status == Status.UNKNOWN and v.stats.get("timeout")


def test_modes_soundness_monotonicity_dominance():
    rng = np.random.default_rng(3)
    solved = {"forward": 0, "fb-once": 0, "fb-converge": 0}
    for _ in range(12):
        net, region, bad = threshold_query(rng)
        xs = region.sample(rng, 1000)
        vals = eval_layers(net, xs)
        violated = np.all([c.holds(vals[-1]) for c in bad], axis=0)
        verdicts = {}
        for mode in solved:
            v = analyze(net, region, bad, EngineConfig(mode=mode))
            verdicts[mode] = v.status
            solved[mode] += v.status == Status.HOLD
            if v.status == Status.HOLD:
                assert not violated.any()
            for prev, cur in zip(v.history, v.history[1:]):
                for key in ("forward", "backward"):
                    for a, b in zip(prev["widths"][key], cur["widths"][key]):
                        assert np.all(b <= a + 1e-9)
        if verdicts["forward"] == Status.HOLD:
            assert verdicts["fb-once"] == Status.HOLD and verdicts["fb-converge"] == Status.HOLD
        if verdicts["fb-once"] == Status.HOLD:
            assert verdicts["fb-converge"] == Status.HOLD
    assert solved["fb-converge"] >= solved["fb-once"] >= solved["forward"]


def test_hold_agrees_with_phase_oracle():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(40):
        net, region, bad = threshold_query(rng)
        ref = phase_oracle(net, region.lb, region.ub, region.side, bad)
        if ref is None:
            continue
        v = analyze(net, region, bad, EngineConfig(fallback=True))
        assert v.status == (Status.NOT_HOLD if ref[0] else Status.HOLD)
        checked += 1
    assert checked >= 5


def test_output_refuted_uses_symbolic_bounds():
    net = one_neuron_net(1.0, 0.0)
    state = AnalysisState.initial(net)
    forward_pass(net, state, InputRegion([-1.0], [1.0]))
    assert output_refuted(net, state, [LinCons.ge({0: 1.0}, 1.5)])
    assert not output_refuted(net, state, [LinCons.ge({0: 1.0}, 0.5)])


def test_backward_pass_reports_infeasibility():
    net = one_neuron_net(1.0, 0.0)
    region = InputRegion([-1.0], [1.0])
    state = AnalysisState.initial(net)
    forward_pass(net, state, region)
    ok, calls = backward_pass(net, state, region, [LinCons.ge({0: 1.0}, 1.5)], EngineConfig())
    assert not ok


def test_strict_postcondition_flags_epsilon():
    net = one_neuron_net(1.0, 0.0)
    v = analyze(net, InputRegion([-1.0], [1.0]), [LinCons.gt({0: 1.0}, 0.5)], EngineConfig(fallback=True))
    assert v.status == Status.NOT_HOLD
    assert v.stats["strict_eps"] == pytest.approx(1e-6)
