import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dance import evaluation as E
from dance import model as M


def two_class_linear(bias_gap):
    # zero weights: p_0 = sigmoid(bias_gap) regardless of the input
    return M.linear_network(np.zeros((4, 2)), np.array([bias_gap, 0.0]))


def test_fidelity_all_ones_is_unmasked_score():
    net = M.linear_network(np.random.default_rng(0).normal(size=(5, 3)))
    x = np.random.default_rng(1).uniform(size=5)
    p = net.probabilities(x[None])[0]
    c = int(np.argmax(p))
    score, clamped = E.fidelity(net, x, np.ones(5))
    assert score == pytest.approx(-np.log(p[c]), abs=1e-15) and not clamped


def test_fidelity_ln2():
    net = two_class_linear(0.0)
    assert E.fidelity_score(net, np.ones(4), np.zeros(4), c=0) == pytest.approx(np.log(2), abs=1e-15)


def test_fidelity_clamps_tiny_probabilities():
    net = two_class_linear(100.0)
    score, clamped = E.fidelity(net, np.ones(4), np.ones(4), c=1)
    assert clamped and score == pytest.approx(-np.log(1e-12))


def test_fidelity_uses_class_of_unmasked_input():
    W = np.array([[1.0, 0.0], [0.0, 0.0]])    # x_0 feeds class 0
    net = M.linear_network(W, np.array([0.0, 0.5]))
    x = np.array([2.0, 0.0])
    # masked input would be class 1, but the score must use class 0
    score, _ = E.fidelity(net, x, np.zeros(2))
    p = net.probabilities(np.zeros((1, 2)))[0]
    assert score == pytest.approx(-np.log(p[0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 3))
def test_fidelity_decreases_with_probability(gap, more):
    x = np.ones(4)
    a = E.fidelity_score(two_class_linear(gap), x, np.ones(4), c=0)
    b = E.fidelity_score(two_class_linear(gap + more), x, np.ones(4), c=0)
    assert b <= a


def test_sensitivity_examples():
    x, xh = np.zeros(4), np.array([0.0, 3.0, 4.0, 0.0])
    m = np.array([1.0, 2.0, 3.0, 4.0])
    assert E.sensitivity(m, m, x, xh) == 0.0
    shift = np.array([0.0, 0.0, 6.0, 8.0])
    assert E.sensitivity(m, m + shift, x, xh, normalize=None) == pytest.approx(10 / 5)
    with pytest.raises(ValueError):
        E.sensitivity(m, m, x, x)
    with pytest.raises(ValueError):
        E.sensitivity(m, m, x, xh, normalize="l2")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_sensitivity_l1_is_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    a, b, x, xh = rng.normal(size=(4, 6))
    s1 = E.sensitivity(a, b, x, xh)
    s2 = E.sensitivity(scale * a, scale * b, x, xh)
    assert s2 == pytest.approx(s1, rel=1e-12)
    assert E.sensitivity(a, b, scale * x, scale * xh, normalize=None) == pytest.approx(
        E.sensitivity(a, b, x, xh, normalize=None) / scale, rel=1e-12)


def test_sensitivity_topk_variant():
    x, xh = np.zeros(10), np.full(10, 0.1)
    a = np.arange(10.0)
    b = a[::-1].copy()
    # top-2 sets {8,9} and {0,1} are disjoint: four differing ones
    assert E.sensitivity(a, b, x, xh, "topk", 0.2) == pytest.approx(2 / np.sqrt(0.1))


def test_overlap_examples():
    t = np.array([1, 1, 0, 0, 1])
    assert E.ground_truth_overlap(t, t) == 1.0
    assert E.ground_truth_overlap(1 - t, t) == 0.0
    with pytest.raises(ValueError):
        E.ground_truth_overlap(t, np.zeros(5))


def test_overlap_of_random_maps_matches_expectation():
    d, K, T = 64, 13, 20
    rng = np.random.default_rng(0)
    truth = np.zeros(d)
    truth[:T] = 1
    vals = []
    for _ in range(1000):
        m = np.zeros(d)
        m[rng.choice(d, K, replace=False)] = 1
        vals.append(E.ground_truth_overlap(m, truth))
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - K / d) <= 3 * se


def test_report_medians():
    rep = E.assemble_report([{"method": "vanilla", "aggregation": "range", "fidelity": 0.7}])
    assert rep.summary["vanilla/range"]["fidelity"]["median"] == 0.7
    recs = [{"image": i, "method": "m", "aggregation": "a", "fidelity": v} for i, v in enumerate([3.0, 1.0, 2.0])]
    rep = E.assemble_report(recs)
    assert rep.summary["m/a"]["fidelity"]["median"] == 2.0
    assert rep.summary["m/a"]["fidelity"]["n"] == 3
    with pytest.raises(ValueError):
        E.assemble_report([])


def test_report_is_order_independent_and_stamped():
    recs = [{"image": i, "method": "m", "aggregation": a, "fidelity": float(i) + len(a)}
            for i in range(4) for a in ("range", "mean")]
    a = E.assemble_report(recs, {"k": 1}, 3, ["dance", "evaluate"]).dumps()
    b = E.assemble_report(recs[::-1], {"k": 1}, 3, ["dance", "evaluate"]).dumps()
    assert a == b
    d = json.loads(a)
    assert d["seed"] == 3 and d["config_hash"] == M.config_hash({"k": 1})
    assert d["tool_version"]


def test_bootstrap_ci_brackets_median():
    v = np.random.default_rng(0).normal(size=200)
    lo, hi = E.bootstrap_ci(v, seed=1)
    assert lo <= np.median(v) <= hi
    assert E.bootstrap_ci(v, seed=1) == [lo, hi]
