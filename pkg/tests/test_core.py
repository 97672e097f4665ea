import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dance import core
from dance import model as M
from dance.core import ConfigError, LossSpec, NumericError, Tape

from conftest import random_cnn, random_mlp


def conv_oracle(x, w, b):
    """Direct loop convolution with 'same' zero padding."""
    N, C, H, W = x.shape
    F, _, k, _ = w.shape
    lo = (k - 1) // 2
    xp = np.zeros((N, C, H + k - 1, W + k - 1))
    xp[:, :, lo:lo + H, lo:lo + W] = x
    out = np.zeros((N, F, H, W))
    for n in range(N):
        for f in range(F):
            for i in range(H):
                for j in range(W):
                    out[n, f, i, j] = (xp[n, :, i:i + k, j:j + k] * w[f]).sum() + b[f]
    return out


def pool_oracle(x, p):
    N, C, H, W = x.shape
    out = np.zeros((N, C, H // p, W // p))
    for i in range(H // p):
        for j in range(W // p):
            out[:, :, i, j] = x[:, :, i * p:(i + 1) * p, j * p:(j + 1) * p].max(axis=(2, 3))
    return out


def test_tape_scalar_gradient():
    t = Tape()
    x = t.leaf(np.array([3.0]))
    y = core.add(core.mul(x, x), x)
    (g,) = t.gradient(core.total(y), [x])
    assert g[0] == 7.0


def test_tape_replays_each_record_once():
    t = Tape()
    x = t.leaf(np.array([2.0]))
    y = core.mul(x, x)
    z = core.add(y, y)          # y used twice: gradients must accumulate, not double-visit
    (g,) = t.gradient(core.total(z), [x])
    assert g[0] == 8.0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 2, 6, 5))
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    t = Tape()
    out = core.conv2d(t.leaf(x), t.leaf(w), t.leaf(b))
    np.testing.assert_allclose(out.value, conv_oracle(x, w, b), atol=1e-12)


def test_conv2d_keeps_spatial_shape():
    t = Tape()
    out = core.conv2d(t.leaf(np.ones((1, 1, 7, 7))), t.leaf(np.ones((4, 1, 3, 3))), t.leaf(np.zeros(4)))
    assert out.value.shape == (1, 4, 7, 7)


def test_conv2d_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    probe = rng.normal(size=(1, 2, 5, 5))

    def f(xx, ww):
        return float((conv_oracle(xx, ww, b) * probe).sum())

    t = Tape()
    xv, wv, bv = t.leaf(x), t.leaf(w), t.leaf(b)
    out = core.total(core.mul(core.conv2d(xv, wv, bv), probe))
    gx, gw = t.gradient(out, [xv, wv])
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)]:
        e = np.zeros_like(x)
        e[idx] = h
        assert abs((f(x + e, w) - f(x - e, w)) / (2 * h) - gx[idx]) < 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1)]:
        e = np.zeros_like(w)
        e[idx] = h
        assert abs((f(x, w + e) - f(x, w - e)) / (2 * h) - gw[idx]) < 1e-6


def test_maxpool_matches_oracle_and_drops_remainder():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 8))
    t = Tape()
    out = core.maxpool2d(t.leaf(x), 3)
    assert out.value.shape == (2, 3, 2, 2)
    np.testing.assert_array_equal(out.value, pool_oracle(x, 3))


def test_maxpool_tie_routes_gradient_to_first_element():
    t = Tape()
    x = t.leaf(np.ones((1, 1, 2, 2)))
    (g,) = t.gradient(core.total(core.maxpool2d(x, 2)), [x])
    np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_relu_gradient_at_zero_is_zero():
    t = Tape()
    x = t.leaf(np.array([-1.0, 0.0, 2.0]))
    (g,) = t.gradient(core.total(core.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_softplus_approaches_relu():
    t = Tape()
    x = np.linspace(-2, 2, 9)
    out = core.softplus(t.leaf(x), 200.0).value
    assert np.abs(out - np.maximum(x, 0)).max() <= np.log(2) / 200 + 1e-15


def test_logsumexp_is_stable_for_large_inputs():
    t = Tape()
    out = core.logsumexp(t.leaf(np.array([[1000.0, 1000.0]])))
    assert out.value[0] == pytest.approx(1000.0 + np.log(2))


def test_softmax_of_zero_and_log3():
    p = core.softmax_array(np.array([[0.0, np.log(3.0)]]))
    np.testing.assert_allclose(p, [[0.25, 0.75]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.floats(0.01, 2.0))
def test_soft_linf_brackets_the_exact_norm(vals, scale):
    v = np.array(vals)[None]
    t = Tape()
    s = float(core.soft_linf(t.leaf(v), 50.0, scale).value[0])
    exact = np.abs(v).max()
    assert exact - 1e-12 <= s <= exact + scale * np.log(v.size) / 50.0 + 1e-12


def test_linear_model_gradient_is_weight_vector():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(6, 3))
    net = M.linear_network(W)
    for _ in range(3):
        g = core.grad_wrt_input(net, rng.normal(size=6), LossSpec("class-logit", cls=1))
        np.testing.assert_allclose(g, W[:, 1], atol=1e-15)


def test_self_referenced_layer_deviation_has_zero_gradient():
    net = random_cnn(6, 0)
    x = np.random.default_rng(3).uniform(size=(1, 6, 6))
    ref = net.block(x[None], 1)[0]
    g = core.grad_wrt_input(net, x, LossSpec("layer-deviation-linf", layer=1, reference=ref))
    assert not g.any()


def test_mlp_gradient_matches_finite_differences():
    net = random_mlp(12, [16, 8], 3, seed=4)
    x = np.random.default_rng(4).normal(size=12)
    loss = LossSpec("class-logit", cls=2)
    g = core.grad_wrt_input(net, x, loss)
    fd = core.finite_diff_grad(net, x, loss, 1e-5)
    big = np.abs(g) > 1e-8
    assert np.max(np.abs(g[big] - fd[big]) / np.abs(g[big])) <= 1e-6


def test_finite_diff_grad_of_sum_is_ones():
    net = M.linear_network(np.ones((5, 1)) @ np.array([[1.0, 0.0]]))
    fd = core.finite_diff_grad(net, np.random.default_rng(0).normal(size=5), LossSpec("class-logit", cls=0))
    np.testing.assert_allclose(fd, np.ones(5), atol=1e-9)


def test_finite_diff_grad_at_quadratic_stationary_point():
    A = np.random.default_rng(5).normal(size=(4, 4))
    q = M.QuadraticModel(2 * A, np.zeros(4))
    fd = core.finite_diff_grad(q, np.zeros(4), LossSpec("class-logit", cls=0))
    assert np.abs(fd).max() <= 1e-10


def test_finite_diff_rejects_nonpositive_step():
    with pytest.raises(ConfigError):
        core.finite_diff_grad(M.linear_network(np.ones((2, 2))), np.zeros(2), LossSpec("class-logit", cls=0), 0.0)


def test_hessian_of_quadratic_form():
    # x'Ax as a class logit: the quadratic model takes 0.5 x A_c x, so A_c = 2A
    A = np.random.default_rng(6).normal(size=(5, 5))
    q = M.QuadraticModel(2 * A, np.zeros(5))
    H = core.finite_diff_hessian(q, np.random.default_rng(7).normal(size=5), LossSpec("class-logit", cls=0))
    np.testing.assert_allclose(H, A + A.T, atol=1e-6)
    np.testing.assert_array_equal(H, H.T)


def test_hessian_of_linear_model_vanishes():
    net = M.linear_network(np.random.default_rng(8).normal(size=(6, 2)))
    H = core.finite_diff_hessian(net, np.ones(6), LossSpec("class-logit", cls=0))
    assert np.abs(H).max() <= 1e-8


def test_hessian_step_halving_consistency_on_smooth_mlp():
    # the softmax head is curved even where the ReLUs are locally linear;
    # halving h must shrink the finite-difference error
    net = random_mlp(5, [6], 2, seed=9)
    x = np.random.default_rng(9).normal(size=5)
    loss = LossSpec("class-probability", cls=0)
    H1 = core.finite_diff_hessian(net, x, loss, 1e-2)
    H2 = core.finite_diff_hessian(net, x, loss, 5e-3)
    H3 = core.finite_diff_hessian(net, x, loss, 2.5e-3)
    assert np.abs(H2 - H3).max() * 2 <= np.abs(H1 - H2).max() + 1e-12


def test_hessian_guard_refuses_large_inputs():
    net = M.linear_network(np.ones((300, 2)))
    with pytest.raises(ConfigError, match="256"):
        core.finite_diff_hessian(net, np.zeros(300), LossSpec("class-logit", cls=0))


def test_custom_quadratic_loss_gradient():
    rng = np.random.default_rng(10)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=3)
    Q, qv = rng.normal(size=(3, 3)), rng.normal(size=3)
    net = M.linear_network(W, b)
    x = rng.normal(size=4)
    o = x @ W + b
    expected = W @ (0.5 * (Q + Q.T) @ o + qv)
    g = core.grad_wrt_input(net, x, LossSpec("custom-quadratic", Q=Q, q=qv))
    np.testing.assert_allclose(g, expected, atol=1e-12)


def test_combined_loss_is_linear_in_gradients():
    net = random_cnn(6, 11)
    x = np.random.default_rng(11).uniform(size=(1, 6, 6))
    l1, l2 = LossSpec("class-logit", cls=0), LossSpec("class-probability", cls=2)
    a, b = 0.7, -2.5
    g = core.grad_wrt_input(net, x, core.combine((a, l1), (b, l2)))
    g1, g2 = core.grad_wrt_input(net, x, l1), core.grad_wrt_input(net, x, l2)
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=0, atol=1e-12)


def test_gradients_are_deterministic():
    net = random_cnn(8, 12)
    x = np.random.default_rng(12).uniform(size=(1, 8, 8))
    loss = LossSpec("class-logit", cls=1)
    assert np.array_equal(core.grad_wrt_input(net, x, loss), core.grad_wrt_input(net, x, loss))


def test_invalid_losses_are_config_errors():
    net = random_cnn(6, 0)
    x = np.zeros((1, 6, 6))
    with pytest.raises(ConfigError):
        core.grad_wrt_input(net, x, LossSpec("class-logit", cls=3))
    with pytest.raises(ConfigError):
        core.grad_wrt_input(net, x, LossSpec("layer-deviation-linf", layer=2, reference=np.zeros(1)))
    with pytest.raises(ConfigError):
        core.grad_wrt_input(net, x, LossSpec("hinge-thing", cls=0))
    with pytest.raises(ConfigError):
        core.grad_wrt_input(net, np.zeros((1, 5, 5)), LossSpec("class-logit", cls=0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_names_the_layer():
    net = random_cnn(6, 0)
    x = np.full((1, 6, 6), np.inf)
    with pytest.raises(NumericError, match="block 1"):
        core.grad_wrt_input(net, x, LossSpec("class-logit", cls=0))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0, 3))
def test_ball_bounds_are_exact(vals, r):
    x = np.array(vals)
    lo, hi = core.ball_bounds(x, r)
    for z in (lo, hi, (lo + hi) / 2):
        assert np.all(np.abs(z - x) <= r)
