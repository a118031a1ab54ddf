from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodiff.errors import OracleError, StructuralError, TrainingError
from nodiff.ndmath import (
    DenseNet,
    RngStream,
    adam_init,
    adam_update,
    finite_diff_grad,
    flatten_params,
    init_dense_net,
    make_layout,
    max_relative_error,
    net_apply,
    net_gradients,
    rng_gaussian,
    softplus,
    stream_id,
    unflatten_params,
)


def test_zero_weight_net_returns_bias():
    net = DenseNet((3, 2), ("identity",))
    net.bias(0)[:] = [0.5, -1.5]
    out, _ = net_apply(net, np.array([7.0, -2.0, 3.0]))
    assert out.tolist() == [0.5, -1.5]


def test_identity_layer_is_identity_map():
    net = DenseNet((3, 3), ("identity",))
    net.weight(0)[:] = np.eye(3)
    x = np.array([0.25, -4.0, 1e-3])
    out, _ = net_apply(net, x)
    assert np.array_equal(out, x)


def test_seed7_forward_matches_oracle(oracles):
    o = oracles["net_seed7"]
    net = DenseNet(tuple(o["sizes"]), tuple(o["activations"]), params=np.array(o["params"]))
    out, _ = net_apply(net, np.array(o["input"]))
    np.testing.assert_allclose(out, o["output"], rtol=0, atol=1e-14)


def test_param_count_formula():
    net = DenseNet((4, 7, 2), ("relu", "tanh"))
    assert net.n_params == 4 * 7 + 7 + 7 * 2 + 2


def test_dimension_mismatch_names_layer():
    net = DenseNet((3, 2), ("identity",))
    with pytest.raises(StructuralError, match="layer 0"):
        net_apply(net, np.ones(4))
    with pytest.raises(StructuralError):
        DenseNet((3, 2), ("relu", "relu"))


def test_zero_grad_output_gives_zero_gradients():
    net = init_dense_net((3, 5, 2), ("tanh", "identity"), RngStream.named(1, "init"))
    _, cache = net_apply(net, np.array([0.1, 0.2, 0.3]))
    gp, gx = net_gradients(net, cache, np.zeros(2))
    assert not gp.any() and not gx.any()


def test_identity_layer_gradients():
    net = DenseNet((3, 3), ("identity",))
    net.weight(0)[:] = np.eye(3)
    x, g = np.array([1.0, 2.0, -1.0]), np.array([0.5, -0.25, 2.0])
    _, cache = net_apply(net, x)
    gp, gx = net_gradients(net, cache, g)
    parts = unflatten_params(net.layout, gp)
    assert np.array_equal(gx, g)
    assert np.array_equal(parts["W0"], np.outer(g, x))
    assert np.array_equal(parts["b0"], g)


def test_stale_cache_rejected():
    net = DenseNet((3, 2), ("identity",))
    _, cache = net_apply(net, np.ones(3))
    with pytest.raises(StructuralError):
        net_gradients(net, cache, np.ones(5))


@pytest.mark.parametrize("acts", [("tanh", "identity"), ("relu", "softplus"), ("softplus", "tanh")])
def test_seed7_gradients_match_finite_differences(acts):
    net = init_dense_net((4, 6, 3), acts, RngStream.named(7, "init"))
    rng = RngStream.named(7, "test")
    x = rng.normal(4)
    g = rng.normal(3)

    def f_params(p):
        return float(np.dot(g, net_apply(DenseNet(net.sizes, net.activations, params=p), x)[0]))

    def f_input(v):
        return float(np.dot(g, net_apply(net, v)[0]))

    _, cache = net_apply(net, x)
    gp, gx = net_gradients(net, cache, g)
    assert max_relative_error(gp, finite_diff_grad(f_params, net.params.copy()), floor=1e-6) <= 1e-4
    assert max_relative_error(gx, finite_diff_grad(f_input, x), floor=1e-6) <= 1e-4


def test_batched_forward_matches_rowwise():
    net = init_dense_net((3, 4, 2), ("relu", "identity"), RngStream.named(2, "init"))
    X = RngStream.named(2, "x").normal(15).reshape(5, 3)
    out, _ = net_apply(net, X)
    for i in range(5):
        # gemm vs gemv may differ in the last ulp
        np.testing.assert_allclose(out[i], net_apply(net, X[i])[0], rtol=1e-14, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4), st.integers(0, 2**32))
def test_layout_round_trip_bit_exact(shapes, seed):
    layout = make_layout([(f"p{i}", s) for i, s in enumerate(shapes)])
    flat = RngStream(seed, 99).normal(sum(a * b for a, b in shapes))
    again = flatten_params(layout, unflatten_params(layout, flat))
    assert again.tobytes() == flat.tobytes()


def test_softplus_stable_for_large_inputs():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    y = softplus(x)
    assert np.isfinite(y).all()
    assert y[-1] == 800.0 and y[0] == 0.0
    assert y[2] == np.log(2.0)


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    s = adam_init(2, lr=1e-3)
    adam_update(s, p, np.zeros(2))
    assert p.tolist() == [1.0, -2.0] and s.step == 1


def test_adam_first_step_closed_form(oracles):
    o = oracles["adam"]
    p = np.zeros(1)
    adam_update(adam_init(1, lr=o["lr"]), p, np.array([o["g"]]))
    assert p[0] == pytest.approx(o["first_delta"], rel=1e-12)
    assert p[0] == pytest.approx(-o["lr"], rel=1e-6)


def test_adam_two_steps(oracles):
    o = oracles["adam"]
    p, s = np.zeros(1), adam_init(1, lr=o["lr"])
    seen = []
    for _ in range(2):
        adam_update(s, p, np.ones(1))
        seen.append(p[0])
    np.testing.assert_allclose(seen, o["two_steps_g1"], rtol=1e-12)
    assert seen[1] < seen[0] < 0
    assert s.step == 2


def test_adam_non_finite_gradient_names_param():
    net = DenseNet((2, 2), ("identity",))
    g = np.zeros(net.n_params)
    g[5] = np.nan  # b0[1]
    before = net.params.copy()
    with pytest.raises(TrainingError, match=r"b0\[1\]"):
        adam_update(adam_init(net.n_params), net.params, g, net.layout)
    assert np.array_equal(net.params, before)


def test_adam_length_mismatch():
    with pytest.raises(StructuralError):
        adam_update(adam_init(3), np.zeros(2), np.zeros(2))


# -- finite differences -----------------------------------------------------


def test_finite_diff_constant_is_zero():
    assert not finite_diff_grad(lambda x: 4.2, np.array([1.0, 2.0])).any()


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda x: 0.5 * float(x @ x), np.array([3.0, -2.0]))
    np.testing.assert_allclose(g, [3.0, -2.0], atol=1e-8)


def test_finite_diff_non_finite_names_coordinate():
    def f(x):
        return float("inf") if x[1] > 1.0 else 0.0

    with pytest.raises(OracleError, match="coordinate 1"):
        finite_diff_grad(f, np.array([0.0, 1.0]), h=1e-3)


# -- RNG --------------------------------------------------------------------


def test_rng_determinism_and_counter():
    a, b = RngStream(5, 1), RngStream(5, 1)
    assert np.array_equal(a.normal(10), b.normal(10))
    assert a.counter == 20  # two 64-bit words per Gaussian
    a.uniform(3)
    assert a.counter == 23


def test_rng_counter_resume():
    full = RngStream(11, 3).normal(9)
    s = RngStream(11, 3)
    s.normal(4)
    rest = RngStream(11, 3, counter=s.counter).normal(5)
    assert np.array_equal(full[4:], rest)


def test_rng_empty_draw():
    s = RngStream(0, 0)
    assert rng_gaussian(s, 0).shape == (0,)
    assert s.counter == 0


def test_rng_gaussian_moments(oracles):
    b = oracles["gaussian_bounds_1e5"]
    x = RngStream.named(0, "data").normal(100_000)
    assert abs(x.mean()) <= b["mean"]
    assert abs(x.var() - 1.0) <= b["var"]


def test_rng_streams_independent():
    a = RngStream.named(0, "data").normal(20_000)
    b = RngStream.named(0, "init").normal(20_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(20_000)
    assert stream_id("eval-noise", 1) != stream_id("eval-noise", 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63), st.integers(1, 64), st.integers(0, 40))
def test_rng_integers_in_range(seed, high, skip):
    s = RngStream(seed, 5, counter=skip)
    v = s.integers(0, high, 50)
    assert v.min() >= 0 and v.max() < high
