import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointspeech import compute as C
from jointspeech.compute import Graph, ShapeError, Tensor, backward, finite_diff_check, forward

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grads_of(fn, **inputs):
    g = Graph(fn)
    forward(g, inputs)
    return {k: v.data for k, v in backward(g).items()}


def test_simple_product_rule():
    g = grads_of(lambda x, y: C.reduce_sum(C.mul(x, y)), x=np.array([1.0, 2.0]), y=np.array([3.0, -1.0]))
    np.testing.assert_array_equal(g["x"], [3.0, -1.0])
    np.testing.assert_array_equal(g["y"], [1.0, 2.0])


def test_broadcast_gradient_is_summed():
    g = grads_of(lambda x, b: C.reduce_sum(C.add(x, b)), x=np.ones((4, 3)), b=np.zeros(3))
    np.testing.assert_array_equal(g["b"], [4.0, 4.0, 4.0])


def test_shared_node_accumulates():
    # d/dx of (x*x + x) = 2x + 1
    g = grads_of(lambda x: C.reduce_sum(C.add(C.mul(x, x), x)), x=np.array([0.5, -2.0]))
    np.testing.assert_allclose(g["x"], [2.0, -3.0])


def test_matmul_shape_error_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        C.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_nodes_are_topologically_indexed():
    g = Graph(lambda x: C.mean(C.exp(C.mul(x, 2.0))))
    forward(g, {"x": np.ones(3)})
    for node in g.nodes:
        assert all(p.index < node.index for p in node.parents)
    assert g.nodes[-1] is g.outputs["out"]


def test_backward_requires_scalar():
    g = Graph(lambda x: C.mul(x, 2.0))
    forward(g, {"x": np.ones(3)})
    with pytest.raises(ValueError, match="not scalar"):
        backward(g)


def test_backward_unknown_output():
    g = Graph(lambda x: C.reduce_sum(x))
    forward(g, {"x": np.ones(3)})
    with pytest.raises(KeyError):
        backward(g, "loss")


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = C.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(C.log_softmax(Tensor(x)).data), p, atol=1e-12)


@given(arrays(np.float64, (2, 5), elements=st.floats(-500, 500)))
def test_logsumexp_stable(x):
    out = C.logsumexp(Tensor(x)).data
    ref = x.max(axis=-1) + np.log(np.exp(x - x.max(axis=-1, keepdims=True)).sum(axis=-1))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_layernorm_normalises():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 16))
    y = C.layernorm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_gelu_matches_erf_form():
    from math import erf, sqrt

    xs = np.linspace(-3, 3, 13)
    ref = [0.5 * x * (1 + erf(x / sqrt(2))) for x in xs]
    np.testing.assert_allclose(C.gelu(Tensor(xs)).data, ref, rtol=1e-12)


def _all_ops(x, w, g, b):
    h = C.layernorm(C.matmul(x, w), g, b)
    h = C.gelu(h)
    a = C.softmax(C.transpose(h))
    z = C.concat([C.reshape(a, (-1,)), C.getitem(C.reshape(h, (-1,)), np.array([0, 2, 2]))])
    z = C.sub(C.div(z, C.add(C.exp(z), 1.0)), C.sqrt(C.add(C.power(z, 2.0), 1.0)))
    return C.add(C.mean(C.log(C.add(C.mul(z, z), 1.0))), C.reduce_sum(C.logsumexp(h)))


def test_finite_difference_all_primitives():
    rng = np.random.default_rng(3)
    inputs = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
    report = finite_diff_check(Graph(_all_ops), inputs)
    assert report.passed, report.failures
    assert report.worst() < 1e-5


def test_finite_difference_detects_wrong_gradient():
    def bad(x):
        return C.reduce_sum(C.custom_op("bad_square", x.data**2, (x,), lambda g: (g * x.data,)))

    report = finite_diff_check(Graph(bad), {"x": np.array([1.0, 2.0])})
    assert not report.passed
    assert "x" in report.failures[0]


def test_finite_difference_sampling_is_seeded():
    fn = Graph(lambda x: C.reduce_sum(C.mul(x, x)))
    x = np.arange(50.0)
    r1 = finite_diff_check(fn, {"x": x}, max_elements=5, rng=np.random.default_rng(7))
    r2 = finite_diff_check(fn, {"x": x}, max_elements=5, rng=np.random.default_rng(7))
    assert r1.max_rel_error == r2.max_rel_error


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        finite_diff_check(Graph(lambda x: C.reduce_sum(x)), {"x": np.ones(2)}, epsilon=0.0)
