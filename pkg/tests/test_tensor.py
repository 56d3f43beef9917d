import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdas import tensor as T
from sdas.tensor import Parameter, ShapeError, Tensor, gradient_check


def d(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype="double")


def test_relu_values():
    assert T.relu(d([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_avg_pool_hand_enumeration():
    y = T.avg_pool(d(np.ones((1, 1, 3, 3))), 3, 1).data[0, 0]
    corner, edge = 4 / 9, 6 / 9
    expected = np.array([[corner, edge, corner], [edge, 1.0, edge], [corner, edge, corner]])
    np.testing.assert_allclose(y, expected, rtol=0, atol=1e-15)


def test_depthwise_stride_shape():
    y = T.depthwise_conv(d(np.zeros((1, 4, 8, 8))), d(np.zeros((4, 3, 3))), stride=2)
    assert y.shape == (1, 4, 4, 4)


@pytest.mark.parametrize("n,s", [(8, 2), (7, 2), (5, 3), (1, 2), (9, 1)])
def test_same_padding_ceil_rule(n, s):
    x = d(np.zeros((1, 2, n, n + 1)))
    assert T.max_pool(x, 3, s).shape[2:] == (-(-n // s), -(-(n + 1) // s))
    assert T.conv(x, d(np.zeros((3, 2, 3, 3))), stride=s, dilation=2).shape[2:] == (-(-n // s), -(-(n + 1) // s))


def test_sum_backward_is_ones():
    x = d(np.arange(6.0).reshape(2, 3), grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_relu_subgradient():
    x = d([-1.0, 2.0], grad=True)
    T.backward(T.sum_all(T.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_backward_accumulates_and_clears_tape():
    x = d([1.0, 2.0], grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert len(T.current_tape()) == 0
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, [3.0, 5.0])


def test_tape_is_topological():
    x = d(np.ones(3), grad=True)
    y = T.relu(T.add(x, x))
    z = T.sum_all(T.mul(y, y))
    tape = T.current_tape()
    seen = set()
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and t is not x:
                assert id(t) in seen
        seen.add(id(rec.output))
    T.backward(z)


def test_non_scalar_loss_rejected():
    x = d(np.ones(3), grad=True)
    with pytest.raises(ValueError):
        T.backward(T.relu(x))
    T.current_tape().clear()


def test_conv_weight_grad_finite_difference():
    rng = np.random.default_rng(0)
    x = d(rng.standard_normal((2, 3, 5, 5)))
    w = d(rng.standard_normal((4, 3, 3, 3)))
    rep = gradient_check(lambda x, w: T.sum_all(T.conv(x, w)), {"x": x, "w": w}, tol=1e-6)
    assert rep.passed, rep.errors


def test_gradcheck_identity_exact():
    x = d(np.random.default_rng(1).standard_normal(5))
    rep = gradient_check(lambda x: x, [x])
    assert rep.max_error < 1e-9


def test_gradcheck_softmax_dot():
    rng = np.random.default_rng(2)
    v, c = d(rng.standard_normal(6)), d(rng.standard_normal(6))
    rep = gradient_check(lambda v: T.sum_all(T.mul(T.softmax(v), c)), [v])
    assert rep.max_error < 1e-7


def test_gradcheck_batch_norm_training():
    rng = np.random.default_rng(3)
    x = d(rng.standard_normal((4, 3, 2, 2)))
    g, b = d(rng.standard_normal(3)), d(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    rep = gradient_check(lambda x, g, b: T.batch_norm(x, g, b, rm, rv, True), {"x": x, "g": g, "b": b})
    assert rep.max_error < 1e-6


def test_gradcheck_reports_nonfinite():
    x = d([0.5, 1.0])
    rep = gradient_check(lambda x: T.mul(x, Tensor(np.array([np.inf, 1.0]), dtype="double")), [x])
    assert not rep.passed and rep.nonfinite


def test_gradcheck_needs_double():
    with pytest.raises(TypeError):
        gradient_check(lambda x: x, [Tensor(np.ones(2), dtype="single")])


_PRIMS = {
    "conv_strided_dilated": (lambda r: [r.standard_normal((2, 2, 5, 4)), r.standard_normal((3, 2, 3, 3))],
                             lambda x, w: T.conv(x, w, stride=2, dilation=2)),
    "conv3d": (lambda r: [r.standard_normal((1, 2, 3, 4, 4)), r.standard_normal((2, 2, 1, 3, 3))],
               lambda x, w: T.conv(x, w, stride=(1, 2, 2))),
    "depthwise": (lambda r: [r.standard_normal((2, 3, 5, 5)), r.standard_normal((3, 3, 3))],
                  lambda x, w: T.depthwise_conv(x, w, stride=2, dilation=2)),
    "depthwise3d": (lambda r: [r.standard_normal((1, 2, 4, 4, 4)), r.standard_normal((2, 3, 1, 1))],
                    lambda x, w: T.depthwise_conv(x, w, stride=2)),
    "pointwise": (lambda r: [r.standard_normal((2, 3, 3, 3)), r.standard_normal((4, 3))],
                  lambda x, w: T.pointwise_conv(x, w, stride=2)),
    "max_pool": (lambda r: [r.standard_normal((2, 2, 5, 5))], lambda x: T.max_pool(x, 3, 2)),
    "max_pool3d": (lambda r: [r.standard_normal((1, 2, 3, 4, 4))], lambda x: T.max_pool(x, 3, 1)),
    "avg_pool": (lambda r: [r.standard_normal((2, 2, 4, 5))], lambda x: T.avg_pool(x, 3, 2)),
    "gap": (lambda r: [r.standard_normal((2, 3, 2, 3))], lambda x: T.global_avg_pool(x)),
    "channel_mul": (lambda r: [r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3))], T.channel_mul),
    "channel_add": (lambda r: [r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 3))], T.channel_add),
    "sigmoid": (lambda r: [r.standard_normal(5)], T.sigmoid),
    "softmax": (lambda r: [r.standard_normal(5)], T.softmax),
    "weighted_sum": (lambda r: [r.standard_normal(3), r.standard_normal((2, 2)), r.standard_normal((2, 2)),
                                r.standard_normal((2, 2))], lambda w, *xs: T.weighted_sum(w, xs)),
    "concat": (lambda r: [r.standard_normal((2, 1, 2)), r.standard_normal((2, 3, 2))],
               lambda a, b: T.concat([a, b], axis=1)),
    "linear": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 4)), r.standard_normal(2)], T.linear),
    "cross_entropy": (lambda r: [r.standard_normal((4, 3))], lambda z: T.cross_entropy(z, [0, 2, 1, 2])),
    "mul_broadcast": (lambda r: [r.standard_normal((2, 3)), r.standard_normal(3)], T.mul),
    "add_n": (lambda r: [r.standard_normal((2, 2)), r.standard_normal((2, 2)), r.standard_normal((2, 2))],
              lambda *xs: T.add_n(xs)),
}


@pytest.mark.parametrize("name", sorted(_PRIMS))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(name, seed):
    make, f = _PRIMS[name]
    inputs = [d(a) for a in make(np.random.default_rng(seed))]
    rep = gradient_check(f, inputs, tol=1e-6, seed=seed)
    assert rep.passed, rep.errors


def test_max_pool_tie_routes_to_first():
    x = d(np.ones((1, 1, 1, 3)), grad=True)
    T.backward(T.sum_all(T.max_pool(x, (1, 3), (1, 3))))
    assert x.grad.tolist() == [[[[1.0, 0.0, 0.0]]]]


def test_batch_norm_running_stats():
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    T.batch_norm(d(x), d([1.0]), d([0.0]), rm, rv, training=True)
    np.testing.assert_allclose(rm, [0.1 * x.mean()])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * x.var(ddof=1)])
    y = T.batch_norm(d(x), d([1.0]), d([0.0]), rm, rv, training=False)
    np.testing.assert_allclose(y.data, (x - rm[0]) / np.sqrt(rv[0] + 1e-5))


def test_shape_error_names_primitive_and_axes():
    with pytest.raises(ShapeError) as e:
        T.add_n([d(np.zeros((1, 2, 3))), d(np.zeros((1, 3, 3)))])
    assert e.value.primitive == "add" and tuple(e.value.axes) == (1,)
    with pytest.raises(ShapeError) as e:
        T.conv(d(np.zeros((1, 3, 4, 4))), d(np.zeros((2, 2, 3, 3))))
    assert e.value.primitive == "conv"


@pytest.mark.parametrize("kw", [{"stride": 0}, {"stride": -1}, {"dilation": 0}])
def test_nonpositive_stride_dilation_rejected(kw):
    with pytest.raises(ValueError):
        T.depthwise_conv(d(np.zeros((1, 2, 4, 4))), d(np.zeros((2, 3, 3))), **kw)


def test_mixed_precision_rejected():
    with pytest.raises(TypeError):
        T.add(Tensor(np.ones(2), dtype="single"), Tensor(np.ones(2), dtype="double"))


def test_precision_context_and_no_grad():
    with T.precision("double"):
        assert Parameter(np.ones(2)).dtype == np.float64
    assert Tensor(np.ones(2)).dtype == np.float32
    x = Parameter(np.ones(2))
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and len(T.current_tape()) == 0


def test_primitive_forward_dispatch():
    y = T.primitive_forward("avg_pool", d(np.ones((1, 1, 3, 3))), kernel=3, stride=2)
    assert y.shape == (1, 1, 2, 2)
    with pytest.raises(ValueError):
        T.primitive_forward("fft", d([1.0]))


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((3, 3, 3))
    a = T.depthwise_conv(d(x), d(w), 2).data
    b = T.depthwise_conv(d(x), d(w), 2).data
    assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_sigmoid_ranges(v):
    p = T.softmax(d(v)).data
    assert abs(p.sum() - 1) < 1e-12 and (p > 0).all()
    s = T.sigmoid(d(v / 5)).data
    assert ((s > 0) & (s < 1)).all()


def _wrong_relu(x):
    mask = x.data > 0
    return T._emit("bad_relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask * 1.5,))


def test_gradcheck_steps_past_kink_but_still_flags_wrong_gradients():
    # one coordinate sits 3e-6 from the ReLU kink, inside the default probe width
    x = Tensor(np.array([3e-6, 0.7, -0.4]), dtype="double")
    assert gradient_check(lambda x: T.sum_all(T.relu(x)), [x]).passed
    assert not gradient_check(lambda x: T.sum_all(_wrong_relu(x)), [x]).passed
    assert not gradient_check(lambda x: T.sum_all(_wrong_relu(x)), [Tensor(np.array([3e-6]), dtype="double")]).passed
