import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hmil import tensor as T
from hmil.gradcheck import finite_diff_check
from hmil.tensor import Tape, Tensor


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


# --- forward values -----------------------------------------------------------


def test_matmul_identity_and_hand_values():
    a = _t([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(_t(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(T.matmul(_t([[1, 2]]), _t([[3], [4]])).data, [[11]])


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(_t(np.ones((2, 3))), _t(np.ones((2, 3))))


def test_masked_softmax_examples():
    np.testing.assert_allclose(T.masked_softmax(_t([0, 0, 0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(T.masked_softmax(_t([np.log(3), 0])).data, [0.75, 0.25], atol=1e-15)
    out = T.masked_softmax(_t([5, 9, 2]), np.array([True, False, True])).data
    z = np.exp(5) + np.exp(2)
    np.testing.assert_allclose(out, [np.exp(5) / z, 0, np.exp(2) / z], atol=1e-15)
    assert out[1] == 0.0


def test_masked_softmax_fully_masked_slice_raises():
    with pytest.raises(T.DegenerateSliceError):
        T.masked_softmax(_t([[1, 2], [3, 4]]), np.array([[True, False], [False, False]]), axis=1)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
    arrays(np.bool_, (4, 6)),
)
def test_masked_softmax_sums_to_one_and_zeroes_masked(x, mask):
    mask[:, 0] |= ~mask.any(axis=1)
    p = T.masked_softmax(_t(x), mask, axis=1).data
    assert np.all(p[~mask] == 0.0)
    assert np.all(p[mask] > 0.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_layer_norm_examples():
    g, b = _t(np.ones(3)), _t(np.zeros(3))
    np.testing.assert_array_equal(T.layer_norm(_t([1, 1, 1]), g, b).data, [0, 0, 0])
    out = T.layer_norm(_t([-1, 1]), _t(np.ones(2)), _t(np.zeros(2)), eps=0.0).data
    np.testing.assert_allclose(out, [-1, 1], atol=1e-15)


def test_layer_norm_rejects_bad_gamma():
    with pytest.raises(T.DimensionError):
        T.layer_norm(_t(np.ones((2, 3))), _t(np.ones(2)), _t(np.zeros(3)))


def test_conv2d_sum_kernel_and_delta_kernel(rng):
    out = T.conv2d(_t(np.ones((1, 3, 3))), _t(np.ones((1, 1, 3, 3))), _t([0.0]))
    np.testing.assert_array_equal(out.data, [[[9.0]]])
    x = rng.normal(size=(2, 6, 6))
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = 1.0
    w[1, 1, 1, 1] = 1.0
    out = T.conv2d(_t(x), _t(w))
    np.testing.assert_array_equal(out.data, x[:, 1:5, 1:5])


def test_conv2d_output_shape_with_stride(rng):
    out = T.conv2d(_rand(rng, 3, 14, 14), _rand(rng, 5, 3, 3, 3), stride=2)
    assert out.shape == (5, 6, 6)
    batched = T.conv2d(_rand(rng, 4, 3, 14, 14), _rand(rng, 5, 3, 3, 3), stride=2)
    assert batched.shape == (4, 5, 6, 6)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(T.DimensionError):
        T.conv2d(_t(np.ones((1, 2, 2))), _t(np.ones((1, 1, 3, 3))))


def test_elementwise_and_shape_examples():
    np.testing.assert_array_equal(T.relu(_t([-1, 2])).data, [0, 2])
    assert T.concat([_t(np.ones((2, 3))), _t(np.ones((2, 5)))], axis=1).shape == (2, 8)
    np.testing.assert_array_equal(T.mean(_t(np.full((3, 4), 2.5)), axis=0).data, np.full(4, 2.5))
    with pytest.raises(T.DimensionError):
        T.concat([_t(np.ones((2, 3))), _t(np.ones((3, 5)))], axis=1)
    with pytest.raises(T.DimensionError):
        T.add(_t(np.ones((2, 3))), _t(np.ones((4,))))


def test_bce_with_logits_examples():
    assert T.bce_with_logits(_t(0.0), 1).item() == pytest.approx(np.log(2), abs=1e-15)
    assert T.bce_with_logits(_t(20.0), 1).item() == pytest.approx(2.0611536e-9, rel=1e-6)
    assert T.bce_with_logits(_t(-3.0), 0).item() == pytest.approx(np.log1p(np.exp(-3.0)), abs=1e-15)
    assert T.bce_with_logits(_t(-800.0), 0).item() == 0.0
    assert np.isfinite(T.bce_with_logits(_t(-800.0), 1).item())


def test_bce_gradient_is_sigmoid_minus_label():
    z = Tensor(np.array(0.7), requires_grad=True)
    with Tape() as tape:
        loss = T.bce_with_logits(z, 1)
    tape.backward(loss)
    assert z.grad == pytest.approx(1 / (1 + np.exp(-0.7)) - 1, abs=1e-15)


# --- backward ----------------------------------------------------------------


def test_backward_product_and_sum():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = Tensor(np.array(4.0), requires_grad=True)
    with Tape() as tape:
        z = T.mul(x, y)
    tape.backward(z)
    assert (x.grad, y.grad) == (4.0, 3.0)
    v = Tensor(np.arange(5.0), requires_grad=True)
    with Tape() as tape:
        s = T.tsum(v)
    tape.backward(s)
    np.testing.assert_array_equal(v.grad, np.ones(5))


def test_backward_rejects_non_scalar_and_foreign_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(T.ContractError):
        tape.backward(y)
    with Tape() as other:
        s = T.tsum(x)
    with pytest.raises(T.ContractError):
        tape.backward(s)
    other.backward(s)


def test_backward_is_bit_deterministic(rng):
    w = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 6)))

    def grad_once():
        w.grad = None
        with Tape() as tape:
            h = T.gelu(T.matmul(x, w))
            loss = T.tsum(T.mul(h, h))
        tape.backward(loss)
        return w.grad.copy()

    assert np.array_equal(grad_once(), grad_once())


def test_ops_outside_tape_are_not_recorded():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.scale(x, 3.0)
    assert y.node_id is None


# --- finite-difference checks --------------------------------------------------

PRIMITIVE_TOL = 1e-4


def test_finite_diff_check_sum_of_squares():
    x = _t([1.0, 2.0])
    assert finite_diff_check(lambda t: T.tsum(T.mul(t, t)), x) < 1e-6


PRIMITIVES = {
    "add": lambda r: ((lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b)))), [_rand(r, 3, 4), _rand(r, 4)]),
    "sub": lambda r: ((lambda a, b: T.tsum(T.mul(T.sub(a, b), a))), [_rand(r, 3, 4), _rand(r, 3, 4)]),
    "mul": lambda r: ((lambda a, b: T.tsum(T.mul(a, b))), [_rand(r, 3, 4), _rand(r, 1, 4)]),
    "scale": lambda r: ((lambda a: T.tsum(T.mul(T.scale(a, -1.7), a))), [_rand(r, 5)]),
    "relu": lambda r: ((lambda a: T.tsum(T.mul(T.relu(a), a))), [Tensor(r.choice([-1, 1], 12) * r.uniform(0.1, 1.0, 12))]),
    "gelu": lambda r: ((lambda a: T.tsum(T.mul(T.gelu(a), a))), [_rand(r, 3, 4)]),
    "reshape": lambda r: ((lambda a: T.tsum(T.mul(T.reshape(a, (4, 3)), T.reshape(a, (4, 3))))), [_rand(r, 3, 4)]),
    "transpose": lambda r: ((lambda a, b: T.tsum(T.mul(T.transpose(a), b))), [_rand(r, 3, 4), _rand(r, 4, 3)]),
    "mean": lambda r: ((lambda a: T.tsum(T.mul(T.mean(a, axis=1), T.mean(a, axis=1)))), [_rand(r, 3, 4)]),
    "concat": lambda r: ((lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=1), T.concat([b, a], axis=1)))), [_rand(r, 2, 3), _rand(r, 2, 3)]),
    "take_rows": lambda r: ((lambda a: T.tsum(T.mul(T.take_rows(a, np.array([2, 0, 2])), T.take_rows(a, np.array([1, 1, 0]))))), [_rand(r, 3, 4)]),
    "scatter_rows": lambda r: ((lambda a, b: T.tsum(T.mul(T.scatter_rows(a, np.array([3, 0]), 4), b))), [_rand(r, 2, 3), _rand(r, 4, 3)]),
    "matmul": lambda r: ((lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b)))), [_rand(r, 3, 4), _rand(r, 4, 2)]),
    "matmul_batched": lambda r: ((lambda a, b: T.tsum(T.gelu(T.matmul(a, b)))), [_rand(r, 2, 3, 4), _rand(r, 4, 5)]),
    "masked_softmax": lambda r: (
        (lambda a, c: T.tsum(T.mul(T.masked_softmax(a, np.array([[True, False, True, True]] * 3), axis=1), c))),
        [_rand(r, 3, 4), _rand(r, 3, 4)],
    ),
    "layer_norm": lambda r: ((lambda a, g, b: T.tsum(T.mul(T.layer_norm(a, g, b), Tensor(np.linspace(-1, 1, 8))))), [_rand(r, 4, 8), _rand(r, 8), _rand(r, 8)]),
    "conv2d": lambda r: ((lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b, stride=2), T.conv2d(x, w, b, stride=2)))), [_rand(r, 2, 7, 7), _rand(r, 3, 2, 3, 3), _rand(r, 3)]),
    "conv2d_batched": lambda r: ((lambda x, w: T.tsum(T.gelu(T.conv2d(x, w)))), [_rand(r, 2, 2, 5, 5), _rand(r, 3, 2, 3, 3)]),
    "bce_with_logits": lambda r: ((lambda z: T.bce_with_logits(z, 1)), [_rand(r)]),
    "linear": lambda r: ((lambda x, w, b: T.tsum(T.gelu(T.linear(x, w, b)))), [_rand(r, 3, 4), _rand(r, 4, 2), _rand(r, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    f, xs = PRIMITIVES[name](rng)
    assert finite_diff_check(f, xs, eps=1e-5) < PRIMITIVE_TOL


def test_finite_diff_masked_softmax_dot_constant(rng):
    c = Tensor(rng.uniform(-1, 1, 5))
    x = _rand(rng, 5)
    err = finite_diff_check(lambda t: T.tsum(T.mul(T.masked_softmax(t, np.array([1, 1, 0, 1, 1], bool)), c)), x)
    assert err < 1e-4
