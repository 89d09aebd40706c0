import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gbnorm.tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    add_bias,
    backward,
    conv2d,
    matmul,
    maxpool2d,
    mul,
    reduce,
    relu,
    reshape,
    softmax_cross_entropy,
)

from gradcheck import central_diff, rel_err


def grad_of(fn, *arrays):
    """Analytic gradients of scalar fn(*tensors) w.r.t. each input array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*ts)
        backward(out)
    return [t.grad for t in ts]


def check_grads(fn, *arrays, tol=1e-5):
    analytic = grad_of(fn, *arrays)
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [Tensor(b) for b in arrays]
            args[k] = Tensor(v)
            return fn(*args).item()

        assert rel_err(analytic[k], central_diff(f, a)) < tol


def test_matmul_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal((a @ b).data, [[17.0], [39.0]])


def test_integer_input_becomes_float64():
    assert Tensor([1, 2, 3]).dtype == np.float64


def test_no_recording_outside_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    assert y._tape is None
    with pytest.raises(TapeError):
        backward(y)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = x * x
        with pytest.raises(ValueError):
            backward(y)


def test_sum_of_squares_gradient():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape():
        backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_second_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
        tape.backward(loss)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_reused_input_sums_paths():
    x = Tensor([3.0], requires_grad=True)
    with Tape():
        y = add(mul(x, x), x)
        backward(y.sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad_of(lambda x: relu(x).sum(), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_max_min_ties_go_to_lowest_index():
    (g,) = grad_of(lambda x: x.max(), np.array([1.0, 5.0, 5.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0, 0.0])
    (g,) = grad_of(lambda x: x.min(), np.array([0.0, 3.0, 0.0]))
    np.testing.assert_array_equal(g, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("kind", ["sum", "mean", "max", "min"])
@pytest.mark.parametrize("axes", [None, 0, 1, (0, 2)])
def test_reduce_matches_numpy_and_fd(kind, axes):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 4, 2))
    ref = getattr(np, "mean" if kind == "mean" else kind if kind == "sum" else "a" + kind)(x, axis=axes)
    np.testing.assert_allclose(reduce(Tensor(x), kind, axes).data, ref)
    check_grads(lambda t: reduce(t, kind, axes).sum() if reduce(t, kind, axes).size > 1
                else reduce(t, kind, axes), x)


def test_reduce_errors():
    x = Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        reduce(x, "sum", axes=2)
    with pytest.raises(ShapeError):
        reduce(x, "sum", axes=(0, 0))
    with pytest.raises(ValueError):
        reduce(Tensor(np.ones((0, 3))), "mean", axes=0)
    with pytest.raises(ValueError):
        reduce(x, "median")


def test_reduce_float32_accumulates_in_float64():
    x = np.random.default_rng(0).uniform(0, 1, size=100_000).astype(np.float32)
    out = reduce(Tensor(x), "sum")
    assert out.dtype == np.float32
    assert out.item() == np.float32(x.astype(np.float64).sum())


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        reshape(Tensor(np.ones(6)), (4, 2))


def test_elementwise_and_matmul_fd():
    rng = np.random.default_rng(0)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    check_grads(lambda a, b, c: mul(matmul(a, b), c).sum(), a, b, c)
    check_grads(lambda a, c: relu(add(matmul(a, Tensor(b)), c)).mean(), a, c)


def test_add_bias_fd():
    rng = np.random.default_rng(2)
    x, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3)
    w = rng.normal(size=(2, 3, 4, 4))
    check_grads(lambda x, b: mul(add_bias(x, b), Tensor(w)).sum(), x, b)


def direct_conv(x, k, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, k)
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 2)])
def test_conv2d_matches_direct_loop(stride, pad):
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), stride, pad).data, direct_conv(x, k, stride, pad),
                               atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_conv2d_fd(stride, pad):
    rng = np.random.default_rng(4)
    x, k = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=conv2d(Tensor(x), Tensor(k), stride, pad).shape)
    check_grads(lambda x, k: mul(conv2d(x, k, stride, pad), Tensor(w)).sum(), x, k)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))))


def test_maxpool_example_and_fd():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(maxpool2d(Tensor(x)).data, [[[[5.0, 7.0], [13.0, 15.0]]]])
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4, 6))
    w = rng.normal(size=(2, 3, 2, 3))
    check_grads(lambda x: mul(maxpool2d(x), Tensor(w)).sum(), x)
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.ones((1, 1, 5, 4))))


def test_softmax_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 9, 1]))
    assert loss.item() == pytest.approx(np.log(10.0), rel=1e-12)


def test_softmax_cross_entropy_stable_and_fd():
    big = np.array([[1000.0, 0.0, -1000.0]])
    assert np.isfinite(softmax_cross_entropy(Tensor(big), [0]).item())
    rng = np.random.default_rng(6)
    logits, labels = rng.normal(size=(5, 4)), np.array([0, 3, 1, 1, 2])
    check_grads(lambda z: softmax_cross_entropy(z, labels), logits)
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(logits), [0, 1, 2, 3, 4])


def test_repeated_runs_are_bit_identical():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(8, 5)), rng.normal(size=(5, 3))
    g1 = grad_of(lambda a, b: relu(matmul(a, b)).sum(), a, b)
    g2 = grad_of(lambda a, b: relu(matmul(a, b)).sum(), a, b)
    for x, y in zip(g1, g2):
        assert np.array_equal(x, y)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-10, 10, allow_nan=False)))
def test_sum_gradient_is_ones(x):
    (g,) = grad_of(lambda t: t.sum(), x)
    assert np.array_equal(g, np.ones_like(x))
