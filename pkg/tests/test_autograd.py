import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsevit import autograd as ag
from sparsevit.autograd import Tensor


def numeric_grad(f, x: np.ndarray, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        o = x[idx]
        x[idx] = o + h
        fp = f()
        x[idx] = o - h
        fm = f()
        x[idx] = o
        g[idx] = (fp - fm) / (2 * h)
    return g


def check(build, *arrays, tol=1e-6):
    """build(*tensors) -> scalar Tensor; compare every input gradient to central differences."""
    ts = [ag.parameter(a) for a in arrays]
    build(*ts).backward()
    for t in ts:
        num = numeric_grad(lambda: float(build(*ts).data), t.data)
        assert np.allclose(t.grad, num, rtol=tol, atol=tol), (t.grad, num)


def weighted_sum(y: Tensor, seed=0):
    """Scalar with a generic upstream gradient."""
    c = np.random.default_rng(seed).normal(size=y.shape)
    return ag.tsum(ag.mul(y, c))


rng = np.random.default_rng(0)


def test_elementwise_and_broadcasting():
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    check(lambda x, y: weighted_sum(ag.add(x, y)), a, b)
    check(lambda x, y: weighted_sum(ag.sub(x, y)), a, b)
    check(lambda x, y: weighted_sum(ag.mul(x, y)), a, b)


def test_matmul_batched_and_2d_rhs():
    check(lambda x, y: weighted_sum(ag.matmul(x, y)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))
    check(lambda x, y: weighted_sum(ag.matmul(x, y)), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


def test_linear_with_bias():
    check(lambda x, w, b: weighted_sum(ag.linear(x, w, b)),
          rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5,)))


def test_nonlinear_ops():
    check(lambda x: weighted_sum(ag.gelu(x)), rng.normal(size=(3, 5)))
    check(lambda x: weighted_sum(ag.softmax(x, axis=-1)), rng.normal(size=(2, 3, 4)))
    check(lambda x, g, b: weighted_sum(ag.layernorm(x, g, b)),
          rng.normal(size=(2, 3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,)))


def test_gelu_tanh_values():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    expect = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(ag.gelu(Tensor(x)).data, expect, atol=1e-15)


def test_shape_ops():
    check(lambda x: weighted_sum(ag.reshape(x, (6, 2))), rng.normal(size=(3, 4)))
    check(lambda x: weighted_sum(ag.transpose(x, (2, 0, 1))), rng.normal(size=(2, 3, 4)))
    check(lambda x: weighted_sum(x[:, 1:, :]), rng.normal(size=(2, 3, 4)))
    check(lambda x: weighted_sum(x[0]), rng.normal(size=(3, 4)))
    check(lambda x, y: weighted_sum(ag.concat([x, y], axis=1)), rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 4, 3)))
    check(lambda x: weighted_sum(ag.broadcast_to(x, (5, 1, 3))), rng.normal(size=(1, 1, 3)))
    check(lambda x: weighted_sum(ag.mean(x, axis=1)), rng.normal(size=(2, 3, 4)))


def test_getitem_repeated_fancy_index_accumulates():
    x = ag.parameter(np.arange(4.0))
    ag.tsum(x[np.array([1, 1, 3])]).backward()
    assert np.array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_gather_rows():
    idx = np.array([[0, 2], [3, 1]])
    check(lambda x: weighted_sum(ag.gather_rows(x, idx)), rng.normal(size=(2, 4, 3)))


def test_cross_entropy_label_smoothing_closed_form():
    z = np.array([[2.0, 0.0, -1.0]])
    loss = ag.cross_entropy_label_smoothed(Tensor(z), [0], eps=0.1)
    logp = z - np.log(np.exp(z).sum())
    q = np.array([0.9 + 0.1 / 3, 0.1 / 3, 0.1 / 3])
    assert abs(float(loss.data) + (q * logp).sum()) < 1e-14
    check(lambda x: ag.cross_entropy_label_smoothed(x, [2, 0], 0.1), rng.normal(size=(2, 3)))


def test_cross_entropy_nonfinite_raises():
    with pytest.raises(ag.NonFiniteError):
        ag.cross_entropy_label_smoothed(Tensor([[np.nan, 0.0]]), [0])


def test_masked_weight_dense_gradient():
    w = ag.parameter(rng.normal(size=(3, 4)))
    m = (rng.random((3, 4)) > 0.5).astype(float)
    x = Tensor(rng.normal(size=(5, 4)))
    eff = ag.masked_weight(w, m)
    out = weighted_sum(ag.linear(x, eff))
    out.backward()
    assert np.allclose(w.grad, eff.grad * m)
    # the effective node sees the full gradient, including masked entries
    assert np.any(eff.grad[m == 0] != 0)


def test_masked_weight_rejects_bad_mask():
    w = ag.parameter(np.ones((2, 2)))
    with pytest.raises(ag.MaskError):
        ag.masked_weight(w, np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ag.DimensionError):
        ag.masked_weight(w, np.ones((2, 3)))


def test_straight_through_value_and_gradient():
    soft = ag.parameter(np.array([0.2, 0.5, 0.3]))
    hard = np.array([0.0, 1.0, 1.0])
    st_ = ag.straight_through(hard, soft)
    assert np.array_equal(st_.data, hard)
    ag.tsum(ag.mul(st_, np.array([1.0, 2.0, 3.0]))).backward()
    assert np.array_equal(soft.grad, [1.0, 2.0, 3.0])


def test_mac_counter():
    x, w = Tensor(np.ones((2, 3, 4))), Tensor(np.ones((5, 4)))
    with ag.count_macs() as c:
        ag.linear(x, w)
        ag.linear(x, w, active=7)
    assert c.total == 6 * 20 + 6 * 7


def test_shared_node_accumulates():
    x = ag.parameter(np.array([1.5, -2.0]))
    y = ag.mul(x, x)
    ag.tsum(ag.add(y, x)).backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_dimension_errors():
    with pytest.raises(ag.DimensionError):
        ag.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ag.DimensionError):
        ag.straight_through(np.ones(3), Tensor(np.ones(2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_linear_gradient_property(b, n_in, n_out, seed):
    r = np.random.default_rng(seed)
    check(lambda x, w: weighted_sum(ag.linear(x, w), seed),
          r.normal(size=(b, n_in)), r.normal(size=(n_out, n_in)), tol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(n, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(3, n))
    s = ag.softmax(Tensor(x)).data
    assert np.allclose(s.sum(axis=-1), 1.0) and np.all(s >= 0)
