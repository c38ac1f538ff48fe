import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baar import tensor as T
from baar.gradcheck import check_gradients, numerical_gradient, relative_error

N_INSTANCES = 10
TOL = 1e-4


def param(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return T.parameter(data, dtype=np.float64)


def probe(out_shape, rng):
    """A fixed random readout so every output entry carries a distinct weight."""
    return rng.normal(size=out_shape)


def _loss(build, params, rng):
    out = build(*params)
    w = probe(out.shape, rng)
    return lambda: T.sum(build(*params) * w)


def _pair(rng):
    return [param(rng, 3, 4), param(rng, 3, 4)]


CASES = {
    "add": (lambda r: [param(r, 3, 4), param(r, 4)], lambda a, b: a + b),
    "sub": (lambda r: [param(r, 3, 4), param(r, 3, 1)], lambda a, b: a - b),
    "mul": (_pair, lambda a, b: a * b),
    "div": (lambda r: [param(r, 3, 4), param(r, 3, 4, low=0.5)], lambda a, b: a / b),
    "neg": (lambda r: [param(r, 5)], lambda a: -a),
    "scale": (lambda r: [param(r, 2, 3)], lambda a: T.scale(a, -1.7)),
    "exp": (lambda r: [param(r, 2, 5)], T.exp),
    "log": (lambda r: [param(r, 2, 5, low=0.3)], T.log),
    "tanh": (lambda r: [param(r, 4, 3)], T.tanh),
    "sigmoid": (lambda r: [param(r, 4, 3)], T.sigmoid),
    "gelu": (lambda r: [param(r, 4, 3)], T.gelu),
    "relu": (lambda r: [T.parameter((np.abs(r.normal(size=(4, 3))) + 0.1) * np.sign(r.normal(size=(4, 3))))], T.relu),
    "matmul": (lambda r: [param(r, 5, 3), param(r, 3, 2)], T.matmul),
    "matmul_batched": (lambda r: [param(r, 2, 3, 4, 5), param(r, 2, 3, 5, 2)], T.matmul),
    "matmul_broadcast": (lambda r: [param(r, 2, 4, 3), param(r, 3, 2)], T.matmul),
    "sum_axis": (lambda r: [param(r, 3, 4, 2)], lambda a: T.sum(a, axis=1)),
    "mean_keepdims": (lambda r: [param(r, 3, 4)], lambda a: T.mean(a, axis=0, keepdims=True)),
    "reshape": (lambda r: [param(r, 3, 4)], lambda a: T.reshape(a, (2, 6))),
    "transpose": (lambda r: [param(r, 2, 3, 4)], lambda a: T.transpose(a, (1, 2, 0))),
    "transpose_last": (lambda r: [param(r, 2, 3, 4)], T.transpose),
    "concat": (lambda r: [param(r, 2, 3), param(r, 4, 3)], lambda a, b: T.concat([a, b], axis=0)),
    "stack": (_pair, lambda a, b: T.stack([a, b], axis=1)),
    "slice": (lambda r: [param(r, 5, 6)], lambda a: a[1:4, ::2]),
    "fancy_index": (lambda r: [param(r, 5, 3)], lambda a: a[np.array([0, 2, 2, 4])]),
    "softmax_rows": (lambda r: [param(r, 3, 5)], T.softmax_rows),
    "log_softmax": (lambda r: [param(r, 3, 5)], T.log_softmax),
    "layer_norm": (lambda r: [param(r, 4, 6), param(r, 6), param(r, 6)], T.layer_norm),
    "rotate_pairs": (
        lambda r: [param(r, 3, 6)],
        lambda a: T.rotate_pairs(a, np.cos(np.arange(9.0).reshape(3, 3)), np.sin(np.arange(9.0).reshape(3, 3))),
    ),
    "conv1d": (lambda r: [param(r, 2, 9, 3), param(r, 4, 3, 3), param(r, 4)], T.conv1d),
    "conv1d_no_bias": (lambda r: [param(r, 7, 2), param(r, 1, 2, 3)], lambda x, k: T.conv1d(x, k)),
    "embedding": (lambda r: [param(r, 6, 4)], lambda t: T.embedding(t, np.array([[0, 5, 5], [2, 1, 0]]))),
}

LOSSES = {
    "cross_entropy": (lambda r: [param(r, 6, 5)], lambda z: T.cross_entropy(z, np.array([0, 4, 2, 2, 1, 3]))),
    "cross_entropy_weighted": (
        lambda r: [param(r, 2, 3, 5)],
        lambda z: T.cross_entropy(z, np.array([[0, 1, 4], [3, 3, 2]]), weights=np.array([[1, 0, 1], [0.5, 1, 0]])),
    ),
    "mse": (lambda r: [param(r, 4, 3)], lambda p: T.mse_loss(p, np.arange(12.0).reshape(4, 3) / 7)),
    "mse_weighted": (lambda r: [param(r, 4, 3)], lambda p: T.mse_loss(p, np.ones((4, 3)), weights=np.array([1.0, 0.0, 2.0]))),
    "bce_with_logits": (lambda r: [param(r, 8)], lambda z: T.bce_with_logits(z, np.array([0, 1, 1, 0, 1, 0, 0, 1]))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    make, build = CASES[name]
    for seed in range(N_INSTANCES):
        rng = np.random.default_rng(seed)
        params = make(rng)
        errs = check_gradients(_loss(build, params, rng), params)
        assert max(errs.values()) < TOL, (name, seed, errs)


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_loss_gradients(name):
    make, build = LOSSES[name]
    for seed in range(N_INSTANCES):
        params = make(np.random.default_rng(seed))
        errs = check_gradients(lambda: build(*params), params)
        assert max(errs.values()) < TOL, (name, seed, errs)


def test_gradcheck_detects_a_wrong_gradient():
    x = T.parameter(np.array([0.3, -1.2, 2.0]))

    def bad(a):
        return T._node(a.data**2, (a,), lambda g: (g * a.data,))  # true derivative is 2a

    errs = check_gradients(lambda: T.sum(bad(x)), [x])
    assert errs["0"] > 0.1


def test_relative_error_scaling():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-9])) < 1e-8
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_numerical_gradient_restores_parameter():
    x = T.parameter(np.array([1.0, 2.0]))
    before = x.data.copy()
    g = numerical_gradient(lambda: T.sum(x * x * x), x)
    np.testing.assert_allclose(g, 3 * before**2, rtol=1e-8)
    np.testing.assert_array_equal(x.data, before)


# ----- worked examples ------------------------------------------------------


def test_matmul_examples():
    eye = T.tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((eye @ b).data, b.data)
    np.testing.assert_array_equal(T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(T.tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = T.softmax_rows(T.tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-300)


def test_softmax_rejects_nan():
    with pytest.raises(T.NumericError):
        T.softmax_rows(T.tensor([[0.0, np.nan]]))


def test_softmax_negative_infinity_masks():
    out = T.softmax_rows(T.tensor([[1.0, -np.inf, 1.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(x):
    rows = T.softmax_rows(T.tensor(x)).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-6)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_matmul_associativity(m, k, p, n, seed):
    rng = np.random.default_rng(seed)
    A, B, C = (T.tensor(rng.normal(size=s)) for s in [(m, k), (k, p), (p, n)])
    left = ((A @ B) @ C).data
    right = (A @ (B @ C)).data
    np.testing.assert_allclose(left, right, rtol=1e-5, atol=1e-12)


def test_conv1d_lengths():
    k = T.tensor(np.ones((1, 1, 3)))
    assert T.conv1d(T.tensor(np.zeros((3000, 1))), k).shape == (1500, 1)
    assert T.conv1d(T.tensor(np.zeros((5, 1))), k).shape == (3, 1)


def test_conv1d_brute_force_sums():
    x = T.tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    out = T.conv1d(x, T.tensor(np.ones((1, 1, 3))))
    # windows over the zero-padded [0,1,2,3,4,0] starting at 0 and 2
    np.testing.assert_array_equal(out.data[:, 0], [0 + 1 + 2, 2 + 3 + 4])


def test_conv1d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 11, 3))
    k = rng.normal(size=(4, 3, 3))
    b = rng.normal(size=4)
    got = T.conv1d(T.tensor(x), T.tensor(k), T.tensor(b)).data
    padded = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    want = np.zeros((2, 6, 4))
    for bi in range(2):
        for t in range(6):
            for o in range(4):
                want[bi, t, o] = b[o] + sum(k[o, v, j] * padded[bi, 2 * t + j, v] for v in range(3) for j in range(3))
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_conv1d_empty_input():
    with pytest.raises(ValueError, match="empty"):
        T.conv1d(T.tensor(np.zeros((0, 1))), T.tensor(np.ones((1, 1, 3))))


# ----- graph contract -------------------------------------------------------


def test_backward_examples():
    x = T.parameter(np.arange(6.0).reshape(2, 3))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = T.parameter([1.0, 2.0])
    T.backward(T.sum(y * y))
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = T.parameter(np.ones(3))
    with pytest.raises(T.GraphError, match="scalar"):
        T.backward(x * 2.0)


def test_second_backward_is_an_error():
    x = T.parameter(np.ones(3))
    loss = T.sum(x * x)
    T.backward(loss)
    with pytest.raises(T.GraphError):
        T.backward(loss)


def test_backward_without_grad_inputs():
    with pytest.raises(T.GraphError):
        T.backward(T.sum(T.tensor(np.ones(2))))


def test_leaf_gradients_accumulate():
    x = T.parameter(np.array([1.0, 3.0]))
    T.backward(T.sum(x * x))
    T.backward(T.sum(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, 12.0])


def test_every_reachable_leaf_gets_a_gradient():
    rng = np.random.default_rng(0)
    a, b, c = param(rng, 3), param(rng, 3), param(rng, 3)
    unused = param(rng, 3)
    T.backward(T.sum(a * b) + T.sum(T.exp(c) * 0.0))
    assert a.grad is not None and b.grad is not None and c.grad is not None
    assert a.grad.shape == a.shape
    assert unused.grad is None


def test_graph_is_freed_after_backward():
    x = T.parameter(np.ones(2))
    mid = x * 2.0
    loss = T.sum(mid)
    T.backward(loss)
    assert mid._parents == () and loss._parents == ()


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(2))
    with T.no_grad():
        y = x * 3.0
        assert not T.is_grad_enabled()
    assert T.is_grad_enabled()
    assert not y.requires_grad


def test_shape_invariants():
    t = T.tensor(np.zeros((2, 3, 4)))
    assert t.size == int(np.prod(t.shape)) == 24
    assert t.ndim == 3


def test_float32_stays_float32():
    x = T.parameter(np.ones((2, 3)), dtype=np.float32)
    w = T.parameter(np.ones((3, 2)), dtype=np.float32)
    out = T.gelu(x @ w) * 0.5 + 1.0
    assert out.dtype == np.float32
    T.backward(T.sum(out))
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32
