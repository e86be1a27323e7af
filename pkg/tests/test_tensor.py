import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qvit import tensor as T


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def naive_layernorm(x, g, b, eps):
    out = np.zeros(x.shape)
    for i, row in enumerate(x):
        row = [float(v) for v in row]
        mean = sum(row) / len(row)
        var = sum((v - mean) ** 2 for v in row) / len(row)
        out[i] = [(v - mean) / math.sqrt(var + eps) * float(g[j]) + float(b[j]) for j, v in enumerate(row)]
    return out


def naive_softmax(x):
    out = np.zeros(x.shape)
    for i, row in enumerate(x):
        m = max(float(v) for v in row)
        e = [math.exp(float(v) - m) for v in row]
        out[i] = [v / sum(e) for v in e]
    return out


def test_matmul_examples():
    a = T.tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(a, T.tensor([[1], [1]])), [[3], [7]])
    m = T.tensor(np.arange(9).reshape(3, 3))
    np.testing.assert_array_equal(T.matmul(np.eye(3, dtype=np.float32), m), m)
    np.testing.assert_array_equal(T.matmul(m, np.eye(3, dtype=np.float32)), m)
    with pytest.raises(ValueError):
        T.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))


def test_tensor_shape_contract():
    assert T.tensor(range(6), shape=(2, 3)).shape == (2, 3)
    with pytest.raises(ValueError):
        T.tensor(range(5), shape=(2, 3))


@pytest.mark.parametrize("seed", range(5))
def test_ops_match_scalar_oracles(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 17, size=3)
    a = rng.normal(size=(m, k)).astype(np.float32)
    b = rng.normal(size=(k, n)).astype(np.float32)
    np.testing.assert_allclose(T.matmul(a, b), naive_matmul(a, b), rtol=1e-5, atol=1e-6)

    x = rng.normal(size=(m, k)).astype(np.float32)
    g = rng.normal(size=k).astype(np.float32)
    bias = rng.normal(size=k).astype(np.float32)
    np.testing.assert_allclose(T.layernorm(x, g, bias, 1e-6), naive_layernorm(x, g, bias, 1e-6),
                               rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(T.softmax(x), naive_softmax(x), rtol=1e-5, atol=1e-7)
    ref = np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(x.astype(np.float64))
    np.testing.assert_allclose(T.gelu(x), ref, rtol=1e-5, atol=1e-6)


def test_layernorm_examples():
    one, zero = np.ones(2, np.float32), np.zeros(2, np.float32)
    np.testing.assert_array_equal(T.layernorm(T.tensor([[5, 5]]), one, zero), [[0, 0]])
    np.testing.assert_allclose(T.layernorm(T.tensor([[1, 3]]), one, zero, eps=1e-12), [[-1, 1]], atol=1e-6)
    bias = T.tensor([0.3, -2.0])
    np.testing.assert_array_equal(T.layernorm(T.tensor([[1, 3], [7, 0]]), zero, bias),
                                  np.broadcast_to(bias, (2, 2)))
    with pytest.raises(ValueError):
        T.layernorm(T.tensor([[1, 3]]), one, zero, eps=0)


def test_layernorm_moments(rng):
    x = rng.normal(3.0, 5.0, size=(64, 32)).astype(np.float32)
    y = T.layernorm(x, np.ones(32, np.float32), np.zeros(32, np.float32)).astype(np.float64)
    assert np.abs(y.mean(axis=1)).max() < 1e-5
    assert np.abs(y.var(axis=1) - 1).max() < 1e-3


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(T.tensor([[0, 0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax(T.tensor([[1000, 1000]])), [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax(T.tensor([[0, math.log(3)]])), [[0.25, 0.75]], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.floats(1.0, 1e4), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(width, mag, seed):
    x = np.random.default_rng(seed).uniform(-mag, mag, size=(4, width)).astype(np.float32)
    s = T.softmax(x).astype(np.float64).sum(axis=1)
    assert np.abs(s - 1).max() <= 1e-6


def test_gelu_examples():
    assert T.gelu(T.tensor([0.0]))[0] == 0
    assert T.gelu(T.tensor([30.0]))[0] == pytest.approx(30.0)
    assert T.gelu(T.tensor([1.0]))[0] == pytest.approx(0.8413447, abs=1e-6)


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(T.tensor([[3, 4]])), [[0.6, 0.8]], rtol=1e-6)
    u = T.tensor([[0.6, 0.8]])
    np.testing.assert_allclose(T.l2_normalize(u), u, rtol=1e-6)
    np.testing.assert_array_equal(T.l2_normalize(T.tensor([[0, 0]])), [[0, 0]])


def test_argmax_rows(rng):
    assert T.argmax_rows(T.tensor([[0, 1, 0]])) == [1]
    assert T.argmax_rows(T.tensor([[2, 2]])) == [0]
    x = rng.normal(size=(5, 7)).astype(np.float32)
    oracle = []
    for row in x:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        oracle.append(best)
    assert T.argmax_rows(x) == oracle


def test_non_finite_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(T.NumericError):
        T.add(T.tensor([3e38]), T.tensor([3e38]))
    with pytest.raises(T.NumericError):
        T.matmul(T.tensor([[np.inf]]), T.tensor([[1.0]]))


@pytest.mark.parametrize("op", ["matmul", "layernorm", "softmax", "gelu", "l2", "add", "mul"])
def test_random_finite_inputs_stay_finite(op, rng):
    x = rng.normal(0, 100, size=(8, 8)).astype(np.float32)
    y = rng.normal(0, 100, size=(8, 8)).astype(np.float32)
    out = {
        "matmul": lambda: T.matmul(x, y),
        "layernorm": lambda: T.layernorm(x, np.ones(8, np.float32), np.zeros(8, np.float32)),
        "softmax": lambda: T.softmax(x),
        "gelu": lambda: T.gelu(x),
        "l2": lambda: T.l2_normalize(x),
        "add": lambda: T.add(x, y),
        "mul": lambda: T.mul(x, y),
    }[op]()
    assert np.isfinite(out).all()
    assert out.dtype == np.float32
