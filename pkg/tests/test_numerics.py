import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from uniquant import numerics as nx


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        grad[idx] = (f(up) - f(dn)) / (2 * h)
    return grad


def test_affine_small_cases():
    out = nx.affine(nx.constant([[1.0, 0.0]]), nx.constant([[0.0, 1.0]]), nx.constant([0.0]))
    assert out.value.tolist() == [[0.0]]
    out = nx.affine(nx.constant([[1.0, 2.0]]), nx.constant([[3.0, 4.0]]), nx.constant([1.0]))
    assert out.value.tolist() == [[12.0]]


def test_affine_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=2)
    Wn = nx.parameter(W)
    out = nx.affine(nx.constant(x), Wn, nx.constant(b))
    out.backward()
    fd = central_diff(lambda w: np.sum(x @ w.T + b), W)
    assert np.allclose(Wn.grad, fd, rtol=1e-6, atol=1e-9)


def test_affine_shape_errors():
    with pytest.raises(nx.ShapeError):
        nx.affine(nx.constant(np.zeros((2, 3))), nx.constant(np.zeros((2, 4))), nx.constant(np.zeros(2)))
    with pytest.raises(nx.ShapeError):
        nx.affine(nx.constant(np.zeros((2, 3))), nx.constant(np.zeros((2, 3))), nx.constant(np.zeros(3)))


def test_frobenius_sq():
    a = nx.constant([[1.0, 2.0]])
    assert float(nx.frobenius_sq(a, a).value) == 0.0
    assert float(nx.frobenius_sq(a, nx.constant([[0.0, 0.0]])).value) == 5.0


def test_frobenius_sq_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(5, 7))
    want = 0.0
    for i in range(5):
        for j in range(7):
            want += (a[i, j] - b[i, j]) ** 2
    assert abs(float(nx.frobenius_sq(nx.constant(a), nx.constant(b)).value) - want) < 1e-12


def test_frobenius_sq_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.frobenius_sq(nx.constant(np.zeros(3)), nx.constant(np.zeros(4)))


@pytest.mark.parametrize("mask, want", [
    ([1, 1, 1], [1.0, 1.0, 1.0]),
    ([0, 0, 0], [0.0, 0.0, 0.0]),
])
def test_ste_constant_masks(mask, want):
    sur = nx.parameter([0.2, 1.7, 2.4])
    out = nx.ste_passthrough([0.0, 2.0, 2.0], sur, mask)
    assert out.value.tolist() == [0.0, 2.0, 2.0]
    out.backward()
    assert sur.grad.tolist() == want


def test_ste_mixed_mask_passes_incoming_gradient():
    sur = nx.parameter([0.2, 1.7, 2.4])
    out = nx.ste_passthrough([0.0, 2.0, 2.0], sur, [1, 0, 1])
    assert out.ste
    out.backward(seed=[3.0, 5.0, 7.0])
    assert sur.grad.tolist() == [3.0, 0.0, 7.0]


def test_backward_visits_shared_nodes_once():
    # y = x*x + x: a diamond; dy/dx = 2x + 1
    x = nx.parameter([3.0])
    y = x * x + x
    y.backward()
    assert y.grad is not None and x.grad.tolist() == [7.0]
    y.backward()  # a second pass resets rather than accumulates
    assert x.grad.tolist() == [7.0]


def test_expand_and_reshape_gradients():
    a = nx.parameter(np.array([[1.0], [2.0]]))
    e = nx.reshape(nx.expand(a, (2, 3)), (3, 2))
    e.backward()
    assert a.grad.tolist() == [[3.0], [3.0]]
    with pytest.raises(nx.ShapeError):
        nx.expand(nx.constant(np.zeros((2, 2))), (2, 3))


def test_concat_cols_routes_gradients():
    a, b = nx.parameter(np.ones((2, 1))), nx.parameter(np.ones((2, 2)))
    c = nx.concat_cols([a, b])
    c.backward(seed=np.arange(6.0).reshape(2, 3))
    assert a.grad.tolist() == [[0.0], [3.0]]
    assert b.grad.tolist() == [[1.0, 2.0], [4.0, 5.0]]


def test_code_matvec_gradient():
    rng = np.random.default_rng(1)
    C = np.where(rng.random((2, 4, 3)) < 0.5, 1.0, -1.0)
    al = nx.parameter(rng.normal(size=(2, 3)))
    nx.code_matvec(C, al).backward()
    assert np.allclose(al.grad, C.sum(axis=1))


@pytest.mark.parametrize("op", ["mul", "div", "exp", "gelu", "sub"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(2)
    x0, y = rng.uniform(0.5, 2.0, 5), rng.uniform(0.5, 2.0, 5)
    funcs = {
        "mul": (lambda n: n * nx.constant(y), lambda v: v * y),
        "div": (lambda n: nx.constant(y) / n, lambda v: y / v),
        "exp": (nx.exp, np.exp),
        "gelu": (nx.gelu, nx.gelu_value),
        "sub": (lambda n: nx.constant(y) - n, lambda v: y - v),
    }
    graph, plain = funcs[op]
    x = nx.parameter(x0)
    graph(x).backward()
    assert np.allclose(x.grad, central_diff(lambda v: plain(v).sum(), x0), rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_library_ops_stay_finite(v):
    x = nx.parameter(v)
    out = nx.gelu(x * x) + nx.exp(nx.constant(np.zeros(6)))
    out.backward()
    assert np.all(np.isfinite(out.value)) and np.all(np.isfinite(x.grad))


def test_tensors_are_read_only():
    n = nx.constant([1.0, 2.0])
    with pytest.raises(ValueError):
        n.value[0] = 5.0
