"""Compiled kernels against the numpy fallback, and the basic differentiable ops."""

import math

import numpy as np
import pytest

from lbsf.nn import _fallback, backend
from lbsf.nn import functional as F
from lbsf.nn.tensor import NumericError, Parameter, Tensor, precision

needs_compiled = pytest.mark.skipif(not backend.has_compiled(), reason="compiled kernels not built")
BACKENDS = ["numpy"] + (["compiled"] if backend.has_compiled() else [])


@pytest.fixture(params=BACKENDS)
def each_backend(request):
    with backend.using(request.param):
        yield request.param


@needs_compiled
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-6)])
def test_compiled_matches_fallback(dtype, tol):
    from lbsf.nn import _kernels as K

    rng = np.random.default_rng(0)
    x = (rng.normal(size=(3, 5, 7)) * 4).astype(dtype)
    mask = (rng.random((3, 7)) < 0.7).astype(np.uint8)
    mask[:, 0] = 1
    mask[2] = 0  # a group without admissible keys
    np.testing.assert_allclose(K.masked_softmax_forward(x, mask), _fallback.masked_softmax_forward(x, mask), atol=tol)
    y = _fallback.masked_softmax_forward(x, mask).reshape(-1, 7)
    gy = rng.normal(size=y.shape).astype(dtype)
    np.testing.assert_allclose(K.softmax_backward(y, gy), _fallback.softmax_backward(y, gy), atol=tol * 10)

    x2 = rng.normal(size=(11, 6)).astype(dtype)
    g, b = rng.normal(size=6).astype(dtype), rng.normal(size=6).astype(dtype)
    for a, c in zip(K.layer_norm_forward(x2, g, b, 1e-5), _fallback.layer_norm_forward(x2, g, b, 1e-5)):
        np.testing.assert_allclose(a, c, atol=tol * 10)
    _, xhat, rstd = _fallback.layer_norm_forward(x2, g, b, 1e-5)
    gy2 = rng.normal(size=x2.shape).astype(dtype)
    for a, c in zip(K.layer_norm_backward(gy2, xhat, rstd, g), _fallback.layer_norm_backward(gy2, xhat, rstd, g)):
        np.testing.assert_allclose(a, c, atol=tol * 10)

    z = np.linspace(-12, 12, 1001).astype(dtype)
    gz = rng.normal(size=z.shape).astype(dtype)
    np.testing.assert_allclose(K.gelu_forward(z), _fallback.gelu_forward(z), atol=tol * 10)
    np.testing.assert_allclose(K.gelu_backward(z, gz), _fallback.gelu_backward(z, gz), atol=tol * 10)


def test_backend_switch():
    prev = backend.name()
    with backend.using("numpy"):
        assert backend.name() == "numpy"
    assert backend.name() == prev
    with pytest.raises(ValueError):
        backend.use("gpu")


def test_softmax_examples(each_backend):
    with precision(np.float64):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
        big = F.softmax(Tensor([1000.0, 0.0])).data
        assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] < 1e-300
        np.testing.assert_allclose(F.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        np.testing.assert_allclose(F.softmax(x, axis=0).data.sum(axis=0), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        F.softmax(Tensor(np.zeros((2, 0))))


def test_gelu_reference(each_backend):
    with precision(np.float64):
        z = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
        ref = 0.5 * z * (1 + np.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z**3)))
        np.testing.assert_allclose(F.gelu(Tensor(z)).data, ref, atol=1e-14)


def test_layer_norm_reference(each_backend):
    with precision(np.float64):
        x = np.random.default_rng(1).normal(size=(4, 6))
        g, b = Parameter(np.full(6, 2.0)), Parameter(np.full(6, 0.5))
        ref = 2.0 * (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) + 0.5
        np.testing.assert_allclose(F.layer_norm(Tensor(x), g, b).data, ref, atol=1e-12)


def test_masked_mean():
    with precision(np.float64):
        r = np.array([[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]])
        np.testing.assert_allclose(F.masked_mean(Tensor(r), [True, True, False]).data, [0.5, 0.5])
        np.testing.assert_allclose(F.masked_mean(Tensor(r[:1]), [True]).data, r[0])
        np.testing.assert_allclose(F.masked_mean(Tensor([[3.0, 4.0], [3.0, 4.0]]), [True, True]).data, [3.0, 4.0])
        with pytest.raises(ValueError):
            F.masked_mean(Tensor(r), [False, False, False])


def test_bce_closed_forms():
    with precision(np.float64):
        assert float(F.binary_cross_entropy(Tensor([0.5]), [1]).data) == pytest.approx(math.log(2), abs=1e-12)
        assert float(F.binary_cross_entropy(Tensor([0.5, 0.5]), [1, 0]).data) == pytest.approx(math.log(2), abs=1e-12)
        assert float(F.binary_cross_entropy(Tensor([1 - 1e-7]), [1]).data) < 1e-6
        assert math.isfinite(float(F.binary_cross_entropy(Tensor([0.0]), [1]).data))
        with pytest.raises(ValueError):
            F.binary_cross_entropy(Tensor(np.zeros(0)), [])


def test_nonfinite_raises_with_op_name():
    with pytest.raises(NumericError) as exc, np.errstate(over="ignore"):
        F.linear(Tensor([[1e30, 1e30]]), Parameter(np.full((2, 1), 1e30)))
    assert exc.value.op == "linear"


def test_index_add_deterministic():
    from lbsf.nn.tensor import index_add

    vals = np.random.default_rng(0).normal(size=(50, 3))
    idx = np.random.default_rng(1).integers(0, 5, size=50)
    ref = np.zeros((5, 3))
    np.add.at(ref, idx, vals)
    np.testing.assert_allclose(index_add(np.zeros((5, 3)), idx, vals), ref, atol=1e-12)
    assert np.array_equal(index_add(np.zeros((5, 3)), idx, vals), index_add(np.zeros((5, 3)), idx, vals))
