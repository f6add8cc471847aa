"""Gradient checks for every autodiff primitive against central differences."""

import numpy as np
import pytest

from odin import autodiff as ad
from odin.autodiff import Tensor

from helpers import finite_diff_check, rand_tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_add_mul_broadcast(rng):
    a = rand_tensor(rng, 3, 4)
    b = rand_tensor(rng, 4)
    c = rand_tensor(rng, 3, 1)
    finite_diff_check(lambda: ((a + b) * c).sum(), [a, b, c])


def test_sub_div(rng):
    a = rand_tensor(rng, 2, 3)
    b = Tensor(rng.standard_normal((2, 3)) + 3.0, requires_grad=True)
    finite_diff_check(lambda: (a / b - b).sum(), [a, b])


def test_matmul_2d(rng):
    a = rand_tensor(rng, 3, 4)
    b = rand_tensor(rng, 4, 2)
    finite_diff_check(lambda: (a @ b).sum(), [a, b])


def test_matmul_batched_with_broadcast(rng):
    a = rand_tensor(rng, 2, 3, 4)
    b = rand_tensor(rng, 4, 5)
    w = rand_tensor(rng, 2, 5, 3)
    finite_diff_check(lambda: ((a @ b) @ w).sum(), [a, b, w])


def test_elementwise_nonlinearities(rng):
    x = rand_tensor(rng, 5)
    finite_diff_check(lambda: ad.tanh(x).sum(), [x])
    finite_diff_check(lambda: ad.gelu(x).sum(), [x])
    finite_diff_check(lambda: ad.softplus(x).sum(), [x])
    finite_diff_check(lambda: ad.exp(x).sum(), [x])
    y = Tensor(rng.random(5) + 0.5, requires_grad=True)
    finite_diff_check(lambda: ad.log(y).sum(), [y])


def test_softmax_rows_sum_to_one(rng):
    x = rand_tensor(rng, 4, 6)
    s = ad.softmax(x)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    w = Tensor(rng.standard_normal((4, 6)))
    finite_diff_check(lambda: (ad.softmax(x) * w).sum(), [x])


def test_softmax_with_mask(rng):
    x = rand_tensor(rng, 2, 5)
    mask = np.zeros((2, 5))
    mask[:, -2:] = -np.inf
    s = ad.softmax(x, mask=mask)
    assert np.all(s.data[:, -2:] == 0.0)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
    w = Tensor(rng.standard_normal((2, 5)))
    finite_diff_check(lambda: (ad.softmax(x, mask=mask) * w).sum(), [x])


def test_logsumexp_matches_naive(rng):
    x = rand_tensor(rng, 3, 7)
    got = ad.logsumexp(x).data
    want = np.log(np.exp(x.data).sum(axis=-1))
    np.testing.assert_allclose(got, want, atol=1e-12)
    finite_diff_check(lambda: ad.logsumexp(x).sum(), [x])


def test_layer_norm_value_and_grad(rng):
    x = rand_tensor(rng, 2, 3, 8)
    g = Tensor(rng.standard_normal(8), requires_grad=True)
    b = Tensor(rng.standard_normal(8), requires_grad=True)
    out = ad.layer_norm(x, g, b)
    normed = (x.data - x.data.mean(-1, keepdims=True)) / np.sqrt(
        x.data.var(-1, keepdims=True) + 1e-12
    )
    np.testing.assert_allclose(out.data, g.data * normed + b.data, atol=1e-10)
    w = Tensor(rng.standard_normal((2, 3, 8)))
    finite_diff_check(lambda: (ad.layer_norm(x, g, b) * w).sum(), [x, g, b])


def test_layer_norm_shift_invariance(rng):
    x = rand_tensor(rng, 4, 8, requires_grad=False)
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))
    shifted = Tensor(x.data + 3.7)
    a = ad.layer_norm(x, g, b).data
    c = ad.layer_norm(shifted, g, b).data
    assert np.max(np.abs(a - c)) < 1e-5


def test_take_rows_duplicates_accumulate(rng):
    x = rand_tensor(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    finite_diff_check(lambda: ad.take_rows(x, idx).sum(), [x])
    x.zero_grad()
    out = ad.take_rows(x, idx)
    out.backward(np.ones_like(out.data))
    assert x.grad[2, 0] == 2.0


def test_scatter_rows(rng):
    base = rand_tensor(rng, 5, 3)
    vals = rand_tensor(rng, 2, 3)
    idx = np.array([1, 3])
    out = ad.scatter_rows(base, idx, vals)
    np.testing.assert_array_equal(out.data[idx], vals.data)
    np.testing.assert_array_equal(out.data[[0, 2, 4]], base.data[[0, 2, 4]])
    w = Tensor(rng.standard_normal((5, 3)))
    finite_diff_check(lambda: (ad.scatter_rows(base, idx, vals) * w).sum(), [base, vals])


def test_segment_sum(rng):
    x = rand_tensor(rng, 6, 2)
    seg = np.array([0, 0, 1, 1, 1, 3])
    out = ad.segment_sum(x, seg, 4)
    np.testing.assert_allclose(out.data[0], x.data[0] + x.data[1])
    np.testing.assert_allclose(out.data[2], 0.0)
    finite_diff_check(lambda: ad.segment_sum(x, seg, 4).sum(), [x])


def test_gather_elements(rng):
    x = rand_tensor(rng, 4, 6)
    rows = np.array([0, 1, 3])
    cols = np.array([5, 0, 2])
    out = ad.gather_elements(x, rows, cols)
    np.testing.assert_array_equal(out.data, x.data[rows, cols])
    finite_diff_check(lambda: ad.gather_elements(x, rows, cols).sum(), [x])


def test_concat_and_getitem(rng):
    a = rand_tensor(rng, 2, 3)
    b = rand_tensor(rng, 4, 3)
    finite_diff_check(lambda: ad.concat([a, b], axis=0)[1:4].sum(), [a, b])


def test_reshape_transpose(rng):
    a = rand_tensor(rng, 2, 3, 4)
    finite_diff_check(lambda: ad.transpose(a.reshape(2, 12), (1, 0)).sum(), [a])


def test_linear_matches_manual(rng):
    x = rand_tensor(rng, 2, 3, 4)
    w = rand_tensor(rng, 4, 5)
    b = rand_tensor(rng, 5)
    out = ad.linear(x, w, b)
    np.testing.assert_allclose(out.data, x.data @ w.data + b.data, atol=1e-12)
    finite_diff_check(lambda: ad.linear(x, w, b).sum(), [x, w, b])


def test_no_grad_skips_tape(rng):
    x = rand_tensor(rng, 3)
    with ad.no_grad():
        y = (x * x).sum()
    assert y._backward is None and not y.requires_grad


def test_backward_accumulates_through_shared_subexpression(rng):
    x = rand_tensor(rng, 3)
    y = x * x
    loss = (y + y).sum()
    loss.backward()
    np.testing.assert_allclose(x.grad, 4 * x.data, atol=1e-12)
