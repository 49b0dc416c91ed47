"""Autodiff engine: per-op gradient checks, fixed-value oracles, tape rules."""

import numpy as np
import pytest

from lrdet import tensor as T
from lrdet.errors import ContractError, NumericError
from lrdet.gradcheck import gradcheck

TOL = 1e-6


def leaf(r, *shape, scale=1.0):
    return T.Tensor(scale * r.standard_normal(shape), requires_grad=True)


def check(fn, *inputs, sample=None):
    err = gradcheck(fn, list(inputs), sample=sample)
    assert err < TOL, f"max relative gradient error {err:.3e}"


def test_grad_binary_arithmetic():
    r = np.random.default_rng(0)
    a, b = leaf(r, 4, 3), leaf(r, 4, 3)
    check(lambda x, y: (x + y).sum(), a, b)
    check(lambda x, y: (x - y).sum(), a, b)
    check(lambda x, y: (x * y).sum(), a, b)
    d = T.Tensor(r.uniform(1.0, 2.0, (4, 3)), requires_grad=True)
    check(lambda x, y: (x / y).sum(), a, d)


def test_grad_broadcasting():
    r = np.random.default_rng(1)
    a = leaf(r, 5, 4)
    b = leaf(r, 4)
    c = leaf(r, 5, 1)
    check(lambda x, y: (x * y).sum(), a, b)
    check(lambda x, y: (x + y).sum(), a, c)
    s = T.Tensor(np.float64(0.7), requires_grad=True)
    check(lambda x, y: (x * y).sum(), a, s)


def test_grad_unary():
    r = np.random.default_rng(2)
    a = leaf(r, 6)
    check(lambda x: (-x).sum(), a)
    check(lambda x: x.exp().sum(), a)
    pos = T.Tensor(r.uniform(0.5, 3.0, 6), requires_grad=True)
    check(lambda x: x.log().sum(), pos)
    check(lambda x: (x ** 3).sum(), a)
    check(lambda x: (x ** 0).sum(), a)  # constant branch must not blow up
    off_zero = T.Tensor(r.standard_normal(8) + np.sign(r.standard_normal(8)) * 0.5,
                        requires_grad=True)
    check(lambda x: T.absolute(x).sum(), off_zero)
    check(lambda x: T.relu(x).sum(), off_zero)


def test_grad_smooth_activations():
    r = np.random.default_rng(3)
    a = leaf(r, 10, scale=2.0)
    check(lambda x: T.sigmoid(x).sum(), a)
    check(lambda x: T.softplus(x).sum(), a)
    check(lambda x: T.gelu(x).sum(), a)


def test_grad_minmax_clamp():
    r = np.random.default_rng(4)
    a = leaf(r, 12)
    # Keep operands well separated so FD does not cross the tie point.
    b = T.Tensor(a.data + np.sign(r.standard_normal(12)) * 0.5, requires_grad=True)
    check(lambda x, y: T.maximum(x, y).sum(), a, b)
    check(lambda x, y: T.minimum(x, y).sum(), a, b)
    inner = T.Tensor(r.uniform(-0.8, 0.8, 9), requires_grad=True)
    check(lambda x: T.clamp(x, -1.0, 1.0).sum(), inner)


def test_grad_matmul():
    r = np.random.default_rng(5)
    a, b = leaf(r, 3, 4), leaf(r, 4, 5)
    check(lambda x, y: (x @ y).sum(), a, b)
    ab, bb = leaf(r, 2, 3, 4), leaf(r, 2, 4, 5)
    check(lambda x, y: (x @ y).sum(), ab, bb, sample=10)


def test_grad_rowwise_matmul():
    r = np.random.default_rng(55)
    a, b = leaf(r, 5, 4), leaf(r, 4, 3)
    check(lambda x, y: T.rowwise_matmul(x, y).sum(), a, b)


def test_rowwise_matmul_values_and_row_stability():
    r = np.random.default_rng(56)
    a = r.standard_normal((6, 16))
    b = r.standard_normal((16, 3))
    out = T.rowwise_matmul(T.Tensor(a), T.Tensor(b)).data
    for i in range(6):
        assert np.array_equal(out[i], a[i] @ b)
    # A row's bits must not depend on its position.
    for trial in range(50):
        perm = r.permutation(6)
        pa = np.ascontiguousarray(a[perm])
        pout = T.rowwise_matmul(T.Tensor(pa), T.Tensor(b)).data
        assert np.array_equal(pout, out[perm])
    with pytest.raises(ContractError):
        T.rowwise_matmul(T.Tensor(a), T.Tensor(r.standard_normal((4, 3))))
    with pytest.raises(ContractError):
        T.rowwise_matmul(T.Tensor(a[0]), T.Tensor(b))


def test_grad_reductions_and_shapes():
    r = np.random.default_rng(6)
    a = leaf(r, 3, 4, 2)
    check(lambda x: x.sum(), a)
    check(lambda x: x.sum(axis=1).sum(), a)
    check(lambda x: x.sum(axis=(0, 2), keepdims=True).sum(), a)
    check(lambda x: x.mean(axis=-1).sum(), a)
    check(lambda x: x.reshape(6, 4).sum(axis=0).sum(), a)
    check(lambda x: x.transpose(2, 0, 1).sum(), a)
    check(lambda x: T.narrow(x, 1, 1, 2).sum(), a)


def test_grad_concat_index():
    r = np.random.default_rng(7)
    a, b = leaf(r, 3, 4), leaf(r, 2, 4)
    check(lambda x, y: T.concat([x, y], axis=0).sum(), a, b)
    idx = np.array([2, 0, 2])
    check(lambda x: T.index_rows(x, idx).sum(), a)


def test_grad_softmax_masked():
    r = np.random.default_rng(8)
    a = leaf(r, 4, 6)
    probe0 = r.standard_normal((4, 6))
    check(lambda x: (T.softmax_masked(x) * probe0).sum(), a)
    bias = np.zeros((4, 6))
    bias[0, 3] = T.MASK_VALUE
    bias[2, 0] = T.MASK_VALUE
    bias[1] = np.log(0.5)
    probe = r.standard_normal((4, 6))
    check(lambda x: (T.softmax_masked(x, bias=bias) * probe).sum(), a)


def test_grad_attention_and_norm():
    r = np.random.default_rng(9)
    w, v = leaf(r, 2, 3, 5), leaf(r, 2, 5, 4)
    check(lambda x, y: T.attn_mix(x, y).sum(), w, v)
    x = leaf(r, 3, 8)
    g = T.Tensor(r.uniform(0.5, 1.5, 8), requires_grad=True)
    b = leaf(r, 8)
    probe = r.standard_normal((3, 8))
    check(lambda xx, gg, bb: (T.layer_norm(xx, gg, bb) * probe).sum(), x, g, b)


def test_grad_bilinear_and_unfold():
    r = np.random.default_rng(10)
    feat = leaf(r, 6, 7, 3)
    # Fractional parts away from 0/1 so FD never crosses a grid line.
    base = np.stack([r.integers(0, 6, 9), r.integers(0, 5, 9)], axis=1).astype(float)
    pts = T.Tensor(base + r.uniform(0.25, 0.75, (9, 2)), requires_grad=True)
    probe = r.standard_normal((9, 3))
    check(lambda f, p: (T.bilinear_sample(f, p) * probe).sum(), feat, pts)
    img = leaf(r, 6, 6, 2)
    check(lambda x: (T.unfold(x, 3, 3, 2, 1) * 0.7).sum(), img, sample=24)


def test_softmax_uniform_rows():
    out = T.softmax_masked(T.Tensor(np.zeros((1, 4))))
    assert np.array_equal(out.data, np.full((1, 4), 0.25))


def test_softmax_known_values():
    out = T.softmax_masked(T.Tensor(np.array([[1.0, 2.0, 3.0]])))
    assert np.allclose(out.data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-6)


def test_softmax_mask_excludes_exactly():
    logits = T.Tensor(np.zeros((1, 2)))
    bias = np.array([0.0, T.MASK_VALUE])
    out = T.softmax_masked(logits, bias=bias)
    assert out.data[0, 0] == 1.0
    assert out.data[0, 1] == 0.0


def test_softmax_fully_masked_row_is_zeros():
    logits = T.Tensor(np.zeros((2, 3)))
    bias = np.zeros((2, 3))
    bias[1] = T.MASK_VALUE
    out = T.softmax_masked(logits, bias=bias)
    assert np.array_equal(out.data[1], np.zeros(3))
    assert np.allclose(out.data[0], np.full(3, 1 / 3))


def test_softmax_rejects_nonfinite():
    bad = T.Tensor(np.array([[0.0, np.nan]]))
    with pytest.raises(NumericError):
        T.softmax_masked(bad)


def test_softmax_rows_sum_to_one():
    r = np.random.default_rng(11)
    z = T.Tensor(r.standard_normal((50, 9)) * 5)
    out = T.softmax_masked(z)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_gelu_fixed_points():
    x = T.Tensor(np.array([0.0, 1.0, 8.0, -8.0]))
    y = T.gelu(x).data
    assert y[0] == 0.0
    assert abs(y[1] - 0.8413447460685429) < 1e-12
    assert abs(y[2] - 8.0) < 1e-9
    assert abs(y[3]) < 1e-9


def test_layer_norm_fixed_points():
    d = 2
    gamma = T.Tensor(np.ones(d))
    beta = T.Tensor(np.zeros(d))
    const = T.layer_norm(T.Tensor(np.full((3, d), 4.0)), gamma, beta)
    assert np.allclose(const.data, 0.0, atol=1e-12)
    out = T.layer_norm(T.Tensor(np.array([[1.0, 3.0]])), gamma, beta)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-2)  # eps shrinks slightly


def test_matmul_small_example():
    a = T.Tensor(np.array([[1.0, 2.0]]))
    b = T.Tensor(np.array([[3.0], [4.0]]))
    assert (a @ b).data[0, 0] == 11.0


def test_no_grad_blocks_recording():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 2).sum()
    assert y._parents == ()
    z = (x * 2).sum()
    z.backward()
    assert np.array_equal(x.grad, np.full(3, 2.0))


def test_backward_accumulates():
    x = T.Tensor(np.ones(4), requires_grad=True)
    (x * 3).sum().backward()
    (x * 2).sum().backward()
    assert np.array_equal(x.grad, np.full(4, 5.0))


def test_gradient_linearity():
    # d(sum of losses) equals the sum of individual gradients.
    r = np.random.default_rng(12)
    v = r.standard_normal(6)
    x = T.Tensor(v, requires_grad=True)
    ((x ** 2).sum() + (x * 3).sum()).backward()
    combined = x.grad.copy()
    x.zero_grad()
    (x ** 2).sum().backward()
    g1 = x.grad.copy()
    x.zero_grad()
    (x * 3).sum().backward()
    g2 = x.grad.copy()
    assert np.allclose(combined, g1 + g2, atol=1e-12)


def test_backward_requires_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()


def test_seeded_backward_deterministic():
    def run():
        r = np.random.default_rng(99)
        x = T.Tensor(r.standard_normal((8, 8)), requires_grad=True)
        y = T.Tensor(r.standard_normal((8, 8)), requires_grad=True)
        loss = (T.gelu(x @ y) * r.standard_normal((8, 8))).sum()
        loss.backward()
        return loss.data.copy(), x.grad.copy(), y.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_ndarray_interop_dispatches_to_tensor():
    x = T.Tensor(np.ones(3), requires_grad=True)
    arr = np.full(3, 2.0)
    left = arr * x
    right = x * arr
    assert isinstance(left, T.Tensor) and isinstance(right, T.Tensor)
    (left.sum() + right.sum()).backward()
    assert np.array_equal(x.grad, np.full(3, 4.0))


def test_dtype_guard():
    # Integers are promoted; anything else is refused.
    assert T.Tensor(np.zeros(3, dtype=np.int32)).dtype == np.float64
    with pytest.raises(ContractError):
        T.Tensor(np.zeros(3, dtype=np.complex128))


def test_detach_cuts_graph():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = (x * 5).detach()
    assert not y.requires_grad
    loss = (y * x).sum()
    loss.backward()
    assert np.array_equal(x.grad, np.full(3, 5.0))
