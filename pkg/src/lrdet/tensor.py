"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float32 or float64 ndarray plus an optional backward
closure and parent pointers. Calling backward() on a scalar walks the
graph once in reverse topological order (iteratively, so deep cascades
cannot hit the recursion limit) and accumulates gradients into every
reachable tensor with requires_grad set. Gradients accumulate across
backward calls until zeroed.

Only the op set needed by the model lives here. Reductions that must be
independent of operand order (masked softmax normalization and the
weights-times-values contraction) route through the exactly-rounded
kernels; everything else uses plain numpy.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, NumericError

# Finite stand-in for minus infinity in attention logits. Anything at or
# below MASK_THRESHOLD is treated as fully masked: it contributes exactly
# zero weight and rows consisting only of masked entries produce all-zero
# weights instead of NaN.
MASK_VALUE = -1e30
MASK_THRESHOLD = -1e29

_ALLOWED = (np.float32, np.float64)

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # Make ndarray <op> Tensor dispatch to the reflected Tensor operator
    # instead of numpy building an object array.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.float16:
                arr = arr.astype(np.float64)
            else:
                raise ContractError(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data.copy())

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph construction --------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
        return out

    def backward(self):
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar tensor")
        order = _toposort(self)
        flows = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = flows.get(id(parent))
                flows[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def astensor(value, dtype=None):
    if isinstance(value, Tensor):
        if dtype is not None and value.dtype != np.dtype(dtype):
            raise ContractError(
                f"expected dtype {np.dtype(dtype)}, got tensor of {value.dtype}"
            )
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a, b):
    """Coerce operands of a binary op; scalars adopt the tensor's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise ContractError(f"mixed dtypes in op: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise ContractError("binary op needs at least one Tensor operand")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return Tensor._result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data / b.data, (a, b), backward)


def neg(a):
    a = astensor(a)

    def backward(g):
        return (-g,)

    return Tensor._result(-a.data, (a,), backward)


def power(a, exponent):
    a = astensor(a)
    if isinstance(exponent, Tensor):
        raise ContractError("power() supports scalar exponents only")
    e = float(exponent)

    def backward(g):
        if e == 0.0:
            return (np.zeros_like(a.data),)
        return (g * e * np.power(a.data, e - 1.0),)

    return Tensor._result(np.power(a.data, e), (a,), backward)


def exp(a):
    a = astensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return Tensor._result(out_data, (a,), backward)


def log(a):
    a = astensor(a)

    def backward(g):
        return (g / a.data,)

    return Tensor._result(np.log(a.data), (a,), backward)


def absolute(a):
    a = astensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return Tensor._result(np.abs(a.data), (a,), backward)


def maximum(a, b):
    a, b = _pair(a, b)
    take_a = a.data >= b.data

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return Tensor._result(np.maximum(a.data, b.data), (a, b), backward)


def minimum(a, b):
    a, b = _pair(a, b)
    take_a = a.data <= b.data

    def backward(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return Tensor._result(np.minimum(a.data, b.data), (a, b), backward)


def clamp(a, lo, hi):
    """Clamp to scalar bounds; gradient passes only where unclamped."""
    a = astensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return Tensor._result(np.clip(a.data, lo, hi), (a,), backward)


def relu(a):
    a = astensor(a)

    def backward(g):
        return (g * (a.data > 0),)

    return Tensor._result(np.maximum(a.data, 0), (a,), backward)


def sigmoid(a):
    a = astensor(a)
    # Stable in both tails.
    out_data = np.where(
        a.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(a.data))),
        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
    ).astype(a.dtype)

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor._result(out_data, (a,), backward)


def softplus(a):
    a = astensor(a)
    out_data = np.logaddexp(a.dtype.type(0), a.data)

    def backward(g):
        return (g * _sigmoid_data(a.data),)

    return Tensor._result(out_data, (a,), backward)


def _sigmoid_data(x):
    return np.where(
        x >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    ).astype(x.dtype)


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a):
    """Exact (erf-based) GELU."""
    a = astensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = (a.data * cdf).astype(a.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return ((g * (cdf + a.data * pdf)).astype(a.dtype),)

    return Tensor._result(out_data, (a,), backward)


# -- linear algebra and shape ops ------------------------------------------


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ContractError(
            f"matmul batch dims must match exactly: {a.shape} @ {b.shape}"
        )

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor._result(np.matmul(a.data, b.data), (a, b), backward)


def rowwise_matmul(a, b):
    """2-D product whose forward computes every output row independently.

    Bitwise equal to stacking ``a[i] @ b`` row by row, so each row's rounding
    depends only on that row's values and ``b``, never on where the row sits.
    A single BLAS product does not guarantee that: its kernels partition the
    row dimension and rows in different partitions can round differently,
    which breaks bit-level permutation equivariance along the row axis.
    Gradients use ordinary products; they carry no bit-stability contract.
    """
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("rowwise_matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise ContractError(
            f"rowwise_matmul inner dims disagree: {a.shape} @ {b.shape}"
        )
    out_data = np.matmul(a.data[:, None, :], b.data)[:, 0, :]

    def backward(g):
        ga = np.matmul(g, b.data.T)
        gb = np.matmul(a.data.T, g)
        return ga, gb

    return Tensor._result(np.ascontiguousarray(out_data), (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data, dtype=a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return Tensor._result(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, *shape):
    a = astensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._result(out_data, (a,), backward)


def transpose(a, *axes):
    a = astensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty sequence")
    dtype = tensors[0].dtype
    for t in tensors:
        if t.dtype != dtype:
            raise ContractError("concat requires matching dtypes")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = astensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ContractError(
            f"narrow out of range: axis {axis} start {start} length {length} "
            f"of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[index]), (a,), backward)


def index_rows(a, idx):
    """Select rows a[idx] along axis 0; duplicate indices sum gradients."""
    a = astensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError("index_rows expects a 1-D index array")

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[idx]), (a,), backward)


# -- fused model ops --------------------------------------------------------


def softmax_masked(a, bias=None):
    """Softmax over the last axis with additive masking semantics.

    `bias` (an ndarray or Tensor, treated as a constant) is added to the
    logits; entries at or below MASK_THRESHOLD are excluded exactly: their
    weight is 0.0 and rows where everything is masked yield all zeros.
    Row normalization uses the exactly-rounded reduction kernel, so the
    result is invariant to permutations of the last axis. Raises
    NumericError on non-finite logits.
    """
    a = astensor(a)
    z = a.data
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite logits")
    if bias is not None:
        bdata = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=a.dtype)
        if bdata.dtype != a.dtype:
            bdata = bdata.astype(a.dtype)
        masked = np.broadcast_to(bdata <= MASK_THRESHOLD, z.shape)
        z = z + bdata
    else:
        masked = None

    if masked is not None:
        z = np.where(masked, -np.inf, z)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0).astype(a.dtype)
    e = np.exp(z - zmax).astype(a.dtype)
    flat = np.ascontiguousarray(e.reshape(-1, e.shape[-1]))
    denom = kernels.exact_rowsum(flat).reshape(e.shape[:-1] + (1,))
    safe = np.where(denom == 0, a.dtype.type(1), denom)
    out_data = (e / safe).astype(a.dtype)

    def backward(g):
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        return ((out_data * (g - inner)).astype(a.dtype),)

    return Tensor._result(out_data, (a,), backward)


def attn_mix(weights, values):
    """weights [B,R,N] @ values [B,N,C] via the exactly-rounded kernel."""
    w, v = _pair(weights, values)
    if w.ndim != 3 or v.ndim != 3:
        raise ContractError("attn_mix expects 3-D operands")
    if w.shape[0] != v.shape[0] or w.shape[2] != v.shape[1]:
        raise ContractError(f"attn_mix shapes disagree: {w.shape} vs {v.shape}")
    wc = np.ascontiguousarray(w.data)
    vc = np.ascontiguousarray(v.data)

    def backward(g):
        return kernels.attn_apply_backward(wc, vc, np.ascontiguousarray(g))

    return Tensor._result(kernels.attn_apply(wc, vc), (w, v), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x = astensor(x)
    gamma = astensor(gamma)
    beta = astensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ContractError("layer_norm affine params must match the last axis")
    d = x.shape[-1]
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    out_data = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        gxhat = g * gamma.data
        m1 = np.mean(gxhat, axis=-1, keepdims=True)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
        gx = (inv * (gxhat - m1 - xhat * m2)).astype(x.dtype)
        axes = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * xhat, axis=axes)
        gbeta = np.sum(g, axis=axes)
        return gx, ggamma, gbeta

    return Tensor._result(out_data, (x, gamma, beta), backward)


def bilinear_sample(feat, points):
    """Sample feat [H,W,C] at points [P,2] (x, y columns), zero padded.

    Differentiable in both the feature map and the coordinates.
    """
    feat = astensor(feat)
    points = astensor(points)
    if feat.ndim != 3:
        raise ContractError("bilinear_sample expects a [H,W,C] feature map")
    if points.ndim != 2 or points.shape[1] != 2:
        raise ContractError("bilinear_sample expects [P,2] points")
    if feat.dtype != points.dtype:
        raise ContractError("feature map and points must share a dtype")
    if not np.all(np.isfinite(points.data)):
        raise NumericError("non-finite sampling coordinates")
    fc = np.ascontiguousarray(feat.data)
    xs = np.ascontiguousarray(points.data[:, 0])
    ys = np.ascontiguousarray(points.data[:, 1])

    def backward(g):
        gfeat, gxs, gys = kernels.bilinear_backward(fc, xs, ys, np.ascontiguousarray(g))
        gpts = np.stack([gxs, gys], axis=1)
        return gfeat, gpts

    return Tensor._result(kernels.bilinear_gather(fc, xs, ys), (feat, points), backward)


def unfold(img, kh, kw, stride, pad):
    """im2col: [H,W,C] to [OH*OW, kh*kw*C] patch rows (kernel-position major)."""
    img = astensor(img)
    if img.ndim != 3:
        raise ContractError("unfold expects a [H,W,C] image")
    h, w, c = img.shape
    ic = np.ascontiguousarray(img.data)

    def backward(g):
        return (kernels.col2im(np.ascontiguousarray(g), h, w, c, kh, kw, stride, pad),)

    return Tensor._result(kernels.im2col(ic, kh, kw, stride, pad), (img,), backward)
