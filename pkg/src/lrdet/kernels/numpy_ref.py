"""Pure-numpy reference kernels.

These are the fallback implementations selected when the compiled
extension is unavailable. Forward kernels (`bilinear_gather`, `im2col`,
`col2im`, `exact_rowsum`, `attn_apply`) are bit-identical to the native
versions: identical operation order, and the two reduction kernels use
exactly-rounded summation, which makes their results independent of the
order of the addends. Backward kernels agree with the native ones to
floating-point tolerance only.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "numpy"


def bilinear_gather(feat, xs, ys):
    """Sample feat [H,W,C] at continuous (xs, ys); out-of-bounds reads zero.

    Integer coordinates return exact grid values. Returns [P,C].
    """
    h, w, _ = feat.shape
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = xs - x0f
    fy = ys - y0f
    ix0 = x0f.astype(np.int64)
    iy0 = y0f.astype(np.int64)
    ix1 = ix0 + 1
    iy1 = iy0 + 1

    vx0 = (ix0 >= 0) & (ix0 < w)
    vx1 = (ix1 >= 0) & (ix1 < w)
    vy0 = (iy0 >= 0) & (iy0 < h)
    vy1 = (iy1 >= 0) & (iy1 < h)

    cx0 = np.clip(ix0, 0, w - 1)
    cx1 = np.clip(ix1, 0, w - 1)
    cy0 = np.clip(iy0, 0, h - 1)
    cy1 = np.clip(iy1, 0, h - 1)

    one = feat.dtype.type(1)
    v00 = feat[cy0, cx0] * (vy0 & vx0)[:, None].astype(feat.dtype)
    v01 = feat[cy0, cx1] * (vy0 & vx1)[:, None].astype(feat.dtype)
    v10 = feat[cy1, cx0] * (vy1 & vx0)[:, None].astype(feat.dtype)
    v11 = feat[cy1, cx1] * (vy1 & vx1)[:, None].astype(feat.dtype)

    w00 = (one - fx) * (one - fy)
    w01 = fx * (one - fy)
    w10 = (one - fx) * fy
    w11 = fx * fy
    out = (w00[:, None] * v00 + w01[:, None] * v01) + (
        w10[:, None] * v10 + w11[:, None] * v11
    )
    return np.ascontiguousarray(out)


def bilinear_backward(feat, xs, ys, gout):
    """Gradients of bilinear_gather: returns (gfeat, gxs, gys)."""
    h, w, _ = feat.shape
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = xs - x0f
    fy = ys - y0f
    ix0 = x0f.astype(np.int64)
    iy0 = y0f.astype(np.int64)
    ix1 = ix0 + 1
    iy1 = iy0 + 1

    vx0 = (ix0 >= 0) & (ix0 < w)
    vx1 = (ix1 >= 0) & (ix1 < w)
    vy0 = (iy0 >= 0) & (iy0 < h)
    vy1 = (iy1 >= 0) & (iy1 < h)

    cx0 = np.clip(ix0, 0, w - 1)
    cx1 = np.clip(ix1, 0, w - 1)
    cy0 = np.clip(iy0, 0, h - 1)
    cy1 = np.clip(iy1, 0, h - 1)

    m00 = (vy0 & vx0).astype(feat.dtype)[:, None]
    m01 = (vy0 & vx1).astype(feat.dtype)[:, None]
    m10 = (vy1 & vx0).astype(feat.dtype)[:, None]
    m11 = (vy1 & vx1).astype(feat.dtype)[:, None]

    v00 = feat[cy0, cx0] * m00
    v01 = feat[cy0, cx1] * m01
    v10 = feat[cy1, cx0] * m10
    v11 = feat[cy1, cx1] * m11

    one = feat.dtype.type(1)
    gfeat = np.zeros_like(feat)
    np.add.at(gfeat, (cy0, cx0), ((one - fx) * (one - fy))[:, None] * gout * m00)
    np.add.at(gfeat, (cy0, cx1), (fx * (one - fy))[:, None] * gout * m01)
    np.add.at(gfeat, (cy1, cx0), ((one - fx) * fy)[:, None] * gout * m10)
    np.add.at(gfeat, (cy1, cx1), (fx * fy)[:, None] * gout * m11)

    dx = (one - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
    dy = (one - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
    gxs = np.sum(gout * dx, axis=1)
    gys = np.sum(gout * dy, axis=1)
    return gfeat, gxs, gys


def im2col(img, kh, kw, stride, pad):
    """Unfold img [H,W,C] into rows [OH*OW, kh*kw*C], kernel-position major."""
    if pad:
        img = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(img, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]
    oh, ow = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kh * kw * img.shape[2])
    return np.ascontiguousarray(cols)


def col2im(cols, h, w, c, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add rows back onto an [H,W,C] image.

    Accumulation order is kernel-position major, matching the native
    kernel bit for bit.
    """
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((hp, wp, c), dtype=cols.dtype)
    cols6 = cols.reshape(oh, ow, kh, kw, c)
    for ki in range(kh):
        for kj in range(kw):
            out[ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += (
                cols6[:, :, ki, kj]
            )
    if pad:
        out = out[pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def exact_rowsum(mat):
    """Exactly-rounded row sums of a 2-D array.

    The result is the true sum correctly rounded, hence independent of
    element order within each row.
    """
    out = np.empty(mat.shape[0], dtype=mat.dtype)
    for i in range(mat.shape[0]):
        out[i] = math.fsum(mat[i])
    return out


def attn_apply(wts, val):
    """Batched product wts [B,R,N] @ val [B,N,C] with exactly-rounded sums.

    Products are rounded in the input dtype first, then summed exactly,
    so the result is invariant under any permutation of the N axis that
    is applied consistently to both operands.
    """
    b, r, n = wts.shape
    c = val.shape[2]
    out = np.empty((b, r, c), dtype=wts.dtype)
    for bi in range(b):
        vb = val[bi]
        for ri in range(r):
            prods = wts[bi, ri][:, None] * vb
            for ci in range(c):
                out[bi, ri, ci] = math.fsum(prods[:, ci])
    return out


def attn_apply_backward(wts, val, gout):
    """Gradients of attn_apply: returns (gwts, gval)."""
    gwts = np.matmul(gout, val.transpose(0, 2, 1))
    gval = np.matmul(wts.transpose(0, 2, 1), gout)
    return np.ascontiguousarray(gwts), np.ascontiguousarray(gval)
