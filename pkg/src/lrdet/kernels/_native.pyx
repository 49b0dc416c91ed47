# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.

Forward kernels replicate kernels.numpy_ref operation for operation so
both backends produce identical results on finite inputs: the same
multiply/add order for bilinear interpolation and unfold/fold, and an
exactly-rounded (order-independent) summation for the two reduction
kernels, ported from the classic shift-and-carry partials algorithm.
Backward kernels match the reference only to floating-point tolerance.

Compiled with -ffp-contract=off so no FMA contraction changes rounding
relative to the numpy reference.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor

BACKEND = "native"

ctypedef fused floating:
    float
    double

DEF MAX_PARTIALS = 64


cdef inline int _exact_add(double* p, int n, double x) except -1:
    # Maintains non-overlapping partial sums; exact for finite doubles.
    cdef int i = 0, j
    cdef double y, hi, yr, lo, t
    for j in range(n):
        y = p[j]
        if fabs(x) < fabs(y):
            t = x
            x = y
            y = t
        hi = x + y
        yr = hi - x
        lo = y - yr
        if lo != 0.0:
            p[i] = lo
            i += 1
        x = hi
    if x != 0.0:
        if i >= MAX_PARTIALS:
            raise OverflowError("exact summation: partials buffer exhausted "
                                "(non-finite input?)")
        p[i] = x
        i += 1
    return i


cdef inline double _exact_round(double* p, int n):
    # Correctly-rounded total of the partials, including the half-even
    # fix-up when the discarded tail straddles a rounding boundary.
    cdef double hi = 0.0, x, y, yr, lo = 0.0
    if n > 0:
        n -= 1
        hi = p[n]
        while n > 0:
            x = hi
            n -= 1
            y = p[n]
            hi = x + y
            yr = hi - x
            lo = y - yr
            if lo != 0.0:
                break
        if n > 0 and ((lo < 0.0 and p[n - 1] < 0.0) or
                      (lo > 0.0 and p[n - 1] > 0.0)):
            y = lo * 2.0
            x = hi + y
            yr = x - hi
            if y == yr:
                hi = x
    return hi


def exact_rowsum(floating[:, ::1] mat):
    cdef Py_ssize_t rows = mat.shape[0], cols = mat.shape[1]
    out_np = np.empty(rows, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] out = out_np
    cdef double partials[MAX_PARTIALS]
    cdef int n
    cdef Py_ssize_t i, j
    for i in range(rows):
        n = 0
        for j in range(cols):
            n = _exact_add(partials, n, <double>mat[i, j])
        out[i] = <floating>_exact_round(partials, n)
    return out_np


def attn_apply(floating[:, :, ::1] wts, floating[:, :, ::1] val):
    cdef Py_ssize_t b = wts.shape[0], r = wts.shape[1], n = wts.shape[2]
    cdef Py_ssize_t c = val.shape[2]
    if val.shape[0] != b or val.shape[1] != n:
        raise ValueError("attn_apply: operand shapes disagree")
    out_np = np.empty((b, r, c), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef double partials[MAX_PARTIALS]
    cdef int cnt
    cdef Py_ssize_t bi, ri, ci, ni
    cdef floating prod
    for bi in range(b):
        for ri in range(r):
            for ci in range(c):
                cnt = 0
                for ni in range(n):
                    # Round the product in the input dtype first, exactly
                    # like the reference, then accumulate exactly.
                    prod = wts[bi, ri, ni] * val[bi, ni, ci]
                    cnt = _exact_add(partials, cnt, <double>prod)
                out[bi, ri, ci] = <floating>_exact_round(partials, cnt)
    return out_np


def bilinear_gather(floating[:, :, ::1] feat, floating[::1] xs, floating[::1] ys):
    cdef Py_ssize_t h = feat.shape[0], w = feat.shape[1], c = feat.shape[2]
    cdef Py_ssize_t p = xs.shape[0]
    if ys.shape[0] != p:
        raise ValueError("bilinear_gather: xs and ys length mismatch")
    out_np = np.empty((p, c), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_np
    cdef Py_ssize_t i, ci, ix0, iy0, ix1, iy1, cx0, cx1, cy0, cy1
    cdef floating x, y, x0f, y0f, fx, fy, one, zero
    cdef floating w00, w01, w10, w11, m00, m01, m10, m11, v00, v01, v10, v11
    one = <floating>1.0
    zero = <floating>0.0
    for i in range(p):
        x = xs[i]
        y = ys[i]
        # Wholly outside the support (or non-finite): every neighbour is
        # invalid, so the sample is zero.
        if not (x > <floating>(-1) and x < <floating>w
                and y > <floating>(-1) and y < <floating>h):
            for ci in range(c):
                out[i, ci] = zero
            continue
        x0f = <floating>floor(<double>x)
        y0f = <floating>floor(<double>y)
        fx = x - x0f
        fy = y - y0f
        ix0 = <Py_ssize_t>x0f
        iy0 = <Py_ssize_t>y0f
        ix1 = ix0 + 1
        iy1 = iy0 + 1
        m00 = one if (ix0 >= 0 and iy0 >= 0) else zero
        m01 = one if (ix1 < w and iy0 >= 0) else zero
        m10 = one if (ix0 >= 0 and iy1 < h) else zero
        m11 = one if (ix1 < w and iy1 < h) else zero
        cx0 = ix0 if ix0 >= 0 else 0
        cy0 = iy0 if iy0 >= 0 else 0
        cx1 = ix1 if ix1 < w else w - 1
        cy1 = iy1 if iy1 < h else h - 1
        w00 = (one - fx) * (one - fy)
        w01 = fx * (one - fy)
        w10 = (one - fx) * fy
        w11 = fx * fy
        for ci in range(c):
            v00 = feat[cy0, cx0, ci] * m00
            v01 = feat[cy0, cx1, ci] * m01
            v10 = feat[cy1, cx0, ci] * m10
            v11 = feat[cy1, cx1, ci] * m11
            out[i, ci] = (w00 * v00 + w01 * v01) + (w10 * v10 + w11 * v11)
    return out_np


def bilinear_backward(floating[:, :, ::1] feat, floating[::1] xs,
                      floating[::1] ys, floating[:, ::1] gout):
    cdef Py_ssize_t h = feat.shape[0], w = feat.shape[1], c = feat.shape[2]
    cdef Py_ssize_t p = xs.shape[0]
    dtype = np.float32 if floating is float else np.float64
    gfeat_np = np.zeros((h, w, c), dtype=dtype)
    gxs_np = np.zeros(p, dtype=dtype)
    gys_np = np.zeros(p, dtype=dtype)
    cdef floating[:, :, ::1] gfeat = gfeat_np
    cdef floating[::1] gxs = gxs_np
    cdef floating[::1] gys = gys_np
    cdef Py_ssize_t i, ci, ix0, iy0, ix1, iy1, cx0, cx1, cy0, cy1
    cdef floating x, y, x0f, y0f, fx, fy, one, zero
    cdef floating m00, m01, m10, m11, v00, v01, v10, v11, gx, gy, g
    one = <floating>1.0
    zero = <floating>0.0
    for i in range(p):
        x = xs[i]
        y = ys[i]
        if not (x > <floating>(-1) and x < <floating>w
                and y > <floating>(-1) and y < <floating>h):
            continue
        x0f = <floating>floor(<double>x)
        y0f = <floating>floor(<double>y)
        fx = x - x0f
        fy = y - y0f
        ix0 = <Py_ssize_t>x0f
        iy0 = <Py_ssize_t>y0f
        ix1 = ix0 + 1
        iy1 = iy0 + 1
        m00 = one if (ix0 >= 0 and iy0 >= 0) else zero
        m01 = one if (ix1 < w and iy0 >= 0) else zero
        m10 = one if (ix0 >= 0 and iy1 < h) else zero
        m11 = one if (ix1 < w and iy1 < h) else zero
        cx0 = ix0 if ix0 >= 0 else 0
        cy0 = iy0 if iy0 >= 0 else 0
        cx1 = ix1 if ix1 < w else w - 1
        cy1 = iy1 if iy1 < h else h - 1
        gx = zero
        gy = zero
        for ci in range(c):
            g = gout[i, ci]
            v00 = feat[cy0, cx0, ci] * m00
            v01 = feat[cy0, cx1, ci] * m01
            v10 = feat[cy1, cx0, ci] * m10
            v11 = feat[cy1, cx1, ci] * m11
            if m00 != zero:
                gfeat[cy0, cx0, ci] += (one - fx) * (one - fy) * g
            if m01 != zero:
                gfeat[cy0, cx1, ci] += fx * (one - fy) * g
            if m10 != zero:
                gfeat[cy1, cx0, ci] += (one - fx) * fy * g
            if m11 != zero:
                gfeat[cy1, cx1, ci] += fx * fy * g
            gx = gx + g * ((one - fy) * (v01 - v00) + fy * (v11 - v10))
            gy = gy + g * ((one - fx) * (v10 - v00) + fx * (v11 - v01))
        gxs[i] = gx
        gys[i] = gy
    return gfeat_np, gxs_np, gys_np


def im2col(floating[:, :, ::1] img, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef Py_ssize_t hp = h + 2 * pad, wp = w + 2 * pad
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    out_np = np.empty((oh * ow, kh * kw * c),
                      dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] cols = out_np
    cdef Py_ssize_t oy, ox, ki, kj, ci, iy, ix, row, base
    cdef floating zero = <floating>0.0
    for oy in range(oh):
        for ox in range(ow):
            row = oy * ow + ox
            for ki in range(kh):
                iy = oy * stride + ki - pad
                for kj in range(kw):
                    ix = ox * stride + kj - pad
                    base = (ki * kw + kj) * c
                    if 0 <= iy < h and 0 <= ix < w:
                        for ci in range(c):
                            cols[row, base + ci] = img[iy, ix, ci]
                    else:
                        for ci in range(c):
                            cols[row, base + ci] = zero
    return out_np


def col2im(floating[:, ::1] cols, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t hp = h + 2 * pad, wp = w + 2 * pad
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    if cols.shape[0] != oh * ow or cols.shape[1] != kh * kw * c:
        raise ValueError("col2im: column matrix shape disagrees with geometry")
    out_np = np.zeros((h, w, c), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t oy, ox, ki, kj, ci, iy, ix, row, base
    # Kernel-position-major accumulation, matching the reference kernel.
    for ki in range(kh):
        for kj in range(kw):
            base = (ki * kw + kj) * c
            for oy in range(oh):
                iy = oy * stride + ki - pad
                if iy < 0 or iy >= h:
                    continue
                for ox in range(ow):
                    ix = ox * stride + kj - pad
                    if ix < 0 or ix >= w:
                        continue
                    row = oy * ow + ox
                    for ci in range(c):
                        out[iy, ix, ci] += cols[row, base + ci]
    return out_np
