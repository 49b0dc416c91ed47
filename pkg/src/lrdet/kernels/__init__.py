"""Numeric kernel backends.

Two implementations of the hot inner loops exist: a compiled extension
(`lrdet.kernels._native`) and a pure-numpy reference
(`lrdet.kernels.numpy_ref`). Forward kernels are bit-identical across
backends on finite inputs; backward kernels agree to floating-point
tolerance. Selection happens once at import via the LRDET_KERNELS
environment variable:

    auto    use the native extension if it imported, else numpy (default)
    native  require the compiled extension, fail if missing
    numpy   force the pure-numpy reference

`BACKEND` records which one is active.
"""

import os

from ..errors import ContractError
from . import numpy_ref

_choice = os.environ.get("LRDET_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "native", "numpy"):
    raise ContractError(
        f"LRDET_KERNELS must be one of auto/native/numpy, got {_choice!r}"
    )

if _choice in ("auto", "native"):
    try:
        from . import _native
    except ImportError:
        _native = None
    if _choice == "native" and _native is None:
        raise ContractError(
            "LRDET_KERNELS=native but the compiled extension is not available"
        )
else:
    _native = None

if _native is not None:
    BACKEND = "native"
    bilinear_gather = _native.bilinear_gather
    bilinear_backward = _native.bilinear_backward
    im2col = _native.im2col
    col2im = _native.col2im
    exact_rowsum = _native.exact_rowsum
    attn_apply = _native.attn_apply
else:
    BACKEND = "numpy"
    bilinear_gather = numpy_ref.bilinear_gather
    bilinear_backward = numpy_ref.bilinear_backward
    im2col = numpy_ref.im2col
    col2im = numpy_ref.col2im
    exact_rowsum = numpy_ref.exact_rowsum
    attn_apply = numpy_ref.attn_apply

# The adjoint of attn_apply is two plain matmuls; BLAS is the right tool
# on every backend.
attn_apply_backward = numpy_ref.attn_apply_backward
