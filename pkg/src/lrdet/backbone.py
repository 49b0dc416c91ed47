"""Trainable convolutional pyramid standing in for a real backbone.

Three strided convolutions produce levels at strides 4, 8 and 16 (the
first num_levels are used), each followed by GELU and a per-level
layer norm over channels. Convolutions are realized as unfold + matmul
so they ride the same autodiff ops as everything else.
"""

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError
from .sampler import FeaturePyramid

LEVEL_STRIDES = (4, 8, 16)


class Conv2d(nn.Module):
    """Valid-padding strided convolution on [H,W,C] maps."""

    def __init__(self, cin, cout, kernel, stride, rng, dtype, pad=0):
        self.cin = cin
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.lin = nn.Linear(kernel * kernel * cin, cout, rng, dtype)

    def forward(self, x):
        h, w, c = x.shape
        if c != self.cin:
            raise ContractError(f"conv expected {self.cin} channels, got {c}")
        cols = T.unfold(x, self.kernel, self.kernel, self.stride, self.pad)
        out = self.lin(cols)
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return T.reshape(out, (oh, ow, out.shape[1]))


class BackboneStub(nn.Module):
    def __init__(self, dim, num_levels, rng, dtype):
        if not 1 <= num_levels <= len(LEVEL_STRIDES):
            raise ContractError(
                f"num_levels must be in [1, {len(LEVEL_STRIDES)}], got {num_levels}"
            )
        self.num_levels = num_levels
        self.dim = dim
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        cin = 3
        for i in range(num_levels):
            kernel = 4 if i == 0 else 2
            self.convs.append(Conv2d(cin, dim, kernel, kernel, rng, dtype))
            self.norms.append(nn.LayerNorm(dim, dtype))
            cin = dim

    def forward(self, image):
        h, w, _ = image.shape
        max_stride = LEVEL_STRIDES[self.num_levels - 1]
        if h % max_stride or w % max_stride:
            raise ContractError(
                f"image size {w}x{h} not divisible by max stride {max_stride}"
            )
        levels = []
        x = image
        for conv, norm in zip(self.convs, self.norms):
            x = T.gelu(conv(x))
            levels.append(norm(x))
            x = levels[-1]
        return FeaturePyramid(
            levels=levels,
            strides=tuple(LEVEL_STRIDES[: self.num_levels]),
            image_size=(w, h),
        )
