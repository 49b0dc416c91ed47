"""Per-query dynamic mixing of sampled features.

For every query and head, the content vector generates dense mixing
matrices applied along the channel axis and then the point axis (order
configurable), each as a two-layer map with GELU in between. The mixed
features flatten through a static linear back to model width, residual
added to the content and layer-normalized.

Only that static output projection starts at zero. A fresh model's
mixer output is then exactly zero and the residual path dominates,
but its gradient (proportional to the mixed features) is not, so the
branch starts learning immediately. Zeroing the generated matrices
themselves instead would be a trap: with gelu(0) = 0 every gradient
into the generators vanishes and the branch can never leave zero.
"""

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError

MIX_ORDERS = ("channel_point", "point_channel")


def channel_mix_apply(feat, m1, m2, use_gelu=True):
    """feat [N,H,P,C] mixed along channels: gelu(feat @ m1) @ m2."""
    hidden = T.matmul(feat, m1)
    if use_gelu:
        hidden = T.gelu(hidden)
    return T.matmul(hidden, m2)


def point_mix_apply(feat, m1, m2, use_gelu=True):
    """feat [N,H,P,C] mixed along points: channels treated independently."""
    flipped = T.transpose(feat, (0, 1, 3, 2))
    hidden = T.matmul(flipped, m1)
    if use_gelu:
        hidden = T.gelu(hidden)
    return T.transpose(T.matmul(hidden, m2), (0, 1, 3, 2))


class FeatureMixer(nn.Module):
    def __init__(self, dim, num_heads, num_mix_points, rng, dtype,
                 order="channel_point"):
        if order not in MIX_ORDERS:
            raise ContractError(f"mixer order must be one of {MIX_ORDERS}")
        if dim % num_heads != 0:
            raise ContractError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.num_mix_points = num_mix_points
        self.order = order
        c, p = self.head_dim, num_mix_points
        self.gen_channel_1 = nn.Linear(dim, num_heads * c * c, rng, dtype)
        self.gen_channel_2 = nn.Linear(dim, num_heads * c * c, rng, dtype)
        self.gen_point_1 = nn.Linear(dim, num_heads * p * p, rng, dtype)
        self.gen_point_2 = nn.Linear(dim, num_heads * p * p, rng, dtype)
        self.out = nn.Linear(num_heads * p * c, dim, rng, dtype, weight="zero")
        self.norm = nn.LayerNorm(dim, dtype)

    def _channel_mats(self, content, n):
        c = self.head_dim
        shape = (n, self.num_heads, c, c)
        return (
            T.reshape(self.gen_channel_1(content), shape),
            T.reshape(self.gen_channel_2(content), shape),
        )

    def _point_mats(self, content, n):
        p = self.num_mix_points
        shape = (n, self.num_heads, p, p)
        return (
            T.reshape(self.gen_point_1(content), shape),
            T.reshape(self.gen_point_2(content), shape),
        )

    def forward(self, feat, content):
        n, h, p, c = feat.shape
        if (h, p, c) != (self.num_heads, self.num_mix_points, self.head_dim):
            raise ContractError(
                f"mixer got features {feat.shape}, expected "
                f"[N, {self.num_heads}, {self.num_mix_points}, {self.head_dim}]"
            )
        if content.shape != (n, self.dim):
            raise ContractError("mixer content shape disagrees with features")
        cm1, cm2 = self._channel_mats(content, n)
        pm1, pm2 = self._point_mats(content, n)
        if self.order == "channel_point":
            mixed = channel_mix_apply(feat, cm1, cm2)
            mixed = point_mix_apply(mixed, pm1, pm2)
        else:
            mixed = point_mix_apply(feat, pm1, pm2)
            mixed = channel_mix_apply(mixed, cm1, cm2)
        flat = T.reshape(mixed, (n, self.num_heads * p * c))
        return self.norm(content + self.out(flat))
