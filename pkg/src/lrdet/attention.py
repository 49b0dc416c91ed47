"""Self-attention over query content with a box-overlap logit bias.

Each query pair (i, j) gets an additive bias log(iof_ij + sigma) on the
pre-softmax logits, shared across heads, where iof_ij is the overlap of
box j with foreground box i. Pairs whose raw overlap ratio falls below
the stage threshold epsilon are masked out entirely; epsilon = 0 turns
the whole mechanism off (plain attention, bit for bit). The diagonal
ratio is always 1, so no row can become empty under any epsilon <= 1.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError
from .geometry import iof_matrix

MULTI_STAGE_EPSILONS = (0.1, 0.2, 0.4)


def epsilon_schedule(stage_index, num_stages, mode, epsilon=0.0):
    """Per-stage threshold: constant in "single" mode; in "multiple" mode
    the last three stages use 0.1/0.2/0.4 and earlier stages use 0."""
    if not 0 <= stage_index < num_stages:
        raise ContractError(
            f"stage index {stage_index} out of range for {num_stages} stages"
        )
    if mode == "single":
        return float(epsilon)
    if mode == "multiple":
        if num_stages < 3:
            raise ContractError("multiple-epsilon schedule needs at least 3 stages")
        tail = stage_index - (num_stages - 3)
        return MULTI_STAGE_EPSILONS[tail] if tail >= 0 else 0.0
    raise ContractError(f"unknown epsilon mode {mode!r}")


def attention_bias(boxes, epsilon, sigma=1e-7, dtype=np.float32, bias_only=False):
    """Additive logit bias for a box set, or None when epsilon == 0.

    Entries are log(ratio + sigma); entries with ratio < epsilon become
    the mask sentinel unless bias_only is set (ablation hook: bias kept,
    masking disabled).
    """
    if epsilon == 0:
        return None
    if not 0 < epsilon <= 1:
        raise ContractError(f"epsilon must lie in [0, 1], got {epsilon}")
    ratio = iof_matrix(np.asarray(boxes, dtype=np.float64))
    bias = np.log(ratio + sigma)
    if not bias_only:
        bias = np.where(ratio >= epsilon, bias, T.MASK_VALUE)
    return bias.astype(dtype)


@dataclass
class AttentionRecord:
    """Post-softmax weights [heads, N_q, N_q] and the applied bias [N_q, N_q]."""

    weights: np.ndarray
    bias: np.ndarray


class LocalSelfAttention(nn.Module):
    """Multi-head self-attention with the overlap bias, post-norm residual."""

    def __init__(self, dim, num_heads, rng, dtype, sigma=1e-7, bias_only=False):
        if dim % num_heads != 0:
            raise ContractError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.sigma = sigma
        self.bias_only = bias_only
        self.dtype = np.dtype(dtype)
        self.q_proj = nn.Linear(dim, dim, rng, dtype)
        self.k_proj = nn.Linear(dim, dim, rng, dtype)
        self.v_proj = nn.Linear(dim, dim, rng, dtype)
        self.out_proj = nn.Linear(dim, dim, rng, dtype)
        self.norm = nn.LayerNorm(dim, dtype)

    def _split_heads(self, x, n):
        # [N, d] -> [heads, N, head_dim]; head h owns the contiguous
        # channel block [h*head_dim, (h+1)*head_dim).
        return T.transpose(T.reshape(x, (n, self.num_heads, self.head_dim)), (1, 0, 2))

    def forward(self, content, boxes, epsilon):
        n = content.shape[0]
        boxes = np.asarray(boxes)
        if boxes.shape != (n, 4):
            raise ContractError(
                f"box count {boxes.shape} does not match {n} content rows"
            )
        bias = attention_bias(
            boxes, epsilon, sigma=self.sigma, dtype=self.dtype,
            bias_only=self.bias_only,
        )
        q = self._split_heads(self.q_proj(content), n)
        k = self._split_heads(self.k_proj(content), n)
        v = self._split_heads(self.v_proj(content), n)
        # The q.k products go through the exactly-rounded kernel: a correctly
        # rounded dot depends only on its operand values, so permuting queries
        # permutes logits bit-exactly.  A BLAS product can round the same pair
        # differently at different row/column positions.
        logits = T.attn_mix(q, T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        weights = T.softmax_masked(logits, bias)
        mixed = T.attn_mix(weights, v)
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, self.dim))
        out = self.norm(content + self.out_proj(merged))
        record = AttentionRecord(
            weights=weights.data.copy(),
            bias=np.zeros((n, n), dtype=self.dtype) if bias is None else bias.copy(),
        )
        return out, record
