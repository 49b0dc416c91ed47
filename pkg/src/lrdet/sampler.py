"""Adaptive sampling: query-conditioned points read off a feature pyramid.

Each query turns its content vector into N_h*N_s box-relative offsets
(center + offset*extent), optionally refines them with unscaled pixel
offsets from a second layer, then samples the same image-space point at
every pyramid level with bilinear interpolation. Head h reads only its
channel block. Per-level weights come from the box area alone, softmaxed
over levels for every (head, point) pair, and scale the sampled vectors.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError


@dataclass
class FeaturePyramid:
    """L feature maps [H_l, W_l, d] with pixel strides and the image size."""

    levels: list
    strides: tuple
    image_size: tuple  # (width, height) in pixels

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ContractError("pyramid levels and strides disagree in length")
        dims = {lvl.shape[2] for lvl in self.levels}
        if len(dims) > 1:
            raise ContractError(f"pyramid channel dims differ across levels: {dims}")


@dataclass
class SampledFeatures:
    values: object  # Tensor [N_q, N_h, L*N_s, d/N_h], weight-scaled
    points: np.ndarray  # [N_q, N_h, L*N_s, 2] image pixels (level-major)
    weights: object  # Tensor [N_q, L, N_h*N_s]


class AdaptiveSampler(nn.Module):
    def __init__(self, dim, num_heads, num_points, num_levels, rng, dtype):
        if dim % num_heads != 0:
            raise ContractError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.num_points = num_points
        self.num_levels = num_levels
        self.head_dim = dim // num_heads
        # Zero weights + uniform biases: initial points spread evenly
        # inside the box, independent of content.
        self.offset = nn.Linear(
            dim, num_heads * num_points * 2, rng, dtype,
            weight="zero", bias=("uniform", -0.5, 0.5),
        )
        # Zero everything: refinement starts as the identity.
        self.refine = nn.Linear(
            dim, num_heads * num_points * 2, rng, dtype, weight="zero", bias=0.0,
        )
        # Zero init gives the uniform 1/L level weighting at the start.
        self.level_weight = nn.Linear(
            1, num_levels * num_heads * num_points, rng, dtype,
            weight="zero", bias=0.0,
        )

    def generate_points(self, content, boxes, refine=True):
        """Sampling points [N_q, N_h, N_s, 2] in image pixels."""
        n = content.shape[0]
        offsets = T.reshape(
            self.offset(content), (n, self.num_heads, self.num_points, 2)
        )
        centers = boxes[:, None, None, 0:2]
        extents = boxes[:, None, None, 2:4]
        points = centers + offsets * extents
        if refine:
            alphas = T.reshape(
                self.refine(content), (n, self.num_heads, self.num_points, 2)
            )
            points = points + alphas
        return points

    def level_weights(self, boxes, image_size, dtype):
        """Softmax-over-levels weights [N_q, L, N_h*N_s] from box areas."""
        img_w, img_h = image_size
        area = (boxes[:, 2] * boxes[:, 3]) / float(img_w * img_h)
        s = T.Tensor(area[:, None].astype(dtype))
        logits = self.level_weight(s)
        n = boxes.shape[0]
        per_point = T.transpose(
            T.reshape(logits, (n, self.num_levels, self.num_heads * self.num_points)),
            (0, 2, 1),
        )
        normed = T.softmax_masked(per_point)  # over the level axis
        return T.transpose(normed, (0, 2, 1))

    def forward(self, content, boxes, pyramid, refine=True):
        if len(pyramid.levels) != self.num_levels:
            raise ContractError(
                f"pyramid has {len(pyramid.levels)} levels, expected {self.num_levels}"
            )
        boxes = np.asarray(boxes)
        n = content.shape[0]
        points = self.generate_points(content, boxes, refine=refine)
        weights = self.level_weights(boxes, pyramid.image_size, content.dtype)

        head_stacks = []
        for h in range(self.num_heads):
            pts_h = T.reshape(
                T.narrow(points, 1, h, 1), (n * self.num_points, 2)
            )
            w_h = T.narrow(weights, 2, h * self.num_points, self.num_points)
            per_level = []
            for l, (level, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
                feat_h = T.narrow(level, 2, h * self.head_dim, self.head_dim)
                sampled = T.bilinear_sample(feat_h, pts_h * (1.0 / stride))
                w_lh = T.reshape(T.narrow(w_h, 1, l, 1), (n * self.num_points, 1))
                per_level.append(
                    T.reshape(
                        sampled * w_lh, (n, 1, self.num_points, self.head_dim)
                    )
                )
            head_stacks.append(T.concat(per_level, axis=2))
        values = T.concat(head_stacks, axis=1)

        points_np = np.tile(points.data[:, :, None, :, :], (1, 1, self.num_levels, 1, 1))
        points_np = points_np.reshape(
            n, self.num_heads, self.num_levels * self.num_points, 2
        )
        return SampledFeatures(values=values, points=points_np, weights=weights)
