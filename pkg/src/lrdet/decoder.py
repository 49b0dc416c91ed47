"""Cascaded decoder: M refinement stages over decoupled queries.

Each stage runs look-back (content + C*previous content, C a per-stage
scalar starting at 0), biased self-attention, adaptive sampling, the
feature mixer, a position-wise FFN, then a classification linear and a
two-layer box-delta head. Boxes entering a stage are constants (the
tape is cut between stages); each stage's own deltas stay
differentiable. All stage outputs are kept so training can supervise
every stage; inference reads the last.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .attention import LocalSelfAttention, epsilon_schedule
from .backbone import BackboneStub
from .errors import ContractError
from .geometry import apply_box_delta
from .mixer import FeatureMixer
from .sampler import AdaptiveSampler

# Classification bias prior: start every class probability near 0.01 so
# the focal loss is not swamped by easy negatives in early steps.
CLS_PRIOR = 0.01
CLS_BIAS_INIT = -float(np.log((1.0 - CLS_PRIOR) / CLS_PRIOR))


@dataclass
class ModelConfig:
    num_stages: int
    num_queries: int
    dim: int
    num_heads: int
    num_points: int
    num_levels: int
    num_classes: int
    ffn_expansion: float = 4.0
    mixer_order: str = "channel_point"
    epsilon_mode: str = "single"
    epsilon: float = 0.1
    sigma: float = 1e-7
    bias_only: bool = False
    look_back: bool = True
    local_sampling: bool = True

    def stage_epsilons(self):
        return [
            epsilon_schedule(k, self.num_stages, self.epsilon_mode, self.epsilon)
            for k in range(self.num_stages)
        ]


@dataclass
class QuerySet:
    content: object  # Tensor [N_q, d]
    boxes: np.ndarray  # [N_q, 4] cxcywh pixels


@dataclass
class StageOutput:
    content: object  # Tensor [N_q, d], post-FFN
    boxes: np.ndarray  # refined boxes, detached
    boxes_t: object  # same boxes as a Tensor on the tape
    logits: object  # Tensor [N_q, num_classes]
    attention: object  # AttentionRecord
    points: np.ndarray  # [N_q, N_h, L*N_s, 2]
    epsilon: float


def init_queries(rng, num_queries, dim, image_size, dtype):
    """Full-image boxes and standard-normal content rows."""
    img_w, img_h = image_size
    boxes = np.tile(
        np.array([img_w / 2, img_h / 2, img_w, img_h], dtype=dtype),
        (num_queries, 1),
    )
    content = T.Tensor(rng.standard_normal((num_queries, dim)).astype(dtype))
    return QuerySet(content=content, boxes=boxes)


def look_back(curr, prev, gate):
    """curr + C*prev with a learnable scalar gate."""
    if curr.shape != prev.shape:
        raise ContractError(
            f"look-back shapes disagree: {curr.shape} vs {prev.shape}"
        )
    return curr + gate * prev


class DecoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, dtype, with_gate):
        d = cfg.dim
        self.attn = LocalSelfAttention(
            d, cfg.num_heads, rng, dtype, sigma=cfg.sigma, bias_only=cfg.bias_only
        )
        self.sampler = AdaptiveSampler(
            d, cfg.num_heads, cfg.num_points, cfg.num_levels, rng, dtype
        )
        self.mixer = FeatureMixer(
            d, cfg.num_heads, cfg.num_levels * cfg.num_points, rng, dtype,
            order=cfg.mixer_order,
        )
        hidden = int(round(d * cfg.ffn_expansion))
        self.ffn_in = nn.Linear(d, hidden, rng, dtype)
        self.ffn_out = nn.Linear(hidden, d, rng, dtype)
        self.ffn_norm = nn.LayerNorm(d, dtype)
        self.cls_head = nn.Linear(d, cfg.num_classes, rng, dtype,
                                  bias=CLS_BIAS_INIT)
        self.reg_hidden = nn.Linear(d, d, rng, dtype)
        # Zero deltas at init: the stage starts as a no-op on boxes.
        self.reg_out = nn.Linear(d, 4, rng, dtype, weight="zero", bias=0.0)
        self.gate = nn.Parameter(np.zeros((), dtype=dtype)) if with_gate else None

    def forward(self, queries, pyramid, prev_content, epsilon,
                local_sampling=True, use_look_back=True):
        content = queries.content
        if prev_content is not None and use_look_back and self.gate is not None:
            content = look_back(content, prev_content, self.gate)
        content, record = self.attn(content, queries.boxes, epsilon)
        sampled = self.sampler(
            content, queries.boxes, pyramid, refine=local_sampling
        )
        content = self.mixer(sampled.values, content)
        content = self.ffn_norm(
            content + self.ffn_out(T.gelu(self.ffn_in(content)))
        )
        logits = self.cls_head(content)
        deltas = self.reg_out(T.gelu(self.reg_hidden(content)))
        img_w, img_h = pyramid.image_size
        boxes_t = apply_box_delta(queries.boxes, deltas, img_w, img_h)
        return StageOutput(
            content=content,
            boxes=boxes_t.data.copy(),
            boxes_t=boxes_t,
            logits=logits,
            attention=record,
            points=sampled.points,
            epsilon=epsilon,
        )


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        if cfg.num_stages < 1:
            raise ContractError("decoder needs at least one stage")
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.query_embed = nn.Parameter(
            rng.standard_normal((cfg.num_queries, cfg.dim)).astype(dtype)
        )
        self.stages = nn.ModuleList(
            DecoderStage(cfg, rng, dtype, with_gate=k > 0)
            for k in range(cfg.num_stages)
        )
        self.epsilons = cfg.stage_epsilons()

    def initial_boxes(self, image_size):
        img_w, img_h = image_size
        return np.tile(
            np.array([img_w / 2, img_h / 2, img_w, img_h], dtype=self.dtype),
            (self.cfg.num_queries, 1),
        )

    def forward(self, pyramid, content=None, boxes=None):
        if content is None:
            content = self.query_embed
        if boxes is None:
            boxes = self.initial_boxes(pyramid.image_size)
        queries = QuerySet(content=content, boxes=np.asarray(boxes))
        outputs = []
        prev_content = None
        for stage, eps in zip(self.stages, self.epsilons):
            out = stage(
                queries, pyramid, prev_content, eps,
                local_sampling=self.cfg.local_sampling,
                use_look_back=self.cfg.look_back,
            )
            outputs.append(out)
            prev_content = out.content
            queries = QuerySet(content=out.content, boxes=out.boxes)
        return outputs


class DetectionModel(nn.Module):
    """Backbone stub plus decoder; the full trainable system."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.backbone = BackboneStub(cfg.dim, cfg.num_levels, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)

    def forward(self, image):
        img = T.astensor(np.asarray(image, dtype=self.dtype))
        pyramid = self.backbone(img)
        return self.decoder(pyramid)
