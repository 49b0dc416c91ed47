"""Finite-difference verification of the tape's gradients.

Runs at 64-bit with central differences. The relative error of an
element is |fd - analytic| / max(|fd|, |analytic|, floor); a check
passes when the maximum over all perturbed elements is within
tolerance.
"""

import numpy as np

from .errors import ContractError

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4
ERROR_FLOOR = 1e-4

_NOISE = 0.05


def gradcheck(fn, inputs, eps=DEFAULT_EPS, sample=None, rng=None):
    """Max relative error between analytic and central-difference grads.

    fn: nullary-in-spirit callable taking the input tensors and returning
        a scalar Tensor; re-evaluated many times, so it must be pure.
    inputs: tensors to perturb; each must be float64 with requires_grad.
    sample: if set, check at most this many elements per input (chosen
        with rng), for inputs too large to sweep exhaustively.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise ContractError("gradcheck requires float64 inputs")
        if not x.requires_grad:
            raise ContractError("gradcheck inputs must require grad")

    for x in inputs:
        x.zero_grad()
    out = fn(*inputs)
    if out.size != 1:
        raise ContractError("gradcheck target must be scalar")
    out.backward()
    analytic = [
        x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
        for x in inputs
    ]

    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        if sample is not None and n > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = range(n)
        gflat = ga.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            lo = float(fn(*inputs).data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), ERROR_FLOOR)
            if err > worst:
                worst = err
    return worst


def _tensor(rng, shape, scale=1.0):
    from . import tensor as T

    return T.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _noise_params(module, rng, scale=_NOISE):
    """Shift every parameter off its init so no gradient path is dead.

    Several layers start at exact zero (offsets, regression deltas,
    second mixer generators), which parks boxes on clamp boundaries and
    kills gradients through whole branches; a finite-difference check of
    that point would test nothing."""
    for _, p in module.named_parameters():
        # asarray keeps 0-d parameters (the look-back gate) as arrays;
        # numpy arithmetic on 0-d operands returns scalars.
        p.data = np.asarray(p.data + scale * rng.standard_normal(p.data.shape))


def _params_of(module):
    return [p for _, p in module.named_parameters()]


def run_suite(seed=0, sample=6):
    """Finite-difference sweep over every differentiable piece.

    Returns a list of (name, max relative error) pairs, heaviest checks
    last. Deterministic for a given seed.
    """
    from . import tensor as T
    from .attention import LocalSelfAttention
    from .data import DataConfig, generate_scene
    from .decoder import DetectionModel, ModelConfig, QuerySet, look_back
    from .matching import (
        LossWeights, box_losses, focal_loss, hungarian_match, match_cost,
    )
    from .mixer import FeatureMixer
    from .nn import LayerNorm, Parameter
    from .sampler import AdaptiveSampler, FeaturePyramid

    rng = np.random.default_rng(seed)
    results = []

    def dot(out):
        w = T.Tensor(rng.standard_normal(out.shape))
        return lambda o: T.tsum(o * w)

    a = _tensor(rng, (3, 4))
    b = _tensor(rng, (4, 2))
    red = dot(T.matmul(a, b))
    results.append(("matmul", gradcheck(lambda x, y: red(T.matmul(x, y)), [a, b])))
    results.append((
        "rowwise_matmul",
        gradcheck(lambda x, y: red(T.rowwise_matmul(x, y)), [a, b]),
    ))

    x = _tensor(rng, (4, 5))
    red = dot(x)
    results.append(("gelu", gradcheck(lambda v: red(T.gelu(v)), [x])))

    logits = _tensor(rng, (2, 5, 5))
    bias = rng.standard_normal((5, 5))
    bias[0, 3] = T.MASK_VALUE
    bias[4, 1] = T.MASK_VALUE
    red = dot(logits)
    results.append((
        "softmax_masked",
        gradcheck(lambda v: red(T.softmax_masked(v, bias)), [logits]),
    ))

    ln = LayerNorm(8, np.float64)
    _noise_params(ln, rng)
    x = _tensor(rng, (3, 8))
    red = dot(x)
    results.append((
        "layer_norm",
        gradcheck(lambda *_: red(ln(x)), [x] + _params_of(ln)),
    ))

    feat = _tensor(rng, (5, 6, 3))
    pts = T.Tensor(
        np.stack(
            [rng.uniform(0.2, 4.8, size=7), rng.uniform(0.2, 3.8, size=7)],
            axis=1,
        ) // 1.0 + rng.uniform(0.25, 0.75, size=(7, 2)),
        requires_grad=True,
    )
    red = dot(T.bilinear_sample(feat, pts))
    results.append((
        "bilinear",
        gradcheck(lambda f, p: red(T.bilinear_sample(f, p)), [feat, pts]),
    ))

    attn = LocalSelfAttention(16, 2, rng, np.float64)
    _noise_params(attn, rng)
    boxes = np.stack([
        rng.uniform(16, 48, size=6), rng.uniform(16, 48, size=6),
        rng.uniform(8, 24, size=6), rng.uniform(8, 24, size=6),
    ], axis=1)
    content = _tensor(rng, (6, 16))
    red = dot(content)
    results.append((
        "attention",
        gradcheck(
            lambda *_: red(attn(content, boxes, 0.1)[0]),
            [content] + _params_of(attn),
            sample=sample, rng=rng,
        ),
    ))

    sampler = AdaptiveSampler(16, 2, 4, 2, rng, np.float64)
    _noise_params(sampler, rng, scale=0.01)
    lv0 = _tensor(rng, (8, 8, 16))
    lv1 = _tensor(rng, (4, 4, 16))
    pyramid = FeaturePyramid([lv0, lv1], [4, 8], (32, 32))
    sboxes = np.stack([
        rng.uniform(12, 20, size=3), rng.uniform(12, 20, size=3),
        rng.uniform(6, 12, size=3), rng.uniform(6, 12, size=3),
    ], axis=1)
    scontent = _tensor(rng, (3, 16))
    red = dot(sampler(scontent, sboxes, pyramid).values)
    results.append((
        "sampler",
        gradcheck(
            lambda *_: red(sampler(scontent, sboxes, pyramid).values),
            [scontent, lv0, lv1] + _params_of(sampler),
            sample=sample, rng=rng,
        ),
    ))

    mixer = FeatureMixer(16, 2, 8, rng, np.float64)
    _noise_params(mixer, rng)
    mfeat = _tensor(rng, (3, 2, 8, 8))
    mcontent = _tensor(rng, (3, 16))
    red = dot(mcontent)
    results.append((
        "mixer",
        gradcheck(
            lambda *_: red(mixer(mfeat, mcontent)),
            [mfeat, mcontent] + _params_of(mixer),
            sample=sample, rng=rng,
        ),
    ))

    curr = _tensor(rng, (4, 6))
    prev = _tensor(rng, (4, 6))
    gate = Parameter(np.array(0.3))
    red = dot(curr)
    results.append((
        "look_back",
        gradcheck(lambda *_: red(look_back(curr, prev, gate)),
                  [curr, prev, gate]),
    ))

    cfg = ModelConfig(
        num_stages=2, num_queries=6, dim=16, num_heads=2, num_points=2,
        num_levels=2, num_classes=3, ffn_expansion=2.0,
        mixer_order="channel_point", epsilon_mode="single", epsilon=0.1,
        sigma=1e-7, bias_only=False, look_back=True, local_sampling=True,
    )
    model = DetectionModel(cfg, rng, np.float64)
    _noise_params(model, rng, scale=0.01)
    scene = generate_scene(
        DataConfig(canvas=16, max_objects=2, min_size=4, max_size=10), seed=seed
    )
    weights = LossWeights()

    # The training gradient treats two structures as constants: the boxes
    # handed from one stage to the next (the cascade refines detached
    # boxes) and the Hungarian assignment. Differences must be taken of
    # the same function the tape differentiates, so both are frozen from
    # an unperturbed forward pass; content still flows stage to stage.
    live = model(scene.image)
    decoder = model.decoder
    stage_in_boxes = [decoder.initial_boxes((16, 16))]
    stage_in_boxes += [out.boxes for out in live[:-1]]
    matches = []
    for out in live:
        cost = match_cost(out.logits.data, out.boxes, scene.boxes,
                          scene.labels, weights, (16, 16))
        matches.append(hungarian_match(cost))

    def loss_fn(*_):
        pyramid = model.backbone(T.astensor(scene.image.astype(np.float64)))
        content = decoder.query_embed
        prev = None
        total = None
        for k, stage in enumerate(decoder.stages):
            queries = QuerySet(content=content, boxes=stage_in_boxes[k])
            out = stage(queries, pyramid, prev, decoder.epsilons[k])
            cls = focal_loss(out.logits, matches[k], scene.labels,
                             cfg.num_classes, weights)
            l1, giou = box_losses(out.boxes_t, matches[k], scene.boxes,
                                  (16, 16))
            part = (weights.lambda_cls * cls + weights.lambda_l1 * l1
                    + weights.lambda_giou * giou)
            total = part if total is None else total + part
            content = out.content
            prev = out.content
        return total

    results.append((
        "full_loss",
        gradcheck(loss_fn, _params_of(model), sample=3, rng=rng),
    ))
    return results
