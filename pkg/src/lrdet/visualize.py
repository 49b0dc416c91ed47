"""Per-stage inspection artifacts for a single scene.

Writes one tensor dump holding each stage's attention weights and bias,
refined sampling points, and predicted boxes/scores, plus a plain-text
SVG overlay per stage (no raster dependencies).
"""

import os

import numpy as np

from .geometry import cxcywh_to_xyxy
from .serialization import atomic_write_text, save_tensors

_PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0")
_DISPLAY = 512


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def render_overlay(image_size, gt_boxes, gt_labels, pred_boxes, pred_scores,
                   pred_labels, points=None, max_boxes=20):
    """SVG text: ground truth dashed, predictions solid, points as dots."""
    img_w, img_h = image_size
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_DISPLAY}" '
        f'height="{_DISPLAY}" viewBox="0 0 {img_w} {img_h}">',
        f'<rect x="0" y="0" width="{img_w}" height="{img_h}" fill="#1a1a1a"/>',
    ]
    for box, label in zip(cxcywh_to_xyxy(np.asarray(gt_boxes)), gt_labels):
        color = _PALETTE[int(label) % len(_PALETTE)]
        x1, y1, x2, y2 = (float(v) for v in box)
        parts.append(
            f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" '
            f'height="{y2 - y1:.2f}" fill="none" stroke="{color}" '
            f'stroke-width="0.6" stroke-dasharray="2,1"/>'
        )
    order = np.argsort(-np.asarray(pred_scores), kind="stable")[:max_boxes]
    xyxy = cxcywh_to_xyxy(np.asarray(pred_boxes))
    for i in order:
        score = float(pred_scores[i])
        color = _PALETTE[int(pred_labels[i]) % len(_PALETTE)]
        x1, y1, x2, y2 = (float(v) for v in xyxy[i])
        opacity = max(0.15, min(1.0, score))
        parts.append(
            f'<rect x="{x1:.2f}" y="{y1:.2f}" width="{x2 - x1:.2f}" '
            f'height="{y2 - y1:.2f}" fill="none" stroke="{color}" '
            f'stroke-width="0.4" stroke-opacity="{opacity:.3f}"/>'
        )
        parts.append(
            f'<text x="{x1 + 0.5:.2f}" y="{y1 + 2.5:.2f}" font-size="2.5" '
            f'fill="{color}">{int(pred_labels[i])}:{score:.2f}</text>'
        )
    if points is not None:
        for x, y in np.asarray(points).reshape(-1, 2):
            parts.append(
                f'<circle cx="{float(x):.2f}" cy="{float(y):.2f}" r="0.35" '
                f'fill="#ffe119" fill-opacity="0.8"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def visualize_scene(model, scene, out_dir, max_boxes=20):
    """Run one forward pass and write dumps + per-stage overlays."""
    os.makedirs(out_dir, exist_ok=True)
    outputs = model(scene.image)
    img_h, img_w = scene.image.shape[:2]
    tensors = {}
    for k, out in enumerate(outputs):
        scores = _sigmoid(out.logits.data.astype(np.float64))
        best_cls = np.argmax(scores, axis=1)
        best_score = scores[np.arange(scores.shape[0]), best_cls]
        tensors[f"stage{k}.attention.weights"] = out.attention.weights
        tensors[f"stage{k}.attention.bias"] = out.attention.bias
        tensors[f"stage{k}.sampler.points"] = out.points
        tensors[f"stage{k}.boxes"] = out.boxes
        tensors[f"stage{k}.scores"] = scores
        top_query = int(np.argmax(best_score))
        svg = render_overlay(
            (img_w, img_h), scene.boxes, scene.labels,
            out.boxes, best_score, best_cls,
            points=out.points[top_query], max_boxes=max_boxes,
        )
        atomic_write_text(os.path.join(out_dir, f"stage{k}.svg"), svg)
    dump_path = os.path.join(out_dir, "dumps.lrt")
    save_tensors(
        dump_path,
        tensors,
        meta={"kind": "visualization", "scene_seed": int(scene.seed),
              "num_stages": len(outputs)},
    )
    return dump_path
