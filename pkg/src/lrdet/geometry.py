"""Box algebra: parameterizations, overlap measures, delta application.

Boxes are (cx, cy, w, h) in pixels unless a name says otherwise; corner
form (x1, y1, x2, y2) is internal. Plain-array functions operate on
numpy and are not differentiable; the tensor-valued ones at the bottom
participate in the autodiff graph.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError


def cxcywh_to_xyxy(boxes):
    boxes = np.asarray(boxes)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes):
    boxes = np.asarray(boxes)
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(xyxy):
    xyxy = np.asarray(xyxy)
    return (xyxy[..., 2] - xyxy[..., 0]) * (xyxy[..., 3] - xyxy[..., 1])


def _pairwise_intersection(a_xyxy, b_xyxy):
    lt = np.maximum(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = np.minimum(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    return wh[..., 0] * wh[..., 1]


def pairwise_iou(a_xyxy, b_xyxy):
    inter = _pairwise_intersection(a_xyxy, b_xyxy)
    union = box_area(a_xyxy)[:, None] + box_area(b_xyxy)[None, :] - inter
    return inter / union


def pairwise_iof(a_xyxy, b_xyxy):
    """iof[i, j] = area(a_i intersect b_j) / area(a_i).

    Asymmetric: row i is normalized by the foreground box a_i.
    """
    inter = _pairwise_intersection(a_xyxy, b_xyxy)
    return inter / box_area(a_xyxy)[:, None]


def iof_matrix(boxes_cxcywh):
    """Square IoF matrix of a box set against itself; diagonal is 1."""
    xyxy = cxcywh_to_xyxy(boxes_cxcywh)
    return pairwise_iof(xyxy, xyxy)


def pairwise_giou(a_xyxy, b_xyxy):
    inter = _pairwise_intersection(a_xyxy, b_xyxy)
    area_a = box_area(a_xyxy)[:, None]
    area_b = box_area(b_xyxy)[None, :]
    union = area_a + area_b - inter
    iou = inter / union
    lt = np.minimum(a_xyxy[:, None, :2], b_xyxy[None, :, :2])
    rb = np.maximum(a_xyxy[:, None, 2:], b_xyxy[None, :, 2:])
    hull = (rb[..., 0] - lt[..., 0]) * (rb[..., 1] - lt[..., 1])
    return iou - (hull - union) / hull


def giou_single(a_xyxy, b_xyxy):
    a = np.asarray(a_xyxy, dtype=np.float64).reshape(1, 4)
    b = np.asarray(b_xyxy, dtype=np.float64).reshape(1, 4)
    return float(pairwise_giou(a, b)[0, 0])


# -- differentiable pieces --------------------------------------------------


def cxcywh_to_xyxy_t(boxes):
    """Tensor version of the corner-form conversion, [N,4] -> [N,4]."""
    cx = T.narrow(boxes, 1, 0, 1)
    cy = T.narrow(boxes, 1, 1, 1)
    w = T.narrow(boxes, 1, 2, 1)
    h = T.narrow(boxes, 1, 3, 1)
    half_w = w * 0.5
    half_h = h * 0.5
    return T.concat([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=1)


def giou_pairs_t(pred_xyxy, gt_xyxy):
    """Elementwise GIoU of paired boxes, differentiable in pred. [K,4]->[K]."""
    pred_xyxy = T.astensor(pred_xyxy)
    gt = np.asarray(gt_xyxy, dtype=pred_xyxy.dtype)
    if pred_xyxy.shape != gt.shape:
        raise ContractError("giou_pairs_t expects paired boxes of equal shape")
    px1 = T.narrow(pred_xyxy, 1, 0, 1)
    py1 = T.narrow(pred_xyxy, 1, 1, 1)
    px2 = T.narrow(pred_xyxy, 1, 2, 1)
    py2 = T.narrow(pred_xyxy, 1, 3, 1)
    gx1, gy1, gx2, gy2 = (gt[:, i:i + 1] for i in range(4))

    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / union
    hull = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (
        T.maximum(py2, gy2) - T.minimum(py1, gy1)
    )
    giou = iou - (hull - union) / hull
    return T.reshape(giou, (-1,))


def apply_box_delta(boxes, deltas, img_w, img_h):
    """Refine boxes [N,4] cxcywh by deltas (dx, dy, dw, dh).

    cx' = cx + dx*w, w' = w*exp(dw) (same for y/h), then clamp so the box
    stays inside the image with extents in [1, image size]. boxes is a
    plain array treated as a constant; gradients flow through deltas.
    Zero deltas on an in-image box are the identity.
    """
    boxes = np.asarray(boxes)
    deltas = T.astensor(deltas)
    if boxes.shape != deltas.shape or boxes.shape[-1] != 4:
        raise ContractError(
            f"apply_box_delta shape mismatch: {boxes.shape} vs {deltas.shape}"
        )
    prev_cx = boxes[:, 0:1]
    prev_cy = boxes[:, 1:2]
    prev_w = boxes[:, 2:3]
    prev_h = boxes[:, 3:4]
    dx = T.narrow(deltas, 1, 0, 1)
    dy = T.narrow(deltas, 1, 1, 1)
    dw = T.narrow(deltas, 1, 2, 1)
    dh = T.narrow(deltas, 1, 3, 1)

    cx = prev_cx + dx * prev_w
    cy = prev_cy + dy * prev_h
    w = T.clamp(prev_w * T.exp(dw), 1.0, float(img_w))
    h = T.clamp(prev_h * T.exp(dh), 1.0, float(img_h))
    cx = T.minimum(T.maximum(cx, w * 0.5), float(img_w) - w * 0.5)
    cy = T.minimum(T.maximum(cy, h * 0.5), float(img_h) - h * 0.5)
    return T.concat([cx, cy, w, h], axis=1)
