"""Set prediction loss: optimal bipartite matching, then focal + box terms.

Predictions are matched one-to-one to ground truths by minimum total
cost (focal-style class cost + L1 on image-normalized boxes + GIoU
complement, sharing the loss lambdas). Matched predictions receive all
three losses; unmatched ones are supervised toward all-zero class
probabilities only. Every stage is matched and scored independently and
the per-stage totals add up (deep supervision).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .geometry import cxcywh_to_xyxy, cxcywh_to_xyxy_t, giou_pairs_t, pairwise_giou

_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class MatchResult:
    pairs: list  # [(prediction index, gt index)], sorted by prediction index
    unmatched: list  # prediction indices without a gt

    @property
    def pred_indices(self):
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self):
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def _solve_rectangular(cost):
    """Jonker-Volgenant shortest augmenting paths; needs rows <= cols.

    Returns col4row: for each row, its assigned column. Ties prefer the
    smallest column index.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    assigned_row = np.full(m + 1, n, dtype=np.int64)  # virtual row n = free
    way = np.zeros(m + 1, dtype=np.int64)
    big = np.inf
    for i in range(n):
        assigned_row[m] = i
        j0 = m
        minv = np.full(m + 1, big)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned_row[j0]
            delta = big
            j1 = -1
            row = cost[i0]
            for j in range(m):
                if used[j]:
                    continue
                cur = row[j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[assigned_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if assigned_row[j0] == n:
                break
        while j0 != m:
            j1 = way[j0]
            assigned_row[j0] = assigned_row[j1]
            j0 = j1
    col4row = np.full(n, -1, dtype=np.int64)
    for j in range(m):
        if assigned_row[j] != n:
            col4row[assigned_row[j]] = j
    return col4row


def hungarian_match(cost):
    """Minimum-cost assignment of predictions (rows) to gts (columns)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError("cost matrix must be 2-D")
    n, m = cost.shape
    if m == 0 or n == 0:
        return MatchResult(pairs=[], unmatched=list(range(n)))
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    if n >= m:
        row4col = _solve_rectangular(np.ascontiguousarray(cost.T))
        pairs = sorted((int(r), int(c)) for c, r in enumerate(row4col))
    else:
        col4row = _solve_rectangular(cost)
        pairs = sorted((int(r), int(c)) for r, c in enumerate(col4row))
    matched = {p for p, _ in pairs}
    unmatched = [i for i in range(n) if i not in matched]
    return MatchResult(pairs=pairs, unmatched=unmatched)


def _sigmoid(x):
    return np.where(
        x >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    )


def match_cost(logits, pred_boxes, gt_boxes, gt_labels, weights, image_size):
    """[N_q x num_gt] matching cost; plain arrays, no gradients."""
    logits = np.asarray(logits, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    num_gt = gt_boxes.shape[0]
    if num_gt == 0:
        return np.zeros((logits.shape[0], 0))
    p = _sigmoid(logits)
    a, g = weights.focal_alpha, weights.focal_gamma
    pos = a * (1.0 - p) ** g * -np.log(p + _EPS)
    neg = (1.0 - a) * p ** g * -np.log(1.0 - p + _EPS)
    cost_cls = pos[:, gt_labels] - neg[:, gt_labels]

    img_w, img_h = image_size
    norm = np.array([img_w, img_h, img_w, img_h], dtype=np.float64)
    diff = np.abs(pred_boxes[:, None, :] / norm - gt_boxes[None, :, :] / norm)
    cost_l1 = diff.sum(axis=2)

    giou = pairwise_giou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
    return (
        weights.lambda_cls * cost_cls
        + weights.lambda_l1 * cost_l1
        + weights.lambda_giou * (1.0 - giou)
    )


def focal_loss(logits, match, gt_labels, num_classes, weights):
    """Sigmoid focal loss over every (query, class) cell.

    Matched queries target one-hot rows, everything else zero; the sum is
    normalized by the number of matched pairs (floored at 1).
    """
    n = logits.shape[0]
    targets = np.zeros((n, num_classes), dtype=logits.dtype)
    for pi, gi in match.pairs:
        targets[pi, int(gt_labels[gi])] = 1.0
    a, g = weights.focal_alpha, weights.focal_gamma
    x = logits
    p = T.sigmoid(x)
    # Numerically stable BCE with logits.
    bce = T.relu(x) - x * targets + T.softplus(-T.absolute(x))
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = a * targets + (1.0 - a) * (1.0 - targets)
    loss = alpha_t * T.power(1.0 - p_t, g) * bce
    denom = max(1, len(match.pairs))
    return T.tsum(loss) * (1.0 / denom)


def box_losses(pred_boxes_t, match, gt_boxes, image_size):
    """(L1, GIoU-complement) means over matched pairs; zeros when empty."""
    if not match.pairs:
        zero = T.Tensor(np.zeros((), dtype=pred_boxes_t.dtype))
        return zero, zero
    img_w, img_h = image_size
    matched = T.index_rows(pred_boxes_t, match.pred_indices)
    gts = np.asarray(gt_boxes, dtype=pred_boxes_t.dtype)[match.gt_indices]
    norm = np.array([img_w, img_h, img_w, img_h], dtype=pred_boxes_t.dtype)
    diff = T.absolute(matched * (1.0 / norm) - gts / norm)
    l1 = T.tsum(diff) * (1.0 / len(match.pairs))
    giou = giou_pairs_t(cxcywh_to_xyxy_t(matched), cxcywh_to_xyxy(gts))
    giou_loss = T.tmean(1.0 - giou)
    return l1, giou_loss


def stage_loss(output, gt_boxes, gt_labels, weights, image_size):
    """Match one stage's predictions and return (loss, parts dict)."""
    with T.no_grad():
        cost = match_cost(
            output.logits.data, output.boxes, gt_boxes, gt_labels,
            weights, image_size,
        )
    match = hungarian_match(cost)
    num_classes = output.logits.shape[1]
    cls = focal_loss(output.logits, match, gt_labels, num_classes, weights)
    l1, giou = box_losses(output.boxes_t, match, gt_boxes, image_size)
    total = (
        weights.lambda_cls * cls
        + weights.lambda_l1 * l1
        + weights.lambda_giou * giou
    )
    parts = {
        "cls": float(cls.data),
        "l1": float(l1.data),
        "giou": float(giou.data),
        "total": float(total.data),
    }
    return total, parts


def total_loss(stage_outputs, gt_boxes, gt_labels, weights, image_size):
    """Deep supervision: independent matching per stage, totals added."""
    if not stage_outputs:
        raise ContractError("total_loss needs at least one stage output")
    total = None
    breakdown = []
    for output in stage_outputs:
        loss, parts = stage_loss(output, gt_boxes, gt_labels, weights, image_size)
        total = loss if total is None else total + loss
        breakdown.append(parts)
    return total, breakdown
