"""COCO-style average precision over the synthetic scenes.

Detections are greedily matched to ground truth in score order at each
IoU threshold; precision-recall curves use 101-point interpolation and
average over classes that have at least one ground truth (empty classes
are excluded rather than counted as 0 or 1). Size buckets mirror the
usual 32^2/96^2 pixel cutoffs, rescaled by canvas area against a 256^2
nominal canvas so the buckets stay meaningful at desk scale; a bucket
with no ground truth reports 0.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import cxcywh_to_xyxy, pairwise_iou

IOU_THRESHOLDS = tuple(np.arange(0.5, 1.0, 0.05).round(2))
NOMINAL_AREA = 256 * 256
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    num_images: int

    def as_rows(self):
        return [
            ("ap", self.ap), ("ap50", self.ap50), ("ap75", self.ap75),
            ("ap_small", self.ap_small), ("ap_medium", self.ap_medium),
            ("ap_large", self.ap_large), ("num_images", self.num_images),
        ]

    def as_csv(self):
        lines = ["metric,value"]
        for name, val in self.as_rows():
            lines.append(f"{name},{val}")
        return "\n".join(lines) + "\n"

    def as_text(self):
        lines = [f"images evaluated: {self.num_images}"]
        for name, val in self.as_rows()[:-1]:
            lines.append(f"{name:>10}: {val:.4f}")
        return "\n".join(lines)


def _interp_ap(scores, is_tp, num_gt):
    """101-point interpolated AP from per-detection TP flags."""
    if num_gt == 0:
        return None
    if len(scores) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~np.asarray(is_tp, dtype=bool))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope: best precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(np.mean(interp))


def _class_ap(dets, gts_by_img, iou_thr):
    """dets: list of (img, score, xyxy); gts_by_img: img -> [M,4] xyxy."""
    num_gt = sum(len(g) for g in gts_by_img.values())
    if num_gt == 0:
        return None
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], dets[i][0], i))
    taken = {img: np.zeros(len(g), dtype=bool) for img, g in gts_by_img.items()}
    scores, flags = [], []
    for i in order:
        img, score, box = dets[i]
        scores.append(score)
        gt = gts_by_img.get(img)
        if gt is None or len(gt) == 0:
            flags.append(False)
            continue
        ious = pairwise_iou(np.asarray([box]), gt)[0]
        ious = np.where(taken[img], -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            taken[img][j] = True
            flags.append(True)
        else:
            flags.append(False)
    return _interp_ap(scores, flags, num_gt)


def _area_filter(boxes_xyxy, area_range):
    if area_range is None:
        return np.ones(len(boxes_xyxy), dtype=bool)
    areas = (boxes_xyxy[:, 2] - boxes_xyxy[:, 0]) * (boxes_xyxy[:, 3] - boxes_xyxy[:, 1])
    lo, hi = area_range
    return (areas >= lo) & (areas < hi)


def evaluate_detections(detections, gt_boxes, gt_labels, num_classes,
                        iou_thresholds=IOU_THRESHOLDS, area_range=None):
    """Mean AP over classes and thresholds.

    detections: per image, (boxes_xyxy [D,4], scores [D], labels [D]).
    gt_boxes/gt_labels: per image, xyxy arrays and label arrays.
    """
    per_thr = []
    for thr in iou_thresholds:
        per_class = []
        for cls in range(num_classes):
            dets = []
            gts_by_img = {}
            for img, (boxes, scores, labels) in enumerate(detections):
                keep = labels == cls
                if area_range is not None and keep.any():
                    keep = keep & _area_filter(boxes, area_range)
                for b, s in zip(boxes[keep], scores[keep]):
                    dets.append((img, float(s), b))
                gmask = gt_labels[img] == cls
                gboxes = gt_boxes[img][gmask]
                if area_range is not None and len(gboxes):
                    gboxes = gboxes[_area_filter(gboxes, area_range)]
                if len(gboxes):
                    gts_by_img[img] = gboxes
            ap = _class_ap(dets, gts_by_img, thr)
            if ap is not None:
                per_class.append(ap)
        per_thr.append(float(np.mean(per_class)) if per_class else 0.0)
    return per_thr


def extract_detections(stage_output, max_detections=100):
    """Flatten (query, class) scores of one stage into ranked detections."""
    logits = stage_output.logits.data
    n, c = logits.shape
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    flat = scores.reshape(-1)
    k = min(max_detections, flat.size)
    top = np.argsort(-flat, kind="stable")[:k]
    qidx = top // c
    labels = top % c
    boxes = cxcywh_to_xyxy(stage_output.boxes[qidx])
    return boxes, flat[top], labels.astype(np.int64)


def quick_ap50(model, scenes, max_detections=100):
    """AP@0.5 only; the cheap metric logged during training."""
    detections = []
    gt_boxes = []
    gt_labels = []
    with T.no_grad():
        for scene in scenes:
            outputs = model(scene.image)
            detections.append(extract_detections(outputs[-1], max_detections))
            gt_boxes.append(cxcywh_to_xyxy(scene.boxes))
            gt_labels.append(scene.labels)
    num_classes = int(max((l.max() for l in gt_labels if len(l)), default=0)) + 1
    return evaluate_detections(
        detections, gt_boxes, gt_labels, num_classes, iou_thresholds=(0.5,)
    )[0]


def evaluate_model(model, scenes, max_detections=100, stage=-1):
    """Run the model on scenes and score the chosen stage (default last)."""
    detections = []
    gt_boxes = []
    gt_labels = []
    with T.no_grad():
        for scene in scenes:
            outputs = model(scene.image)
            detections.append(extract_detections(outputs[stage], max_detections))
            gt_boxes.append(cxcywh_to_xyxy(scene.boxes))
            gt_labels.append(scene.labels)
    canvas_area = scenes[0].image.shape[0] * scenes[0].image.shape[1]
    scale = canvas_area / NOMINAL_AREA
    small, medium = 32 ** 2 * scale, 96 ** 2 * scale
    num_classes = int(max((l.max() for l in gt_labels if len(l)), default=0)) + 1

    def run(thresholds, area_range=None):
        return evaluate_detections(
            detections, gt_boxes, gt_labels, num_classes,
            iou_thresholds=thresholds, area_range=area_range,
        )

    full = run(IOU_THRESHOLDS)
    ap50 = run((0.5,))[0]
    ap75 = run((0.75,))[0]
    buckets = [
        float(np.mean(run(IOU_THRESHOLDS, area_range=rng)))
        for rng in ((0.0, small), (small, medium), (medium, np.inf))
    ]
    return EvalReport(
        ap=float(np.mean(full)), ap50=ap50, ap75=ap75,
        ap_small=buckets[0], ap_medium=buckets[1], ap_large=buckets[2],
        num_images=len(scenes),
    )
