"""Synthetic scenes, backbone pyramid shapes, AP scoring oracles."""

import numpy as np
import pytest

from lrdet import tensor as T
from lrdet.backbone import BackboneStub
from lrdet.data import (
    CROWDED_IOF,
    DataConfig,
    Scene,
    generate_scene,
    has_crowded_pair,
    make_dataset,
    scene_seed,
)
from lrdet.evaluate import (
    IOU_THRESHOLDS,
    evaluate_detections,
    extract_detections,
)
from lrdet.geometry import cxcywh_to_xyxy, iof_matrix


def test_scene_generation_is_deterministic():
    cfg = DataConfig()
    a = generate_scene(cfg, 1234)
    b = generate_scene(cfg, 1234)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.boxes, b.boxes)
    assert np.array_equal(a.labels, b.labels)
    c = generate_scene(cfg, 1235)
    assert not np.array_equal(a.image, c.image)


def test_scene_contents_respect_config():
    cfg = DataConfig(canvas=64, num_classes=3, max_objects=4)
    for seed in range(40):
        scene = generate_scene(cfg, seed)
        assert scene.image.shape == (64, 64, 3)
        assert scene.image.dtype == np.float32
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        k = len(scene.boxes)
        assert 1 <= k <= 4
        assert scene.labels.shape == (k,)
        assert np.all(scene.labels >= 0) and np.all(scene.labels < 3)
        xyxy = cxcywh_to_xyxy(scene.boxes)
        assert np.all(xyxy[:, 0] >= 0) and np.all(xyxy[:, 1] >= 0)
        assert np.all(xyxy[:, 2] <= 64) and np.all(xyxy[:, 3] <= 64)
        widths = scene.boxes[:, 2]
        heights = scene.boxes[:, 3]
        assert np.all(widths >= cfg.min_size) and np.all(widths <= cfg.max_size)
        assert np.all(heights >= cfg.min_size) and np.all(heights <= cfg.max_size)


def test_single_object_cap():
    cfg = DataConfig(max_objects=1)
    for seed in range(10):
        assert len(generate_scene(cfg, seed).boxes) == 1


def test_plain_scenes_respect_crowding_cap():
    cfg = DataConfig(crowded=False, crowding_cap=0.3)
    for seed in range(50):
        scene = generate_scene(cfg, seed)
        if len(scene.boxes) > 1:
            iof = iof_matrix(scene.boxes)
            off_diag = iof[~np.eye(len(iof), dtype=bool)]
            assert np.all(off_diag <= 0.3 + 1e-9)


def test_crowded_scenes_contain_an_overlapping_pair():
    cfg = DataConfig(crowded=True)
    for seed in range(30):
        scene = generate_scene(cfg, seed)
        assert len(scene.boxes) >= 2
        assert has_crowded_pair(scene.boxes)
        iof = iof_matrix(scene.boxes)
        np.fill_diagonal(iof, 0.0)
        assert iof.max() >= CROWDED_IOF - 1e-9


def test_has_crowded_pair_threshold():
    # IoF of box 0 in box 1 is exactly 0.5.
    boxes = np.array([[6.0, 5.0, 4.0, 4.0], [8.0, 5.0, 4.0, 4.0]])
    assert has_crowded_pair(boxes, threshold=0.5)
    assert not has_crowded_pair(boxes, threshold=0.51)
    assert not has_crowded_pair(boxes[:1])


def test_scene_seed_is_injective_per_index():
    seeds = {scene_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert scene_seed(7, 3) != scene_seed(8, 3)


def test_make_dataset_matches_scene_seeds():
    cfg = DataConfig()
    scenes = make_dataset(cfg, 5, 8)
    assert len(scenes) == 8
    for i, scene in enumerate(scenes):
        solo = generate_scene(cfg, scene_seed(5, i))
        assert np.array_equal(scene.image, solo.image)
        assert np.array_equal(scene.boxes, solo.boxes)


def test_backbone_pyramid_shapes_and_strides():
    r = np.random.default_rng(0)
    bb = BackboneStub(dim=32, num_levels=3, rng=r, dtype=np.float64)
    image = r.uniform(0, 1, (64, 64, 3))
    pyr = bb(T.Tensor(image))
    assert pyr.strides == (4, 8, 16)
    shapes = [f.shape for f in pyr.levels]
    assert shapes == [(16, 16, 32), (8, 8, 32), (4, 4, 32)]


def test_backbone_rejects_bad_divisibility():
    r = np.random.default_rng(1)
    bb = BackboneStub(dim=16, num_levels=3, rng=r, dtype=np.float64)
    from lrdet.errors import ContractError
    with pytest.raises(ContractError):
        bb(T.Tensor(np.zeros((30, 30, 3))))


def test_backbone_gradients_reach_the_image():
    r = np.random.default_rng(2)
    bb = BackboneStub(dim=8, num_levels=2, rng=r, dtype=np.float64)
    image = T.Tensor(r.uniform(0, 1, (16, 16, 3)), requires_grad=True)
    pyr = bb(image)
    loss = T.tsum(pyr.levels[0] * pyr.levels[0]) + T.tsum(pyr.levels[1])
    loss.backward()
    assert image.grad is not None
    assert np.all(np.isfinite(image.grad))
    assert np.any(image.grad != 0)


def _det(boxes_xyxy, scores, labels):
    return (np.asarray(boxes_xyxy, dtype=np.float64),
            np.asarray(scores, dtype=np.float64),
            np.asarray(labels, dtype=np.int64))


GT_BOX = np.array([[10.0, 10.0, 20.0, 20.0]])
GT_LAB = np.array([0])


def test_ap_perfect_detection():
    dets = [_det(GT_BOX, [0.9], [0])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 1,
                             iou_thresholds=(0.5,))[0]
    assert ap == 1.0


def test_ap_wrong_class_scores_zero():
    dets = [_det(GT_BOX, [0.9], [1])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 2,
                             iou_thresholds=(0.5,))[0]
    assert ap == 0.0


def test_ap_misplaced_box_scores_zero():
    far = GT_BOX + 40.0
    dets = [_det(far, [0.9], [0])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 1,
                             iou_thresholds=(0.5,))[0]
    assert ap == 0.0


def test_ap_duplicate_below_true_positive_keeps_one():
    # Precision envelope at every recall point stays 1.0 when the duplicate
    # ranks under the hit.
    dets = [_det(np.vstack([GT_BOX, GT_BOX]), [0.9, 0.4], [0, 0])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 1,
                             iou_thresholds=(0.5,))[0]
    assert ap == 1.0


def test_ap_duplicate_above_true_positive_halves():
    # The leading false positive caps precision at recall 1 to 1/2.
    dets = [_det(np.vstack([GT_BOX + 40.0, GT_BOX]), [0.9, 0.4], [0, 0])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 1,
                             iou_thresholds=(0.5,))[0]
    assert ap == pytest.approx(0.5, abs=1e-12)


def test_ap_missed_gt_halves_recall():
    two_gt = np.array([[10.0, 10.0, 20.0, 20.0], [40.0, 40.0, 50.0, 50.0]])
    dets = [_det(two_gt[:1], [0.9], [0])]
    ap = evaluate_detections(dets, [two_gt], [np.array([0, 0])], 1,
                             iou_thresholds=(0.5,))[0]
    # 101-point grid: recalls up to 0.5 inclusive keep precision 1.
    assert ap == pytest.approx(51 / 101, abs=1e-12)


def test_ap_invariant_to_monotone_score_rescale():
    r = np.random.default_rng(3)
    gt_b, gt_l, dets_a, dets_b = [], [], [], []
    for img in range(6):
        k = int(r.integers(1, 4))
        boxes = np.sort(r.uniform(5, 55, (k, 4)), axis=1)[:, [0, 1, 2, 3]]
        boxes = np.stack([boxes[:, 0], boxes[:, 1],
                          boxes[:, 0] + r.uniform(5, 12, k),
                          boxes[:, 1] + r.uniform(5, 12, k)], axis=1)
        labels = r.integers(0, 2, k)
        gt_b.append(boxes)
        gt_l.append(labels)
        jitter = boxes + r.uniform(-3, 3, boxes.shape)
        scores = r.uniform(0.1, 0.9, k)
        dets_a.append(_det(jitter, scores, labels))
        dets_b.append(_det(jitter, 0.5 * scores + 0.2, labels))
    a = evaluate_detections(dets_a, gt_b, gt_l, 2)
    b = evaluate_detections(dets_b, gt_b, gt_l, 2)
    assert a == b


def test_ap50_upper_bounds_the_threshold_sweep():
    r = np.random.default_rng(4)
    gt_b, gt_l, dets = [], [], []
    for img in range(6):
        k = int(r.integers(1, 4))
        boxes = np.stack([
            r.uniform(5, 40, k), r.uniform(5, 40, k),
        ], axis=1)
        boxes = np.concatenate(
            [boxes, boxes + r.uniform(8, 16, (k, 2))], axis=1
        )
        labels = r.integers(0, 2, k)
        gt_b.append(boxes)
        gt_l.append(labels)
        jitter = boxes + r.uniform(-2, 2, boxes.shape)
        dets.append(_det(jitter, r.uniform(0.2, 1.0, k), labels))
    sweep = evaluate_detections(dets, gt_b, gt_l, 2)
    assert len(sweep) == len(IOU_THRESHOLDS)
    ap50 = sweep[0]
    assert ap50 >= np.mean(sweep) - 1e-12
    assert all(sweep[i] >= sweep[i + 1] - 1e-12 for i in range(len(sweep) - 1))


def test_ap_ignores_classes_without_ground_truth():
    # Class 1 never appears in gt: predictions for it must not dilute the
    # mean, only poison their own (absent) class.
    dets = [_det(np.vstack([GT_BOX, GT_BOX + 40.0]), [0.9, 0.8], [0, 1])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 2,
                             iou_thresholds=(0.5,))[0]
    assert ap == 1.0


def test_ap_empty_detections():
    dets = [_det(np.zeros((0, 4)), [], [])]
    ap = evaluate_detections(dets, [GT_BOX], [GT_LAB], 1,
                             iou_thresholds=(0.5,))[0]
    assert ap == 0.0


def test_size_buckets_partition_scoring():
    # One small (16x16 at nominal canvas) and one large object; restricting
    # the area range must score each bucket independently.
    small_box = np.array([[10.0, 10.0, 26.0, 26.0]])     # area 256
    large_box = np.array([[40.0, 40.0, 140.0, 140.0]])   # area 10000
    gt = [np.vstack([small_box, large_box])]
    labels = [np.array([0, 0])]
    dets = [_det(np.vstack([small_box, large_box]), [0.9, 0.8], [0, 0])]
    both = evaluate_detections(dets, gt, labels, 1, iou_thresholds=(0.5,))[0]
    only_small = evaluate_detections(dets, gt, labels, 1,
                                     iou_thresholds=(0.5,),
                                     area_range=(0.0, 32 ** 2))[0]
    only_large = evaluate_detections(dets, gt, labels, 1,
                                     iou_thresholds=(0.5,),
                                     area_range=(96 ** 2, np.inf))[0]
    assert both == 1.0 and only_small == 1.0 and only_large == 1.0
    # A wrong small box hurts only the small bucket.
    dets_bad = [_det(np.vstack([small_box + 30.0, large_box]), [0.9, 0.8],
                     [0, 0])]
    assert evaluate_detections(dets_bad, gt, labels, 1,
                               iou_thresholds=(0.5,),
                               area_range=(96 ** 2, np.inf))[0] == 1.0
    assert evaluate_detections(dets_bad, gt, labels, 1,
                               iou_thresholds=(0.5,),
                               area_range=(0.0, 32 ** 2))[0] == 0.0


class _FakeStage:
    def __init__(self, logits, boxes):
        self.logits = T.Tensor(np.asarray(logits, dtype=np.float64))
        self.boxes = np.asarray(boxes, dtype=np.float64)


def test_extract_detections_ranks_query_class_cells():
    logits = np.array([[4.0, -2.0], [1.0, 3.0]])
    boxes = np.array([[10.0, 10.0, 8.0, 8.0], [30.0, 30.0, 8.0, 8.0]])
    out_boxes, scores, labels = extract_detections(_FakeStage(logits, boxes))
    assert len(scores) == 4
    assert np.all(np.diff(scores) <= 0)
    # Highest cell is query 0 / class 0; second is query 1 / class 1.
    assert labels[0] == 0 and np.allclose(out_boxes[0], [6.0, 6.0, 14.0, 14.0])
    assert labels[1] == 1 and np.allclose(out_boxes[1], [26.0, 26.0, 34.0, 34.0])
    assert scores[0] == pytest.approx(1 / (1 + np.exp(-4.0)), abs=1e-12)


def test_extract_detections_caps_count():
    r = np.random.default_rng(5)
    logits = r.standard_normal((30, 4))
    boxes = np.abs(r.standard_normal((30, 4))) + 5.0
    out_boxes, scores, labels = extract_detections(
        _FakeStage(logits, boxes), max_detections=10
    )
    assert out_boxes.shape == (10, 4)
    assert scores.shape == (10,) and labels.shape == (10,)
    full = 1.0 / (1.0 + np.exp(-logits.reshape(-1)))
    assert scores[0] == full.max()
