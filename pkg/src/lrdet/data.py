"""Procedural detection scenes: patterned rectangles on a noisy canvas.

Classes are told apart by fill pattern, not color: 0 = solid, 1 =
horizontal stripes (period 4, anchored at the box corner), 2 = 2-pixel
checkerboard. Colors are drawn independently of class so they carry no
label signal. Normal scenes keep every pairwise overlap ratio below the
crowding cap; crowded scenes instead guarantee at least one pair with
overlap ratio >= 0.3 by construction.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geometry import iof_matrix

CROWDED_IOF = 0.3
_PATTERN_OFF = 0.2  # dark part of striped/checker fills, as a color factor
_MAX_TRIES = 200


@dataclass
class DataConfig:
    canvas: int = 64
    num_classes: int = 3
    max_objects: int = 4
    min_size: int = 5
    max_size: int = 40
    crowding_cap: float = 0.3
    crowded: bool = False

    def validate(self):
        if self.num_classes < 1 or self.num_classes > 3:
            raise ContractError("num_classes must be 1..3 (one per fill pattern)")
        if not 0 < self.min_size <= self.max_size < self.canvas:
            raise ContractError("object size range must fit inside the canvas")
        if self.max_objects < 1:
            raise ContractError("max_objects must be positive")
        if self.crowded and self.max_objects < 2:
            raise ContractError("crowded scenes need max_objects >= 2")


@dataclass
class Scene:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    boxes: np.ndarray  # [K, 4] cxcywh pixels, float64
    labels: np.ndarray  # [K] int64
    seed: int


def _paint(image, x1, y1, w, h, label, color):
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    if label == 0:
        mask = np.ones((h, w), dtype=bool)
    elif label == 1:
        mask = (ys // 2) % 2 == 0
        mask = np.broadcast_to(mask, (h, w))
    else:
        mask = ((ys // 2) + (xs // 2)) % 2 == 0
    patch = np.where(mask[:, :, None], color, color * _PATTERN_OFF)
    image[y1:y1 + h, x1:x1 + w] = patch


def _max_pair_iof(new_xyxy, placed_xyxy):
    if not placed_xyxy:
        return 0.0
    a = np.asarray([new_xyxy], dtype=np.float64)
    b = np.asarray(placed_xyxy, dtype=np.float64)
    inter_w = np.clip(
        np.minimum(a[:, None, 2], b[None, :, 2])
        - np.maximum(a[:, None, 0], b[None, :, 0]),
        0, None,
    )
    inter_h = np.clip(
        np.minimum(a[:, None, 3], b[None, :, 3])
        - np.maximum(a[:, None, 1], b[None, :, 1]),
        0, None,
    )
    inter = inter_w * inter_h
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return float(np.max(np.maximum(inter / area_a[:, None], inter / area_b[None, :])))


def has_crowded_pair(boxes_cxcywh, threshold=CROWDED_IOF):
    if len(boxes_cxcywh) < 2:
        return False
    m = iof_matrix(np.asarray(boxes_cxcywh, dtype=np.float64))
    np.fill_diagonal(m, 0.0)
    return bool(np.max(m) >= threshold)


def generate_scene(cfg: DataConfig, seed) -> Scene:
    """Deterministic scene for a given config and integer seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.canvas
    image = (0.10 + rng.uniform(0.0, 0.05, size=(size, size, 3))).astype(np.float32)
    # Crowded scenes must hold a pair, so they never draw a single object.
    count = int(rng.integers(2 if cfg.crowded else 1, cfg.max_objects + 1))
    placed = []
    labels = []
    for k in range(count):
        crowd_this = cfg.crowded and k == 1  # second box overlaps the first
        for _ in range(_MAX_TRIES):
            w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            if crowd_this:
                bx1, by1, bx2, by2 = placed[0]
                cx = (bx1 + bx2) / 2 + rng.uniform(-0.4, 0.4) * (bx2 - bx1)
                cy = (by1 + by2) / 2 + rng.uniform(-0.4, 0.4) * (by2 - by1)
                x1 = int(np.clip(round(cx - w / 2), 0, size - w))
                y1 = int(np.clip(round(cy - h / 2), 0, size - h))
            else:
                x1 = int(rng.integers(0, size - w + 1))
                y1 = int(rng.integers(0, size - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            worst = _max_pair_iof(box, placed)
            if cfg.crowded:
                if crowd_this and worst < CROWDED_IOF:
                    continue
            elif worst > cfg.crowding_cap:
                continue
            placed.append(box)
            labels.append(int(rng.integers(0, cfg.num_classes)))
            break
        else:
            break  # canvas too full; keep what fits
    for (x1, y1, x2, y2), label in zip(placed, labels):
        color = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
        _paint(image, x1, y1, x2 - x1, y2 - y1, label, color)
    boxes = np.array(
        [[(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]
         for x1, y1, x2, y2 in placed],
        dtype=np.float64,
    )
    if cfg.crowded and (len(placed) < 2 or not has_crowded_pair(boxes)):
        raise ContractError("crowded scene construction failed its post-condition")
    return Scene(image=image, boxes=boxes,
                 labels=np.array(labels, dtype=np.int64), seed=int(seed))


def scene_seed(base_seed, index):
    """Stable per-scene seed, independent of worker count or order."""
    return int(
        np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0]
    )


def make_dataset(cfg: DataConfig, base_seed, count, workers=1):
    seeds = [scene_seed(base_seed, i) for i in range(count)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: generate_scene(cfg, s), seeds))
    return [generate_scene(cfg, s) for s in seeds]


def save_dataset(path, scenes):
    from .serialization import save_tensors

    tensors = {}
    for i, s in enumerate(scenes):
        tensors[f"scene{i}.image"] = s.image
        tensors[f"scene{i}.boxes"] = s.boxes
        tensors[f"scene{i}.labels"] = s.labels
    meta = {"kind": "dataset", "count": len(scenes),
            "seeds": [s.seed for s in scenes]}
    save_tensors(path, tensors, meta)


def load_dataset(path):
    from .serialization import load_tensors

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "dataset":
        raise ContractError(f"{path} is not a dataset snapshot")
    scenes = []
    for i in range(int(meta["count"])):
        scenes.append(Scene(
            image=tensors[f"scene{i}.image"],
            boxes=tensors[f"scene{i}.boxes"],
            labels=tensors[f"scene{i}.labels"],
            seed=int(meta["seeds"][i]),
        ))
    return scenes
