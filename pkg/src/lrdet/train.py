"""Training loop: seeded end to end, with resumable checkpoints.

All randomness flows from the run seed: model init and batch order use
spawned generator streams, and every scene's seed is a pure function of
(seed, split, index), so the dataset is identical for any worker count.
In deterministic mode the wall-clock column is written as 0 and the
worker pool is forced to one, making the metrics CSV byte-reproducible.
"""

import os
import time

import numpy as np

from . import tensor as T
from .data import make_dataset
from .decoder import DetectionModel
from .errors import NumericError
from .evaluate import evaluate_model, quick_ap50
from .matching import total_loss
from .optim import AdamW
from .serialization import (
    atomic_write_text,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)

CSV_HEADER = "step,wall_ms,stage,loss_cls,loss_l1,loss_giou,loss_total,eval_ap50"


def clip_gradients(named_params, max_norm):
    if max_norm <= 0:
        return
    total = 0.0
    grads = [p.grad for _, p in named_params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale


def _fmt(value):
    return repr(float(value))


class Trainer:
    def __init__(self, cfg, resume_path=None):
        self.cfg = cfg
        self.deterministic = cfg["deterministic"]
        self.workers = 1 if self.deterministic else cfg["train.workers"]
        seed = cfg["seed"]
        model_ss, batch_ss = np.random.SeedSequence(seed).spawn(2)
        self.batch_rng = np.random.default_rng(batch_ss)
        dtype = np.float32
        self.model = DetectionModel(
            cfg.model_config(), np.random.default_rng(model_ss), dtype
        )
        self.optimizer = AdamW(
            list(self.model.named_parameters()),
            lr=cfg["train.lr"],
            weight_decay=cfg["train.weight_decay"],
        )
        self.loss_weights = cfg.loss_weights()
        data_cfg = cfg.data_config()
        self.train_scenes = make_dataset(
            data_cfg, 2 * seed, cfg["data.train_scenes"], workers=self.workers
        )
        self.eval_scenes = make_dataset(
            data_cfg, 2 * seed + 1, cfg["data.eval_scenes"], workers=self.workers
        )
        self.image_size = (data_cfg.canvas, data_cfg.canvas)
        self.start_step = 0
        if resume_path is not None:
            ckpt = load_checkpoint(resume_path)
            restore_model(self.model, ckpt)
            self.optimizer.load_state_dict(ckpt["adam"])
            if ckpt["rng_state"] is not None:
                self.batch_rng.bit_generator.state = ckpt["rng_state"]
            self.start_step = ckpt["step"]

    def _train_step(self, step):
        cfg = self.cfg
        warmup = cfg["train.warmup"]
        lr = cfg["train.lr"] * (min(1.0, step / warmup) if warmup else 1.0)
        if cfg["train.lr_schedule"] == "step":
            # Two tenth-scale drops late in the run, at 2/3 and 11/12 of the
            # step budget; "constant" keeps the post-warmup rate flat.
            total = cfg["train.steps"]
            for frac in (2.0 / 3.0, 11.0 / 12.0):
                if step >= frac * total:
                    lr *= 0.1
        self.optimizer.lr = lr
        batch = cfg["train.batch_size"]
        idxs = self.batch_rng.integers(0, len(self.train_scenes), size=batch)
        num_stages = cfg["model.num_stages"]
        stage_sums = [dict.fromkeys(("cls", "l1", "giou", "total"), 0.0)
                      for _ in range(num_stages)]
        loss_acc = None
        for i in idxs:
            scene = self.train_scenes[int(i)]
            outputs = self.model(scene.image)
            loss, parts = total_loss(
                outputs, scene.boxes, scene.labels, self.loss_weights,
                self.image_size,
            )
            loss_acc = loss if loss_acc is None else loss_acc + loss
            for k, p in enumerate(parts):
                for key in stage_sums[k]:
                    stage_sums[k][key] += p[key]
        batch_loss = loss_acc * (1.0 / batch)
        if not np.isfinite(batch_loss.data):
            raise NumericError(f"non-finite training loss at step {step}")
        self.optimizer.zero_grad()
        batch_loss.backward()
        clip_gradients(self.optimizer.named_params, cfg["train.grad_clip"])
        self.optimizer.step()
        for sums in stage_sums:
            for key in sums:
                sums[key] /= batch
        return stage_sums

    def train(self, out_dir):
        cfg = self.cfg
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "config.txt"), cfg.echo())
        metrics_path = os.path.join(out_dir, "metrics.csv")
        rows = self._load_prior_rows(metrics_path)

        steps = cfg["train.steps"]
        log_every = cfg["train.log_every"]
        eval_every = cfg["train.eval_every"]
        ckpt_every = cfg["train.checkpoint_every"]
        ckpt_path = os.path.join(out_dir, "checkpoint.lrt")
        start_time = time.monotonic()
        ap50 = None

        for step in range(self.start_step + 1, steps + 1):
            stage_sums = self._train_step(step)
            logging = step == 1 or step == steps or step % log_every == 0
            evaluating = step == steps or (eval_every and step % eval_every == 0)
            if evaluating:
                ap50 = quick_ap50(
                    self.model, self.eval_scenes, cfg["eval.max_detections"]
                )
            if logging or evaluating:
                wall = 0 if self.deterministic else int(
                    (time.monotonic() - start_time) * 1000
                )
                total_all = 0.0
                for k, sums in enumerate(stage_sums):
                    rows.append(
                        f"{step},{wall},{k},{_fmt(sums['cls'])},{_fmt(sums['l1'])},"
                        f"{_fmt(sums['giou'])},{_fmt(sums['total'])},"
                    )
                    total_all += sums["total"]
                ap_cell = _fmt(ap50) if evaluating else ""
                rows.append(f"{step},{wall},all,,,,{_fmt(total_all)},{ap_cell}")
                atomic_write_text(metrics_path, "\n".join(rows) + "\n")
            if ckpt_every and step % ckpt_every == 0:
                self._save(os.path.join(out_dir, f"checkpoint_step{step}.lrt"), step)
        self._save(ckpt_path, steps)
        return ap50

    def _load_prior_rows(self, metrics_path):
        if self.start_step > 0 and os.path.exists(metrics_path):
            with open(metrics_path, "r", encoding="utf-8") as f:
                existing = [ln.rstrip("\n") for ln in f if ln.strip()]
            kept = [existing[0]] if existing else [CSV_HEADER]
            for line in existing[1:]:
                try:
                    if int(line.split(",", 1)[0]) <= self.start_step:
                        kept.append(line)
                except ValueError:
                    continue
            return kept
        return [CSV_HEADER]

    def _save(self, path, step):
        save_checkpoint(
            path, self.model, self.optimizer, self.batch_rng, self.cfg.values, step
        )

    def final_report(self):
        return evaluate_model(
            self.model, self.eval_scenes, self.cfg["eval.max_detections"]
        )


def train_run(cfg, out_dir, resume_path=None):
    trainer = Trainer(cfg, resume_path=resume_path)
    ap50 = trainer.train(out_dir)
    return trainer, ap50
