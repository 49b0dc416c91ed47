"""Command-line front end.

Subcommands: train, eval, gradcheck, visualize, ablate. Shared flags
--config/--checkpoint/--seed/--out/--deterministic; flag values beat
environment overrides (LRDET_ prefix, double underscore for dots), which
beat the config file, which beats the selected profile's defaults.
"""

import argparse
import os
import sys

import numpy as np

from .config import build_config, RunConfig
from .data import generate_scene, make_dataset
from .decoder import DetectionModel
from .errors import ContractError, NumericError
from .evaluate import evaluate_model
from .gradcheck import DEFAULT_TOL, run_suite
from .serialization import atomic_write_text, load_checkpoint, restore_model
from .train import train_run
from .visualize import visualize_scene

ABLATION_ARMS = ("neither", "local-regions", "look-back", "both")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lrdet", description="Train and inspect the toy detector."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("train", "train a model and write checkpoint + metrics"),
        ("eval", "evaluate a checkpoint and write the report"),
        ("gradcheck", "finite-difference check of every gradient path"),
        ("visualize", "dump per-stage attention, points, and box overlays"),
        ("ablate", "train and compare the four mechanism arms"),
    ):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", metavar="PATH", help="config file")
        p.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--deterministic", action="store_true", default=None)
    return parser


def _config_from_args(args):
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.out is not None:
        flags["out"] = args.out
    if args.deterministic:
        flags["deterministic"] = True
    return build_config(args.config, flags)


def _restored_model(cfg, checkpoint_path):
    model = DetectionModel(
        cfg.model_config(),
        np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(2)[0]),
        np.float32,
    )
    if checkpoint_path is not None:
        restore_model(model, load_checkpoint(checkpoint_path))
    return model


def cmd_train(cfg, checkpoint_path):
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    # Probe writability up front; dataset generation is the slow part.
    atomic_write_text(os.path.join(out_dir, "config.txt"), cfg.echo())
    trainer, ap50 = train_run(cfg, out_dir, resume_path=checkpoint_path)
    print(f"finished {cfg['train.steps']} steps; eval AP@0.5 = {ap50:.4f}")
    print(f"checkpoint: {os.path.join(out_dir, 'checkpoint.lrt')}")
    print(f"metrics:    {os.path.join(out_dir, 'metrics.csv')}")
    return 0


def cmd_eval(cfg, checkpoint_path):
    if checkpoint_path is None:
        raise ContractError("eval needs --checkpoint")
    model = _restored_model(cfg, checkpoint_path)
    scenes = make_dataset(
        cfg.data_config(), 2 * cfg["seed"] + 1, cfg["data.eval_scenes"],
        workers=1 if cfg["deterministic"] else cfg["train.workers"],
    )
    report = evaluate_model(model, scenes, cfg["eval.max_detections"])
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "eval.csv"), report.as_csv())
    atomic_write_text(os.path.join(out_dir, "eval.txt"), report.as_text())
    print(report.as_text(), end="")
    return 0


def cmd_gradcheck(cfg):
    results = run_suite(seed=cfg["seed"])
    lines = []
    failed = 0
    for name, err in results:
        ok = err <= DEFAULT_TOL
        failed += not ok
        lines.append(f"{name:<16} max_rel_err={err:.3e} "
                     f"{'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "gradcheck.txt"), text)
    return 1 if failed else 0


def cmd_visualize(cfg, checkpoint_path):
    model = _restored_model(cfg, checkpoint_path)
    scene = generate_scene(cfg.data_config(), cfg["seed"])
    out_dir = cfg["out"]
    dump_path = visualize_scene(
        model, scene, out_dir, max_boxes=cfg["eval.max_detections"]
    )
    print(f"dumps: {dump_path}")
    print(f"overlays: {os.path.join(out_dir, 'stage*.svg')}")
    return 0


def arm_values(base_values, arm):
    """Arm config: only the three mechanism keys may differ from base."""
    if arm not in ABLATION_ARMS:
        raise ContractError(f"unknown ablation arm {arm!r}")
    values = dict(base_values)
    local = arm in ("local-regions", "both")
    values["model.local_sampling"] = local
    values["model.look_back"] = arm in ("look-back", "both")
    if not local:
        values["model.epsilon"] = 0.0
        values["model.epsilon_mode"] = "single"
    return values


def cmd_ablate(cfg):
    out_dir = cfg["out"]
    os.makedirs(out_dir, exist_ok=True)
    rows = ["arm,ap,ap50,ap_small"]
    for arm in ABLATION_ARMS:
        arm_cfg = RunConfig(arm_values(cfg.values, arm))
        arm_dir = os.path.join(out_dir, arm)
        os.makedirs(arm_dir, exist_ok=True)
        atomic_write_text(os.path.join(arm_dir, "config.txt"), arm_cfg.echo())
        trainer, _ = train_run(arm_cfg, arm_dir)
        report = trainer.final_report()
        rows.append(
            f"{arm},{report.ap:.6f},{report.ap50:.6f},{report.ap_small:.6f}"
        )
        print(rows[-1])
    atomic_write_text(os.path.join(out_dir, "ablation.csv"),
                      "\n".join(rows) + "\n")
    print(f"table: {os.path.join(out_dir, 'ablation.csv')}")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "train":
            return cmd_train(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "visualize":
            return cmd_visualize(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise ContractError(f"unknown command {args.command!r}")
    except (ContractError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
