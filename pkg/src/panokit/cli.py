"""Command-line interface.

Subcommands: synth (render a scene suite to disk), train (toy training),
track (run the sequential tracker from a prompt mask), eval (J/F report),
gradcheck (finite-difference audit of the loss gradients).

Exit codes: 0 success, 1 validation error (bad flags, bad config, malformed
inputs), 2 runtime failure (divergence, unexpected errors).

Masks travel as per-frame PGM files named mask_00000.pgm inside a
directory; frames as frame_00000.npy arrays. The PANOKIT_SEED environment
variable overrides the config seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, save_model
from .config import load_config
from .errors import (
    ConfigError,
    EmptyMaskError,
    MaskFormatError,
    ProjectionError,
    ShapeError,
    TrainingDiverged,
)
from .geometry import ErpGrid
from .maskio import read_pgm, write_pgm, write_rle
from .metrics import evaluate
from .pipeline import run_vos, train_toy
from .scene import (
    occlusion_scene_configs,
    seam_scene_configs,
    synth_scene,
    training_scene_configs,
)

VALIDATION_ERRORS = (
    ConfigError, MaskFormatError, ShapeError, EmptyMaskError, ProjectionError,
    ValueError, OSError,
)

_SUITES = {
    "train": training_scene_configs,
    "seam": seam_scene_configs,
    "occlusion": occlusion_scene_configs,
}


def _frame_path(d, t):
    return Path(d) / f"frame_{t:05d}.npy"


def _mask_path(d, t):
    return Path(d) / f"mask_{t:05d}.pgm"


def write_video_dir(out_dir, video):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, (frame, gt) in enumerate(zip(video.frames, video.gt)):
        np.save(_frame_path(out, t), frame)
        write_pgm(_mask_path(out, t), gt.astype(bool))
    write_rle(out / "gt.json", [g.astype(bool) for g in video.gt])
    (out / "occlusion.json").write_text(
        json.dumps(video.occlusion_gt) + "\n", encoding="ascii")


def read_frames_dir(video_dir):
    paths = sorted(Path(video_dir).glob("frame_*.npy"))
    if not paths:
        raise ConfigError(f"no frame_*.npy files under {video_dir}")
    return [np.load(p) for p in paths]


def read_masks_dir(mask_dir):
    paths = sorted(Path(mask_dir).glob("mask_*.pgm"))
    if not paths:
        raise ConfigError(f"no mask_*.pgm files under {mask_dir}")
    return [read_pgm(p) for p in paths]


def _cmd_synth(args):
    cfg = load_config(args.config)
    grid = ErpGrid(cfg.grid_h, cfg.grid_w)
    configs = _SUITES[cfg.scene](cfg.n_clips, grid, cfg.n_frames, cfg.seed)
    for k, sc in enumerate(configs):
        write_video_dir(Path(args.out) / f"clip_{k:03d}", synth_scene(sc))
    print(f"wrote {len(configs)} {cfg.scene} clips to {args.out}")
    return 0


def _cmd_train(args):
    cfg = load_config(args.config)
    result = train_toy(cfg)
    meta = {
        "history": result.history,
        "run_config": json.loads(cfg.to_json()),
    }
    save_model(args.out, result.tracker, meta=meta)
    losses = result.history["epoch_loss"]
    print(f"trained {cfg.epochs} epochs; loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_track(args):
    tracker, _ = load_model(args.ckpt)
    frames = read_frames_dir(args.video)
    prompt = read_pgm(args.prompt)
    result = run_vos(tracker, frames, prompt, seed=args.seed,
                     long_slots=args.long_slots)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, mask in enumerate(result.masks):
        write_pgm(_mask_path(out, t), mask)
    write_rle(out / "pred.json", result.masks)
    print(f"tracked {len(result.masks)} frames into {args.out}")
    return 0


def _cmd_eval(args):
    preds = read_masks_dir(args.pred)
    gts = read_masks_dir(args.gt)
    report = evaluate(preds, gts)
    doc = {
        "per_frame_j": report.per_frame_j,
        "per_frame_f": report.per_frame_f,
        "j_mean": report.j_mean,
        "f_mean": report.f_mean,
        "jf": report.jf,
    }
    Path(args.report).write_text(
        json.dumps(doc, indent=2) + "\n", encoding="ascii")
    print(f"J={report.j_mean:.4f} F={report.f_mean:.4f} J&F={report.jf:.4f}")
    return 0


def _cmd_gradcheck(args):
    from .tensor import Tensor, finite_diff_check, sigmoid
    from .losses import (
        LossWeights, WeightMap, dice_loss, total_loss, weighted_bce,
    )
    from .decoder import DecoderOutput

    rng = np.random.default_rng(args.seed)
    h, w = 16, 32
    gt = rng.random((h, w)) < 0.4
    weights = WeightMap(rng.uniform(0.5, 2.0, size=(h, w)))
    worst = {}

    raw = rng.normal(size=(h, w))
    logits = np.sign(raw) * (0.1 + np.abs(raw))
    worst["weighted_bce"] = finite_diff_check(
        lambda t: weighted_bce(t, gt, weights), Tensor(logits, requires_grad=True))
    worst["dice_loss"] = finite_diff_check(
        lambda t: dice_loss(sigmoid(t), gt), Tensor(logits, requires_grad=True))

    raw = rng.normal(size=(3, h, w))
    y = np.sign(raw) * (0.1 + np.abs(raw))
    u0 = rng.uniform(0.2, 0.8, size=3)
    o0 = rng.normal()
    pack = np.concatenate([y.ravel(), u0, [o0]])

    def loss_of(t):
        y_t = t[: 3 * h * w].reshape((3, h, w))
        out = DecoderOutput(y_sam=y_t, u=t[3 * h * w:3 * h * w + 3],
                            o=t[3 * h * w + 3].reshape(()),
                            p=Tensor(np.zeros(4)))
        loss, _ = total_loss(out, gt, 1, weights, LossWeights())
        return loss

    worst["total_loss"] = finite_diff_check(
        loss_of, Tensor(pack, requires_grad=True))

    code = 0
    for name, err in worst.items():
        status = "ok" if err < 1e-4 else "FAIL"
        if err >= 1e-4:
            code = 2
        print(f"{name:14s} max relative gradient error {err:.3e}  {status}")
    return code


def build_parser():
    p = argparse.ArgumentParser(
        prog="panokit",
        description="Seam-consistent panoramic video object segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render synthetic clips to a directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train the toy tracker")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("track", help="track a prompted object")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--long-slots", type=int, default=None)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference audit of the losses")
    s.add_argument("--seed", type=int, default=0)
    return p


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"unexpected failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
