"""End-to-end tracking and toy training.

Tracking (run_vos) is strictly sequential: encode the frame, condition its
features on the memory bank, decode candidate masks, keep the one with the
highest predicted overlap, then write the frame into memory. Frame 0 never
predicts; its prompt mask is the output and seeds the permanent memory
entry, while a decode with the no-mask embedding supplies the frame's
pointer and visibility estimate.

Training runs the same loop with gradients, truncated backpropagation in
fixed-size chunks, and a curriculum on how much ground truth the memory
sees: every frame during warm-up epochs, every gt_mem_period-th frame
afterwards. Long-term memory switches on after a configured epoch. The
previous-mask cue is teacher-forced on the same schedule as the memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import mask_to_logits, select_best_mask
from .errors import EmptyMaskError, ShapeError, TrainingDiverged
from .geometry import ErpGrid
from .losses import (
    LossWeights,
    WeightParams,
    generate_weight_map,
    occlusion_bce,
    total_loss,
)
from .memory import MemoryBank, MemoryEntry, bank_insert, condition_features
from .metrics import evaluate
from .model import ModelConfig, PanoTracker
from .scene import VideoSequence, synth_scene, training_scene_configs

# predicted visibility below this probability emits an empty mask
OCC_THRESHOLD = 0.5
GRAD_CLIP_NORM = 1.0


def model_config_from_run(cfg):
    return ModelConfig(
        d_feat=cfg.d_feat, d_p=cfg.d_p, d_m=cfg.d_m,
        attn_rounds=cfg.attn_rounds, long_slots=cfg.long_slots,
        recent_size=cfg.recent_size, pad_mode=cfg.pad_mode, seed=cfg.seed,
    )


def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass
class TrackResult:
    masks: list       # bool [H, W] per frame
    visibility: list  # 1 = object judged visible
    scores: list      # confidence of the selected mask
    bank: MemoryBank


def _frames_of(video):
    return video.frames if isinstance(video, VideoSequence) else list(video)


def run_vos(tracker, video, first_gt_mask, seed=0, long_slots=None):
    """Track the prompted object through a sequence; deterministic per seed."""
    frames = _frames_of(video)
    if len(frames) < 1:
        raise ShapeError("need at least one frame")
    first = np.asarray(first_gt_mask).astype(bool)
    if not first.any():
        raise EmptyMaskError("the prompt mask is empty")
    if tuple(frames[0].shape[1:]) != first.shape:
        raise ShapeError(
            f"prompt mask {first.shape} does not match frames "
            f"{tuple(frames[0].shape[1:])}"
        )
    rng = np.random.default_rng(seed)
    result = TrackResult([first.copy()], [1], [1.0], None)
    with T.no_grad():
        f_d, f_s, f16 = tracker.encoder(frames[0])
        out0 = tracker.decoder.decode(f16, None, f_s, f_d)
        prompt_logits = mask_to_logits(first)
        mem0 = tracker.memory_encoder(f16, T.Tensor(prompt_logits))
        bank = MemoryBank(MemoryEntry(0, mem0, out0.p, 1.0),
                          tracker.config.recent_size)
        prev = T.Tensor(prompt_logits)
        for t in range(1, len(frames)):
            f_d, f_s, f16 = tracker.encoder(frames[t])
            f_c = condition_features(f16, bank, tracker.reader, tracker.film,
                                     tracker.memory_config, rng, long_slots)
            out = tracker.decoder.decode(f_c, prev, f_s, f_d)
            sel, idx = select_best_mask(out)
            vis_prob = _sigmoid(float(out.o.data))
            u_sel = float(out.u.data[idx])
            mask = sel.data > 0.0
            if vis_prob < OCC_THRESHOLD:
                mask = np.zeros_like(mask)
            result.masks.append(mask)
            result.visibility.append(int(vis_prob >= OCC_THRESHOLD))
            result.scores.append(u_sel)
            mem = tracker.memory_encoder(f16, sel)
            # archived score is the raw visibility logit: exp() in the
            # long-term roulette then suppresses frames judged occluded
            bank_insert(bank, MemoryEntry(t, mem, out.p, float(out.o.data)))
            prev = sel
    result.bank = bank
    return result


# --------------------------------------------------------------- training

class AdamW:
    """Decoupled weight-decay variant of Adam over a named parameter dict."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p.data = p.data - self.lr * (update + self.wd * p.data)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class TrainResult:
    tracker: PanoTracker
    history: dict


def train_toy(cfg, clips=None):
    """Train a tracker on synthetic clips; returns the model and run record.

    The history dict carries the raw per-epoch loss means, a monotone
    (running-minimum) smoothing of them, and the names of parameters whose
    gradient stayed identically zero through epoch 1.
    """
    grid = ErpGrid(cfg.grid_h, cfg.grid_w)
    tracker = PanoTracker(model_config_from_run(cfg))
    params = tracker.params()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    wparams = WeightParams(w_min=cfg.w_min, w_max=cfg.w_max, alpha=cfg.alpha)
    lw = LossWeights(lambda_bce=cfg.lambda_bce, lambda_dice=cfg.lambda_dice,
                     lambda_iou=cfg.lambda_iou, lambda_occ=cfg.lambda_occ)
    if clips is None:
        clips = [synth_scene(c) for c in
                 training_scene_configs(cfg.n_clips, grid, cfg.n_frames, cfg.seed)]
    for v in clips:
        if len(v) > 100:
            raise TrainingDiverged(f"clip of {len(v)} frames exceeds the cap")
    weight_maps = [
        [generate_weight_map(v.gt[t].astype(bool), grid, wparams)
         for t in range(len(v))]
        for v in clips
    ]

    epoch_losses = []
    touched = set()
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        use_long = epoch > cfg.long_mem_start_epoch
        frame_losses = []
        for ci, video in enumerate(clips):
            rng = np.random.default_rng([cfg.seed, epoch, ci])
            bank = None
            prev = None
            chunk = []

            def flush(where):
                loss = chunk[0] if len(chunk) == 1 else T.concat(
                    [T.reshape(c, (1,)) for c in chunk], axis=0).sum()
                loss = loss * (1.0 / len(chunk))
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at {where}")
                tracker.zero_grads()
                loss.backward()
                if epoch == 1:
                    for name, p in params.items():
                        if p.grad is not None and np.any(p.grad != 0.0):
                            touched.add(name)
                clip_grad_norm(params, GRAD_CLIP_NORM)
                opt.step()
                tracker.zero_grads()
                chunk.clear()

            for t in range(len(video)):
                gt = video.gt[t].astype(bool)
                occ = video.occlusion_gt[t]
                try:
                    loss_t, bank, prev = _train_frame(
                        tracker, cfg, lw, video, weight_maps[ci], t, gt, occ,
                        bank, prev, rng, use_long, warm)
                except ValueError as e:
                    if "non-finite" in str(e):
                        raise TrainingDiverged(
                            f"non-finite values at epoch {epoch}, clip {ci}, "
                            f"frame {t}") from e
                    raise
                frame_losses.append(float(loss_t.data))
                chunk.append(loss_t)
                if len(chunk) == cfg.chunk_len or t == len(video) - 1:
                    flush(f"epoch {epoch}, clip {ci}, frame {t}")
                    bank.detach_()
                    prev = T.Tensor(prev.data.copy())
        epoch_losses.append(float(np.mean(frame_losses)))

    smoothed = list(np.minimum.accumulate(epoch_losses))
    history = {
        "epoch_loss": epoch_losses,
        "smoothed_loss": smoothed,
        "untouched_after_epoch1": sorted(set(params) - touched),
    }
    return TrainResult(tracker, history)


def _train_frame(tracker, cfg, lw, video, wmaps, t, gt, occ, bank, prev, rng,
                 use_long, warm):
    """One training-time frame; returns (loss, bank, next prev-mask cue)."""
    f_d, f_s, f16 = tracker.encoder(video.frames[t])
    if t == 0:
        out = tracker.decoder.decode(f16, None, f_s, f_d)
        loss_t = occlusion_bce(out.o, occ) * lw.lambda_occ
        prompt_logits = mask_to_logits(gt)
        mem = tracker.memory_encoder(f16, T.Tensor(prompt_logits))
        bank = MemoryBank(MemoryEntry(0, mem, out.p, 1.0), cfg.recent_size)
        prev = T.Tensor(prompt_logits)
    else:
        f_c = condition_features(
            f16, bank, tracker.reader, tracker.film, tracker.memory_config,
            rng, long_slots=cfg.long_slots if use_long else 0)
        out = tracker.decoder.decode(f_c, prev, f_s, f_d)
        loss_t, _ = total_loss(out, gt, occ, wmaps[t], lw)
        sel, _ = select_best_mask(out)
        feed_gt = warm or (t % cfg.gt_mem_period == 0)
        cue = T.Tensor(mask_to_logits(gt)) if feed_gt else sel
        mem = tracker.memory_encoder(f16, cue)
        bank_insert(bank, MemoryEntry(t, mem, out.p, float(out.o.data)))
        prev = cue
    return loss_t, bank, prev


# -------------------------------------------------------------- suite eval

def score_suite(tracker, scene_configs, seed=0, long_slots=None):
    """Track every clip of a suite and average J&F over clips."""
    reports = []
    for k, sc in enumerate(scene_configs):
        video = synth_scene(sc)
        result = run_vos(tracker, video, video.gt[0].astype(bool),
                         seed=seed + k, long_slots=long_slots)
        reports.append(evaluate(result.masks, video.gt))
    return {
        "jf": float(np.mean([r.jf for r in reports])),
        "j_mean": float(np.mean([r.j_mean for r in reports])),
        "f_mean": float(np.mean([r.f_mean for r in reports])),
        "reports": reports,
    }


def recovery_j(report, video, scene_config):
    """Mean region score on the frames after the target reappears."""
    t1 = scene_config.target.hidden[1]
    if t1 <= 0 or t1 >= len(video):
        raise ShapeError("scene has no occlusion window inside the clip")
    return float(np.mean(report.per_frame_j[t1:]))
