"""Distortion-guided pixel weighting and the training objective.

The weight map gives foreground pixels a class-balance weight and decays
background pixels from that value down to its reciprocal as their distance
to the object grows. Weights are produced inside the object's perspective
window (where distortion is low) and painted back onto the panorama.

The total objective combines an IoU-regression term, the weighted mask BCE,
dice overlap, and occlusion-flag BCE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import EmptyMaskError, ShapeError
from .geometry import NEAREST, bfov_project, bfov_unproject, distance_transform, estimate_bfov

DICE_EPS = 1.0


@dataclass(frozen=True)
class WeightParams:
    """Bounds and decay power for the distortion-guided weights."""

    w_min: float = 0.5
    w_max: float = 2.0
    alpha: float = 0.5
    window: int = 64
    margin: float = 1.2

    def __post_init__(self):
        if not (0.0 < self.w_min <= 1.0 <= self.w_max):
            raise ValueError("need 0 < w_min <= 1 <= w_max")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.window < 2:
            raise ValueError("window must be at least 2 pixels")


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 0.5
    lambda_dice: float = 0.5
    lambda_iou: float = 1.0
    lambda_occ: float = 0.1

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class WeightMap:
    """Per-pixel positive loss weights; empty_gt marks absent-object frames."""

    data: np.ndarray
    empty_gt: bool = False


def clipped_fg_weight(fg_count, bg_count, params):
    """Foreground weight: background/foreground pixel ratio, clamped."""
    if fg_count <= 0:
        raise EmptyMaskError("foreground weight needs at least one foreground pixel")
    return float(np.clip(bg_count / fg_count, params.w_min, params.w_max))


def bg_weight(d, d_max, w_f, alpha):
    """Background weight decaying from w_f at the boundary to 1/w_f far away.

    Returns 1/w_f + (w_f - 1/w_f) * (1 - d/d_max)^alpha; when every
    background pixel touches the boundary (d_max == 0) the weight is w_f.
    """
    d = np.asarray(d, dtype=np.float64)
    if d_max == 0:
        return np.full_like(d, w_f) if d.ndim else float(w_f)
    w_b = 1.0 / w_f
    out = w_b + (w_f - w_b) * (1.0 - d / d_max) ** alpha
    return out if d.ndim else float(out)


def window_weights(win_mask, params):
    """Per-pixel weights inside the perspective window (the Alg-style core).

    Foreground pixels sit at distance 0 and therefore get exactly w_f.
    """
    fg = np.asarray(win_mask) > 0
    if not fg.any():
        raise EmptyMaskError("window contains no foreground")
    w_f = clipped_fg_weight(int(fg.sum()), int((~fg).sum()), params)
    df = distance_transform(fg)
    return bg_weight(df.data, df.d_max, w_f, params.alpha), w_f


def generate_weight_map(gt_mask, grid, params=WeightParams()):
    """Distortion-guided weight map on the full panorama.

    Pipeline: fit a view window to the mask, project the mask into it,
    compute boundary-distance weights there, paint them back, and fill the
    outside-window region with the window's minimum weight. Frames with an
    empty ground-truth mask get a uniform map of 1.0, flagged, so occluded
    frames keep a defined loss.
    """
    mask = np.asarray(gt_mask)
    if mask.shape != grid.shape:
        raise ShapeError(f"mask {mask.shape} does not match grid {grid.shape}")
    if not mask.any():
        return WeightMap(np.ones(grid.shape), empty_gt=True)
    bfov = estimate_bfov(mask, grid, params.margin)
    win_mask = bfov_project(mask.astype(np.float64), bfov,
                            params.window, params.window, NEAREST) > 0.5
    if not win_mask.any():
        # sub-pixel object lost to window quantization; weight uniformly
        return WeightMap(np.ones(grid.shape), empty_gt=True)
    w_sr, _ = window_weights(win_mask, params)
    out = bfov_unproject(w_sr, bfov, grid, fill=0.0)
    out[out == 0.0] = w_sr.min()
    return WeightMap(out, empty_gt=False)


def weighted_bce(logits, gt, weight_map):
    """Mean of weight * BCE(sigmoid(logit), gt); differentiable in logits."""
    w = weight_map.data if isinstance(weight_map, WeightMap) else np.asarray(weight_map)
    gt = np.asarray(gt, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("loss weights must be strictly positive")
    return T.weighted_bce_logits(logits, gt, w)


def dice_loss(probs, gt):
    """1 - soft dice overlap with +1 smoothing; differentiable in probs."""
    probs = probs if isinstance(probs, T.Tensor) else T.Tensor(probs)
    if probs.data.min() < -1e-9 or probs.data.max() > 1 + 1e-9:
        raise ValueError("dice expects probabilities in [0, 1]")
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != probs.data.shape:
        raise ShapeError(f"gt {gt.shape} does not match probs {probs.data.shape}")
    inter = (probs * T.Tensor(gt)).sum()
    denom = probs.sum() + float(gt.sum())
    return 1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def iou_mse(u_pred, u_true):
    """Mean squared error between predicted and actual IoU triples."""
    u_pred = u_pred if isinstance(u_pred, T.Tensor) else T.Tensor(u_pred)
    u_true = np.asarray(u_true, dtype=np.float64)
    if u_true.shape != u_pred.data.shape:
        raise ShapeError("IoU target shape mismatch")
    return ((u_pred - T.Tensor(u_true)) ** 2.0).mean()


def occlusion_bce(o_logit, o_gt):
    """Plain BCE on the visibility logit."""
    o_logit = o_logit if isinstance(o_logit, T.Tensor) else T.Tensor(o_logit)
    target = np.full_like(o_logit.data, float(o_gt))
    return T.weighted_bce_logits(o_logit, target)


def true_iou(mask_a, mask_b):
    """Intersection over union of two binary masks; both empty counts as 1."""
    a = np.asarray(mask_a) > 0
    b = np.asarray(mask_b) > 0
    if a.shape != b.shape:
        raise ShapeError("IoU needs masks on the same grid")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def total_loss(out, gt_mask, occ_gt, weight_map, lw=LossWeights()):
    """Full objective on one frame's decoder output.

    The mask terms (weighted BCE + dice) apply to the mask whose predicted
    IoU is highest (ties to the lowest index); the IoU regression targets
    are actual IoUs of the hard-thresholded candidate masks against gt.
    Returns the scalar loss tensor plus a float breakdown for logging.
    """
    gt = np.asarray(gt_mask, dtype=np.float64)
    y = out.y_sam
    if y.data.ndim != 3 or y.data.shape[0] != out.u.data.shape[0]:
        raise ShapeError("decoder output shapes are inconsistent")
    if gt.shape != y.data.shape[1:]:
        raise ShapeError(f"gt {gt.shape} does not match masks {y.data.shape[1:]}")

    u_gt = np.array([true_iou(y.data[k] > 0, gt) for k in range(y.data.shape[0])])
    idx = int(np.argmax(out.u.data))  # np.argmax already breaks ties low
    y_sel = y[idx]

    l_iou = iou_mse(out.u, u_gt)
    l_bce = weighted_bce(y_sel, gt, weight_map)
    l_dice = dice_loss(T.sigmoid(y_sel), gt)
    l_occ = occlusion_bce(out.o, occ_gt)
    loss = (lw.lambda_iou * l_iou + lw.lambda_bce * l_bce
            + lw.lambda_dice * l_dice + lw.lambda_occ * l_occ)
    parts = {"iou": l_iou.item(), "bce": l_bce.item(),
             "dice": l_dice.item(), "occ": l_occ.item(), "selected": idx}
    return loss, parts
