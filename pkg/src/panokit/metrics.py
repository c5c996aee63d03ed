"""Region and boundary quality for panoramic mask sequences.

Region score J is intersection over union. Boundary score F is the harmonic
mean of boundary precision and recall, where a boundary pixel counts as
matched if the nearest boundary pixel of the other mask lies within a
tolerance that scales with the image diagonal.

Boundaries are extracted with horizontal wrap-around: the left neighbor of
column 0 is column W-1, so a mask spanning the 0/360 seam has no spurious
boundary there. Vertically, pixels beyond the top and bottom rows count as
background. Pixel distances used for matching also wrap horizontally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .losses import true_iou

# fraction of the image diagonal used as the boundary matching tolerance
BOUNDARY_TOLERANCE_FRACTION = 0.008


@dataclass
class MetricsReport:
    per_frame_j: list
    per_frame_f: list
    j_mean: float
    f_mean: float
    jf: float


def boundary_map(mask, wrap=True):
    """Foreground pixels with at least one 4-neighbor outside the mask."""
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    if wrap:
        left = np.roll(m, 1, axis=1)
        right = np.roll(m, -1, axis=1)
    else:
        left = np.zeros_like(m)
        left[:, 1:] = m[:, :-1]
        right = np.zeros_like(m)
        right[:, :-1] = m[:, 1:]
    up = np.zeros_like(m)
    up[1:] = m[:-1]
    down = np.zeros_like(m)
    down[:-1] = m[1:]
    return m & ~(left & right & up & down)


def boundary_tolerance(h, w):
    return int(math.ceil(BOUNDARY_TOLERANCE_FRACTION * math.hypot(h, w)))


def _matched_fraction(src, ref, w, tol, wrap):
    """Fraction of src boundary pixels within tol of some ref boundary pixel."""
    if len(src) == 0:
        return 0.0
    di = src[:, 0][:, None] - ref[None, :, 0]
    dj = np.abs(src[:, 1][:, None] - ref[None, :, 1])
    if wrap:
        dj = np.minimum(dj, w - dj)
    d2 = di * di + dj * dj
    return float(np.mean(d2.min(axis=1) <= tol * tol))


def boundary_f(pred, gt, wrap=True, tolerance=None):
    """Boundary F-measure between two binary masks of equal shape."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    h, w = pred.shape
    tol = boundary_tolerance(h, w) if tolerance is None else tolerance
    pb = np.argwhere(boundary_map(pred, wrap=wrap))
    gb = np.argwhere(boundary_map(gt, wrap=wrap))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    precision = _matched_fraction(pb, gb, w, tol, wrap)
    recall = _matched_fraction(gb, pb, w, tol, wrap)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate(preds, gts, wrap=True):
    """Score a predicted mask sequence against ground truth.

    Frame 0 carries the prompt, so it appears in the per-frame lists but is
    excluded from the means.
    """
    if len(preds) != len(gts):
        raise ShapeError(f"got {len(preds)} predictions for {len(gts)} frames")
    if len(preds) < 2:
        raise ShapeError("need at least 2 frames to evaluate")
    js, fs = [], []
    for p, g in zip(preds, gts):
        p = np.asarray(p).astype(bool)
        g = np.asarray(g).astype(bool)
        if p.shape != g.shape:
            raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
        js.append(true_iou(p, g))
        fs.append(boundary_f(p, g, wrap=wrap))
    j_mean = float(np.mean(js[1:]))
    f_mean = float(np.mean(fs[1:]))
    return MetricsReport(js, fs, j_mean, f_mean, (j_mean + f_mean) / 2.0)
