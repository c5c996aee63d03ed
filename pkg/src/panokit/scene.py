"""Synthetic panoramic video with analytic ground truth.

A scene is a textured sphere rendered to ERP. The target is a colored
spherical cap riding a great circle. Each clip draws its own colors and the
target's color ramps over the clip, so a tracker cannot memorize one
appearance: it has to read the object's current look from the prompt and
from memory. Distractor caps either wear a clearly different hue (identity
stays decidable from appearance) or, after an occlusion window, the
target's stale frame-0 color (identity then hinges on appearance recorded
just before the window). An optional hidden window makes a cap vanish
(empty ground truth, visibility 0) for several frames. The smooth
background texture is a fixed function of direction, giving the model a
positional anchor.

Frames are quantized to 8 bits at generation time so that image files
round-trip exactly.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass

import numpy as np

from .geometry import ErpGrid, grid_unit_vectors, unit_vectors


@dataclass(frozen=True)
class ObjectSpec:
    """A cap on a great-circle path.

    heading is the initial direction of motion at the start point, measured
    from due east toward due north; speed is radians per frame. The hidden
    half-open window [t0, t1) removes the object from both image and ground
    truth. color is the frame-0 color; when color_end is set, the rendered
    color ramps linearly from color to color_end, reaching color_end at
    frame color_ramp_end (clip end when unset) and holding it afterwards.
    """

    radius: float
    lon0: float
    lat0: float
    heading: float = 0.0
    speed: float = 0.05
    color: tuple = (0.95, 0.88, 0.25)
    color_end: tuple = None
    color_ramp_end: int = None
    hidden: tuple = (0, 0)

    def __post_init__(self):
        if not (0.0 < self.radius < math.pi / 4):
            raise ValueError(f"cap radius {self.radius} outside (0, pi/4)")
        if self.color_ramp_end is not None and self.color_ramp_end < 1:
            raise ValueError("color_ramp_end must be >= 1")
        if self.hidden[1] < self.hidden[0]:
            raise ValueError("hidden window must satisfy t0 <= t1")
        for c in (self.color,) if self.color_end is None else (
                self.color, self.color_end):
            if len(c) != 3 or min(c) < 0.0 or max(c) > 1.0:
                raise ValueError(f"color {c} outside the RGB unit cube")

    def center(self, t):
        """Unit vector of the cap center at frame t."""
        s = unit_vectors(self.lon0, self.lat0)
        east = np.array([-math.sin(self.lon0), math.cos(self.lon0), 0.0])
        north = np.cross(s, east)
        d = math.cos(self.heading) * east + math.sin(self.heading) * north
        ang = self.speed * t
        return math.cos(ang) * s + math.sin(ang) * d

    def color_at(self, t, n_frames):
        """Rendered RGB at frame t of an n_frames clip."""
        c0 = np.asarray(self.color, dtype=float)
        if self.color_end is None or n_frames < 2:
            return c0
        last = n_frames - 1 if self.color_ramp_end is None else self.color_ramp_end
        frac = min(t / last, 1.0)
        return c0 + (np.asarray(self.color_end, dtype=float) - c0) * frac

    def visible(self, t):
        return not (self.hidden[0] <= t < self.hidden[1])


@dataclass(frozen=True)
class SceneConfig:
    grid: ErpGrid
    n_frames: int
    target: ObjectSpec
    distractors: tuple = ()
    bg_seed: int = 0
    bg_contrast: float = 0.10

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a scene needs at least 2 frames")


@dataclass
class VideoSequence:
    grid: ErpGrid
    frames: list   # [3, H, W] float64 in [0, 1]
    gt: list       # [H, W] uint8
    occlusion_gt: list  # int 0/1 per frame

    def __post_init__(self):
        if not (len(self.frames) == len(self.gt) == len(self.occlusion_gt)):
            raise ValueError("frame, mask, and visibility lists must align")

    def __len__(self):
        return len(self.frames)


def _background(grid, seed, contrast):
    rng = np.random.default_rng(seed)
    v = grid_unit_vectors(grid)
    img = np.empty((3,) + grid.shape)
    for c in range(3):
        acc = np.zeros(grid.shape)
        for _ in range(6):
            w = rng.normal(size=3) * rng.uniform(2.0, 6.0)
            acc += np.cos(v @ w + rng.uniform(0, 2 * math.pi))
        img[c] = 0.45 + contrast * acc / 6.0
    return img


def _cap(v, center, radius):
    return v @ center >= math.cos(radius)


def synth_scene(config, seed=None):
    """Render a scene to frames plus analytic masks and visibility flags.

    A seed, when given, overrides the config's background seed; rendering is
    otherwise a pure function of the config.
    """
    grid = config.grid
    v = grid_unit_vectors(grid)
    bg_seed = config.bg_seed if seed is None else seed
    base = _background(grid, bg_seed, config.bg_contrast)
    frames, gts, occs = [], [], []
    for t in range(config.n_frames):
        img = base.copy()
        for d in config.distractors:
            if d.visible(t):
                m = _cap(v, d.center(t), d.radius)
                img[:, m] = d.color_at(t, config.n_frames)[:, None]
        if config.target.visible(t):
            m = _cap(v, config.target.center(t), config.target.radius)
            img[:, m] = config.target.color_at(t, config.n_frames)[:, None]
            gts.append(m.astype(np.uint8))
            occs.append(1)
        else:
            gts.append(np.zeros(grid.shape, dtype=np.uint8))
            occs.append(0)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        frames.append(img)
    return VideoSequence(grid, frames, gts, occs)


def _hsv_color(rng, hue):
    """Bright saturated RGB at the given hue (wrapped into [0, 1))."""
    return colorsys.hsv_to_rgb(hue % 1.0, rng.uniform(0.75, 1.0),
                               rng.uniform(0.80, 0.95))


def _hue_gap(h, lo, width):
    """Circular distance from hue h to the hue interval [lo, lo+width]."""
    u = (h - lo) % 1.0
    if u <= width:
        return 0.0
    return min(u - width, 1.0 - u)


def _drifting_colors(rng):
    """Start hue, signed hue drift, and the matching start/end colors."""
    hue0 = rng.uniform(0.0, 1.0)
    dh = rng.uniform(0.25, 0.40) * (1 if rng.random() < 0.5 else -1)
    return hue0, dh, _hsv_color(rng, hue0), _hsv_color(rng, hue0 + dh)


def _companion_hue(rng, hue0, dh, margin=1.0 / 6.0):
    """A hue at circular distance >= margin from the whole drift span."""
    lo = min(hue0, hue0 + dh) % 1.0
    while True:
        h = rng.uniform(0.0, 1.0)
        if _hue_gap(h, lo, abs(dh)) >= margin:
            return h


def _hue_companion(rng, target, hue0, dh, offset_sign):
    """A same-size cap in a clearly different hue roaming near the target;
    appearance, not size or position, is what tells them apart."""
    return ObjectSpec(
        radius=target.radius,
        lon0=target.lon0 + offset_sign * rng.uniform(1.0, 1.6),
        lat0=float(np.clip(target.lat0 + rng.uniform(-0.4, 0.4), -0.9, 0.9)),
        heading=rng.uniform(-0.5, 0.5),
        speed=rng.uniform(0.03, 0.07) * (1 if rng.random() < 0.5 else -1),
        color=_hsv_color(rng, _companion_hue(rng, hue0, dh)),
    )


def _stale_impostor(rng, target, t1, east):
    """A same-size cap wearing the target's frame-0 color, popping in at
    the very frame the target returns, well away from its path on the side
    opposite its motion. The hidden window stays completely empty, so the
    memory bank records nothing that would rule the impostor out; at
    reappearance the impostor matches the prompt appearance exactly while
    the target matches the appearance archived before the window."""
    return ObjectSpec(
        radius=target.radius,
        lon0=target.lon0 - east * rng.uniform(1.2, 1.8),
        lat0=float(np.clip(target.lat0 + rng.uniform(-0.25, 0.25), -0.9, 0.9)),
        heading=rng.uniform(-0.3, 0.3),
        speed=rng.uniform(0.015, 0.035) * (1 if rng.random() < 0.5 else -1),
        color=target.color,
        hidden=(0, t1),
    )


def training_scene_configs(n_clips, grid, n_frames, seed):
    """Clips whose target never approaches the seam.

    Longitudes stay within about +/-2.5 rad, so a model that cannot see
    across the seam is never penalized during training; only held-out seam
    clips expose the difference. Every clip draws fresh start and end colors
    for the target. Even clips add an always-visible different-hue
    companion; odd clips hide the target for a stretch longer than the
    recent-memory window while a stale-color impostor pops in, so
    re-acquiring the right cap afterwards requires recently recorded
    appearance, not the prompt appearance alone.
    """
    rng = np.random.default_rng(seed)
    configs = []
    for k in range(n_clips):
        east = 1 if rng.random() < 0.5 else -1
        speed = rng.uniform(0.055, 0.085) * east
        span = abs(speed) * n_frames
        lon0 = rng.uniform(-1.0, 1.0) - east * span / 2
        hue0, dh, c0, c1 = _drifting_colors(rng)
        hidden = (0, 0)
        occluded = k % 2 == 1
        if occluded:
            t0 = int(rng.integers(6, max(7, n_frames - 12)))
            hidden = (t0, t0 + int(rng.integers(7, 10)))
        target = ObjectSpec(
            radius=rng.uniform(0.20, 0.30),
            lon0=lon0,
            lat0=rng.uniform(-0.45, 0.45),
            heading=rng.uniform(-0.45, 0.45),
            speed=speed,
            color=c0,
            color_end=c1,
            # fully drifted well before the hide frame: post-window frames
            # then match most pre-window archive entries exactly, never the
            # prompt
            color_ramp_end=max(2, hidden[0] - 4) if occluded else None,
            hidden=hidden,
        )
        other = (_stale_impostor(rng, target, hidden[1], east) if occluded
                 else _hue_companion(rng, target, hue0, dh, -east))
        configs.append(SceneConfig(
            grid=grid, n_frames=n_frames, target=target, distractors=(other,),
            bg_seed=int(rng.integers(1 << 30)),
        ))
    return configs


def seam_scene_configs(n_clips, grid, n_frames, seed):
    """Held-out clips whose target crosses the 0/360 seam mid-clip.

    The target is alone: these clips isolate continuity of tracking through
    the horizontal wrap, with fresh colors. Appearance discrimination is
    stressed elsewhere, by the companion and impostor clips.
    """
    rng = np.random.default_rng(seed)
    configs = []
    for _ in range(n_clips):
        east = 1 if rng.random() < 0.5 else -1
        speed = rng.uniform(0.055, 0.085) * east
        span = abs(speed) * n_frames
        _, _, c0, c1 = _drifting_colors(rng)
        target = ObjectSpec(
            radius=rng.uniform(0.20, 0.30),
            # start half a sweep short of the seam so it is crossed mid-clip
            lon0=math.copysign(math.pi, east) - east * span / 2,
            lat0=rng.uniform(-0.35, 0.35),
            heading=rng.uniform(-0.3, 0.3),
            speed=speed,
            color=c0,
            color_end=c1,
        )
        configs.append(SceneConfig(
            grid=grid, n_frames=n_frames, target=target,
            bg_seed=int(rng.integers(1 << 30)),
        ))
    return configs


def occlusion_scene_configs(n_clips, grid, n_frames, seed):
    """Off-seam clips testing re-identification after a long occlusion.

    The target's color finishes drifting a few frames before it hides, and
    it stays hidden for 9 frames, longer than the recent-memory window. The
    window itself is empty; at the frame the target returns, an impostor
    wearing its frame-0 color pops in far from its path, so two未 caps appear
    at once. The target's color matches nearly every archived entry; the
    impostor's matches the prompt. A reader limited to the prompt entry is
    pulled to the impostor; archive samples identify the target.
    """
    rng = np.random.default_rng(seed)
    configs = []
    for _ in range(n_clips):
        east = 1 if rng.random() < 0.5 else -1
        speed = rng.uniform(0.055, 0.08) * east
        span = abs(speed) * n_frames
        t0 = int(rng.integers(8, 11))
        _, _, c0, c1 = _drifting_colors(rng)
        target = ObjectSpec(
            radius=rng.uniform(0.20, 0.30),
            lon0=rng.uniform(-0.8, 0.8) - east * span / 2,
            lat0=rng.uniform(-0.4, 0.4),
            heading=rng.uniform(-0.3, 0.3),
            speed=speed,
            color=c0,
            color_end=c1,
            color_ramp_end=max(2, t0 - 4),
            hidden=(t0, t0 + 9),
        )
        configs.append(SceneConfig(
            grid=grid, n_frames=n_frames, target=target,
            distractors=(_stale_impostor(rng, target, t0 + 9, east),),
            bg_seed=int(rng.integers(1 << 30)),
        ))
    return configs
