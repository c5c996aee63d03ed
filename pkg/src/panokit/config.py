"""Flat JSON run configuration with strict schema validation.

One document drives synthesis, training, and tracking. Every key is
optional and falls back to a toy-scale default; unknown keys are rejected
outright so typos cannot silently revert a knob to its default. The schema
ships with the package (schemas/runconfig.schema.json).

The PANOKIT_SEED environment variable, when set, overrides the seed from
any loaded config.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import jsonschema

from .errors import ConfigError

SEED_ENV_VAR = "PANOKIT_SEED"
CLIP_FRAME_CAP = 100


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # scene synthesis
    grid_h: int = 128
    n_frames: int = 24
    n_clips: int = 6
    scene: str = "train"
    # model
    d_feat: int = 32
    d_p: int = 32
    d_m: int = 32
    attn_rounds: int = 1
    long_slots: int = 2
    recent_size: int = 6
    pad_mode: str = "wrap"
    # loss weighting
    w_min: float = 0.5
    w_max: float = 2.0
    alpha: float = 0.5
    lambda_bce: float = 0.5
    lambda_dice: float = 0.5
    lambda_iou: float = 1.0
    lambda_occ: float = 0.1
    # training schedule
    epochs: int = 8
    lr: float = 2e-4
    weight_decay: float = 0.01
    warmup_epochs: int = 2
    gt_mem_period: int = 8
    long_mem_start: int = -1  # -1 means epochs // 4
    chunk_len: int = 8

    def __post_init__(self):
        if self.grid_h % 16 != 0:
            raise ConfigError(f"grid_h must be divisible by 16, got {self.grid_h}")
        if self.n_frames > CLIP_FRAME_CAP:
            raise ConfigError(
                f"n_frames {self.n_frames} exceeds the {CLIP_FRAME_CAP}-frame cap"
            )
        if not self.w_min <= self.w_max:
            raise ConfigError(f"w_min {self.w_min} > w_max {self.w_max}")
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs exceeds epochs")
        if self.scene not in ("train", "seam", "occlusion"):
            raise ConfigError(f"unknown scene kind {self.scene!r}")

    @property
    def grid_w(self):
        return 2 * self.grid_h

    @property
    def long_mem_start_epoch(self):
        return self.epochs // 4 if self.long_mem_start < 0 else self.long_mem_start

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _schema():
    ref = resources.files("panokit").joinpath("schemas/runconfig.schema.json")
    return json.loads(ref.read_text(encoding="ascii"))


def config_from_dict(doc):
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid run config: {e.message}") from e
    try:
        cfg = RunConfig(**doc)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from None
        cfg = RunConfig(**{**asdict(cfg), "seed": seed})
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    return config_from_dict(doc)


def known_keys():
    return tuple(f.name for f in fields(RunConfig))
