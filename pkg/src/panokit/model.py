"""Model assembly: image encoder plus decoder/memory wiring.

Channel widths derive from d_feat: the stride-4 and stride-8 skip features
carry d_feat/4 and d_feat/2 channels so the decoder's upsampling path can add
them directly. One mask downsampler instance is shared by the previous-mask
fuser and the memory encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderConfig, MaskDecoder, MaskDownsampler, WrapConvBlock, _zeros
from .errors import ShapeError
from .memory import FilmGenerator, MemoryConfig, MemoryEncoder, MemoryReader


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 64
    d_p: int = 64
    d_m: int = 64
    attn_rounds: int = 2
    long_slots: int = 2
    recent_size: int = 6
    pad_mode: str = T.WRAP
    seed: int = 0

    def __post_init__(self):
        if self.pad_mode not in (T.WRAP, T.ZERO):
            raise ValueError(f"unknown pad mode {self.pad_mode!r}")


class Encoder:
    """Strided convolution pyramid over [3, H, W] images in [0, 1].

    Returns features at stride 4, 8, and 16. Horizontal padding follows the
    model-wide pad mode so the seam behaviour is consistent end to end.
    """

    def __init__(self, d_feat, rng, pad_mode=T.WRAP):
        c_d, c_s = d_feat // 4, d_feat // 2
        self.pad_mode = pad_mode
        chans = [3, c_d, c_d, c_s, d_feat]
        self.kernels = []
        self.biases = []
        for i in range(4):
            scale = math.sqrt(2.0 / (chans[i] * 9))
            self.kernels.append(T.Tensor(
                rng.normal(0.0, scale, size=(chans[i + 1], chans[i], 3, 3)),
                requires_grad=True))
            self.biases.append(_zeros(chans[i + 1]))
        self.block = WrapConvBlock(d_feat, rng, pad_mode)

    def __call__(self, image):
        x = image if isinstance(image, T.Tensor) else T.Tensor(image)
        if x.data.ndim != 3 or x.data.shape[0] != 3:
            raise ShapeError("encoder expects a [3, H, W] image")
        if x.data.shape[1] % 16 or x.data.shape[2] % 16:
            raise ShapeError("image sides must be divisible by 16")
        x = x * 2.0 - 1.0
        feats = []
        for k, b in zip(self.kernels, self.biases):
            x = T.relu(T.conv2d(x, k, b, T.PadSpec(self.pad_mode, 1), stride=2))
            feats.append(x)
        f16 = self.block(feats[3])
        return feats[1], feats[2], f16  # stride 4, 8, 16

    def params(self, prefix):
        out = {}
        for i in range(4):
            out[f"{prefix}.k{i}"] = self.kernels[i]
            out[f"{prefix}.b{i}"] = self.biases[i]
        out.update(self.block.params(f"{prefix}.block"))
        return out


class PanoTracker:
    """Everything trainable in one place, constructed deterministically from
    the config seed."""

    def __init__(self, config=ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        pad = config.pad_mode
        self.encoder = Encoder(config.d_feat, rng, pad)
        self.downsampler = MaskDownsampler(config.d_m, rng, pad)
        self.decoder = MaskDecoder(
            DecoderConfig(config.d_feat, config.d_p, config.attn_rounds),
            self.downsampler, rng, pad)
        self.memory_encoder = MemoryEncoder(config.d_feat, config.d_m,
                                            self.downsampler, rng, pad)
        self.reader = MemoryReader(config.d_feat, config.d_m, config.d_p, rng)
        self.film = FilmGenerator(config.d_p, config.d_m, rng)
        self.memory_config = MemoryConfig(config.d_m, config.long_slots,
                                          config.recent_size)

    def params(self):
        out = self.encoder.params("enc")
        out.update(self.downsampler.params("down"))
        out.update(self.decoder.params("dec"))
        out.update(self.memory_encoder.params("memenc"))
        out.update(self.reader.params("reader"))
        out.update(self.film.params("film"))
        return out

    def zero_grads(self):
        for p in self.params().values():
            p.grad = None

    def load_arrays(self, arrays):
        """Overwrite parameter values from {name: ndarray}; strict match."""
        params = self.params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(
                f"parameter mismatch: missing {sorted(missing)[:4]}, "
                f"unexpected {sorted(extra)[:4]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr
