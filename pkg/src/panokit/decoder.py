"""Seam-aware mask decoder.

Every convolution that touches the width axis pads cyclically, so features
computed at the left image edge see the right edge and vice versa; the whole
decode path commutes with horizontal cyclic shifts. Spatial features carry
no positional encoding (that property would break otherwise); only the
learned query tokens are position-free embeddings.

The decoder follows the promptable-segmentation layout: memory-conditioned
features are fused with the previous frame's mask, refined by two-way token
attention, upsampled with skip connections, and read out by three mask
heads, an IoU-ranking head, an occlusion head, and a pointer head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError

N_MASKS = 3


@dataclass(frozen=True)
class DecoderConfig:
    d_feat: int = 64
    d_p: int = 64
    attn_rounds: int = 2

    def __post_init__(self):
        if self.d_feat % 4 != 0:
            raise ValueError("d_feat must be divisible by 4")
        if self.attn_rounds < 1:
            raise ValueError("need at least one attention round")

    @property
    def c_s(self):
        return self.d_feat // 2

    @property
    def c_d(self):
        return self.d_feat // 4


@dataclass
class DecoderOutput:
    """Per-frame head outputs: 3 mask logit maps, their predicted IoUs in
    [0,1], a visibility logit, and the compact object pointer."""

    y_sam: T.Tensor  # [3, H, W]
    u: T.Tensor      # [3]
    o: T.Tensor      # scalar
    p: T.Tensor      # [d_p]


def _conv_w(rng, cout, cin, k):
    scale = math.sqrt(2.0 / (cin * k * k))
    return T.Tensor(rng.normal(0.0, scale, size=(cout, cin, k, k)), requires_grad=True)


def _dense_w(rng, dout, din, scale=None):
    if scale is None:
        scale = math.sqrt(1.0 / din)
    return T.Tensor(rng.normal(0.0, scale, size=(dout, din)), requires_grad=True)


def _zeros(*shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


def squash_logits(logits):
    """Map mask logits into (-1, 1) with tanh(l/2); zero stays zero.

    Ground-truth masks enter the same pathways as predicted logits, so
    callers convert {0,1} masks with mask_to_logits first; after the squash
    both look like confident predictions of comparable scale.
    """
    x = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
    return T.tanh(x * 0.5)


def mask_to_logits(mask):
    """Binary mask to saturated pseudo-logits (+8 fg / -8 bg)."""
    return np.asarray(mask, dtype=np.float64) * 16.0 - 8.0


class WrapConvBlock:
    """Three parallel convolutions (1x1, 3x3, 5x5) fused by a 1x1 projection,
    plus a residual. The 3x3 and 5x5 branches pad cyclically along the width
    (or with zeros, for the seam-blind ablation)."""

    def __init__(self, c, rng, pad_mode=T.WRAP):
        self.pad_mode = pad_mode
        self.k1, self.b1 = _conv_w(rng, c, c, 1), _zeros(c)
        self.k3, self.b3 = _conv_w(rng, c, c, 3), _zeros(c)
        self.k5, self.b5 = _conv_w(rng, c, c, 5), _zeros(c)
        self.fuse_k, self.fuse_b = _conv_w(rng, c, 3 * c, 1), _zeros(c)

    def __call__(self, f):
        c = self.k1.data.shape[0]
        if f.data.shape[0] != c:
            raise ShapeError(f"block expects {c} channels, got {f.data.shape[0]}")
        branches = T.concat([
            T.conv2d(f, self.k1, self.b1, T.PadSpec(T.ZERO, 0)),
            T.conv2d(f, self.k3, self.b3, T.PadSpec(self.pad_mode, 1)),
            T.conv2d(f, self.k5, self.b5, T.PadSpec(self.pad_mode, 2)),
        ], axis=0)
        return T.conv2d(branches, self.fuse_k, self.fuse_b, T.PadSpec(T.ZERO, 0)) + f

    def params(self, prefix):
        return {f"{prefix}.k1": self.k1, f"{prefix}.b1": self.b1,
                f"{prefix}.k3": self.k3, f"{prefix}.b3": self.b3,
                f"{prefix}.k5": self.k5, f"{prefix}.b5": self.b5,
                f"{prefix}.fuse_k": self.fuse_k, f"{prefix}.fuse_b": self.fuse_b}


class MaskDownsampler:
    """Four stride-2 convolutions taking a full-resolution mask (as logits)
    to stride-16 features. Shared between the previous-mask fuser and the
    memory encoder."""

    def __init__(self, c_out, rng, pad_mode=T.WRAP):
        self.pad_mode = pad_mode
        chans = [1, max(c_out // 8, 2), max(c_out // 4, 4), max(c_out // 2, 8), c_out]
        self.kernels = [_conv_w(rng, chans[i + 1], chans[i], 3) for i in range(4)]
        self.biases = [_zeros(chans[i + 1]) for i in range(4)]

    def __call__(self, logits):
        x = logits if isinstance(logits, T.Tensor) else T.Tensor(logits)
        if x.data.ndim != 2:
            raise ShapeError("mask downsampler expects a [H, W] map")
        h, w = x.data.shape
        if h % 16 or w % 16:
            raise ShapeError(f"mask size {h}x{w} must be divisible by 16")
        x = T.reshape(squash_logits(x), (1, h, w))
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            x = T.conv2d(x, k, b, T.PadSpec(self.pad_mode, 1), stride=2)
            if i < 3:
                x = T.relu(x)
        return x

    def params(self, prefix):
        out = {}
        for i in range(4):
            out[f"{prefix}.k{i}"] = self.kernels[i]
            out[f"{prefix}.b{i}"] = self.biases[i]
        return out


class PrevMaskFuser:
    """Concatenate block-processed features with the downsampled previous
    mask and fuse with a 1x1 convolution; a learned embedding stands in for
    the mask on the first frame."""

    def __init__(self, d_feat, downsampler, rng, pad_mode=T.WRAP):
        self.block = WrapConvBlock(d_feat, rng, pad_mode)
        self.down = downsampler
        c_m = downsampler.kernels[-1].data.shape[0]
        self.no_mask = T.Tensor(rng.normal(0.0, 0.1, size=c_m), requires_grad=True)
        self.fuse_k = _conv_w(rng, d_feat, d_feat + c_m, 1)
        self.fuse_b = _zeros(d_feat)

    def __call__(self, f_mem, prev_logits):
        h, w = f_mem.data.shape[1], f_mem.data.shape[2]
        fx = self.block(f_mem)
        if prev_logits is None:
            c_m = self.no_mask.data.shape[0]
            ones = T.Tensor(np.ones((c_m, h, w)))
            m = ones * T.reshape(self.no_mask, (c_m, 1, 1))
        else:
            m = self.down(prev_logits)
            if m.data.shape[1:] != (h, w):
                raise ShapeError("downsampled mask does not match feature grid")
        return T.conv2d(T.concat([fx, m], axis=0), self.fuse_k, self.fuse_b,
                        T.PadSpec(T.ZERO, 0))

    def params(self, prefix):
        out = self.block.params(f"{prefix}.block")
        out[f"{prefix}.no_mask"] = self.no_mask
        out[f"{prefix}.fuse_k"] = self.fuse_k
        out[f"{prefix}.fuse_b"] = self.fuse_b
        return out


class Attention:
    """Single-head pre-norm attention: queries from one token set, keys and
    values from another (or the same, for self-attention)."""

    def __init__(self, d, rng):
        self.wq = _dense_w(rng, d, d)
        self.wk = _dense_w(rng, d, d)
        self.wv = _dense_w(rng, d, d)
        self.wo = _dense_w(rng, d, d)
        self.bq, self.bk, self.bv, self.bo = (_zeros(d) for _ in range(4))
        self.ln_q_g, self.ln_q_b = _init_ln(d)
        self.ln_kv_g, self.ln_kv_b = _init_ln(d)
        self.scale = 1.0 / math.sqrt(d)

    def __call__(self, q_in, kv_in):
        q = T.dense(T.layer_norm(q_in, self.ln_q_g, self.ln_q_b), self.wq, self.bq)
        kv = T.layer_norm(kv_in, self.ln_kv_g, self.ln_kv_b)
        k = T.dense(kv, self.wk, self.bk)
        v = T.dense(kv, self.wv, self.bv)
        att = T.softmax(T.matmul(q, T.transpose(k)) * self.scale, axis=-1)
        out = T.dense(T.matmul(att, v), self.wo, self.bo)
        return q_in + out

    def params(self, prefix):
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo,
                f"{prefix}.bq": self.bq, f"{prefix}.bk": self.bk,
                f"{prefix}.bv": self.bv, f"{prefix}.bo": self.bo,
                f"{prefix}.lnq_g": self.ln_q_g, f"{prefix}.lnq_b": self.ln_q_b,
                f"{prefix}.lnkv_g": self.ln_kv_g, f"{prefix}.lnkv_b": self.ln_kv_b}


def _init_ln(d):
    return (T.Tensor(np.ones(d), requires_grad=True),
            T.Tensor(np.zeros(d), requires_grad=True))


class Mlp:
    def __init__(self, d, hidden, rng, d_out=None):
        d_out = d_out or d
        self.w1, self.b1 = _dense_w(rng, hidden, d), _zeros(hidden)
        self.w2, self.b2 = _dense_w(rng, d_out, hidden), _zeros(d_out)
        self.ln_g, self.ln_b = _init_ln(d)

    def __call__(self, x, residual=True):
        h = T.relu(T.dense(T.layer_norm(x, self.ln_g, self.ln_b), self.w1, self.b1))
        out = T.dense(h, self.w2, self.b2)
        return x + out if residual else out

    def params(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
                f"{prefix}.ln_g": self.ln_g, f"{prefix}.ln_b": self.ln_b}


class TwoWayRound:
    """One refinement round: token self-attention, tokens read the feature
    map, a token MLP, then the feature map reads the tokens back."""

    def __init__(self, d, rng):
        self.self_attn = Attention(d, rng)
        self.t2f = Attention(d, rng)
        self.mlp = Mlp(d, 2 * d, rng)
        self.f2t = Attention(d, rng)

    def __call__(self, tokens, feats):
        tokens = self.self_attn(tokens, tokens)
        tokens = self.t2f(tokens, feats)
        tokens = self.mlp(tokens)
        feats = self.f2t(feats, tokens)
        return tokens, feats

    def params(self, prefix):
        return {**self.self_attn.params(f"{prefix}.self"),
                **self.t2f.params(f"{prefix}.t2f"),
                **self.mlp.params(f"{prefix}.mlp"),
                **self.f2t.params(f"{prefix}.f2t")}


class MaskDecoder:
    """Full decode head; see the module docstring for the data flow."""

    def __init__(self, config, downsampler, rng, pad_mode=T.WRAP):
        d = config.d_feat
        self.config = config
        self.pad_mode = pad_mode
        self.fuser = PrevMaskFuser(d, downsampler, rng, pad_mode)
        self.tokens = T.Tensor(rng.normal(0.0, 0.5, size=(N_MASKS + 2, d)),
                               requires_grad=True)
        self.rounds = [TwoWayRound(d, rng) for _ in range(config.attn_rounds)]
        self.up1_k = T.Tensor(rng.normal(0.0, math.sqrt(2.0 / d),
                                         size=(d, config.c_s, 2, 2)), requires_grad=True)
        self.up1_b = _zeros(config.c_s)
        self.up2_k = T.Tensor(rng.normal(0.0, math.sqrt(2.0 / config.c_s),
                                         size=(config.c_s, config.c_d, 2, 2)),
                              requires_grad=True)
        self.up2_b = _zeros(config.c_d)
        self.skip_s = WrapConvBlock(config.c_s, rng, pad_mode)
        self.skip_d = WrapConvBlock(config.c_d, rng, pad_mode)
        self.mask_heads = [Mlp(d, d, rng, d_out=config.c_d) for _ in range(N_MASKS)]
        self.iou_head = Mlp(d, d, rng, d_out=N_MASKS)
        self.occ_head = Mlp(d, d, rng, d_out=1)
        self.ptr_head = Mlp(d, d, rng, d_out=config.d_p)

    def decode(self, f_mem, prev_logits, f_s, f_d):
        cfg = self.config
        d, h, w = f_mem.data.shape
        if d != cfg.d_feat:
            raise ShapeError(f"expected {cfg.d_feat} feature channels, got {d}")
        if f_s.data.shape != (cfg.c_s, 2 * h, 2 * w):
            raise ShapeError(f"stride-8 skip shape {f_s.data.shape} inconsistent")
        if f_d.data.shape != (cfg.c_d, 4 * h, 4 * w):
            raise ShapeError(f"stride-4 skip shape {f_d.data.shape} inconsistent")

        x = self.fuser(f_mem, prev_logits)
        feats = T.transpose(T.reshape(x, (d, h * w)))  # [hw, d] tokens
        tokens = self.tokens
        for rnd in self.rounds:
            tokens, feats = rnd(tokens, feats)
        x = T.reshape(T.transpose(feats), (d, h, w))

        x = T.relu(T.conv_transpose2x(x, self.up1_k, self.up1_b) + self.skip_s(f_s))
        x = T.relu(T.conv_transpose2x(x, self.up2_k, self.up2_b) + self.skip_d(f_d))
        emb = T.upsample_bilinear(x, 4, wrap_h=(self.pad_mode == T.WRAP))
        emb_flat = T.reshape(emb, (cfg.c_d, 16 * h * 16 * w))

        masks = []
        for k in range(N_MASKS):
            wk = self.mask_heads[k](tokens[k:k + 1], residual=False)  # [1, c_d]
            masks.append(T.reshape(T.matmul(wk, emb_flat), (16 * h, 16 * w)))
        y_sam = T.stack(masks)

        u = T.sigmoid(T.reshape(self.iou_head(tokens[N_MASKS:N_MASKS + 1],
                                              residual=False), (N_MASKS,)))
        o = T.reshape(self.occ_head(tokens[N_MASKS + 1:N_MASKS + 2],
                                    residual=False), ())
        best = int(np.argmax(u.data))
        p = T.reshape(self.ptr_head(tokens[best:best + 1], residual=False),
                      (cfg.d_p,))
        return DecoderOutput(y_sam=y_sam, u=u, o=o, p=p)

    def params(self, prefix="decoder"):
        out = self.fuser.params(f"{prefix}.fuser")
        out[f"{prefix}.tokens"] = self.tokens
        for i, rnd in enumerate(self.rounds):
            out.update(rnd.params(f"{prefix}.round{i}"))
        out[f"{prefix}.up1_k"] = self.up1_k
        out[f"{prefix}.up1_b"] = self.up1_b
        out[f"{prefix}.up2_k"] = self.up2_k
        out[f"{prefix}.up2_b"] = self.up2_b
        out.update(self.skip_s.params(f"{prefix}.skip_s"))
        out.update(self.skip_d.params(f"{prefix}.skip_d"))
        for k in range(N_MASKS):
            out.update(self.mask_heads[k].params(f"{prefix}.mask{k}"))
        out.update(self.iou_head.params(f"{prefix}.iou"))
        out.update(self.occ_head.params(f"{prefix}.occ"))
        out.update(self.ptr_head.params(f"{prefix}.ptr"))
        return out


def select_best_mask(out):
    """Pick the mask with the highest predicted IoU; ties go to the lowest
    index. Returns (logit map tensor, index)."""
    idx = int(np.argmax(out.u.data))
    return out.y_sam[idx], idx
