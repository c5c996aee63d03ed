"""Frame memory: bank bookkeeping, long-term sampling, and feature
conditioning.

The bank keeps one never-evicted prompted entry, dense memories for the six
most recent frames, and a pointer-only archive of everything older. Before
each frame, archived pointers are roulette-sampled (weights exp(visibility
score), without replacement) into long-term slots; an affinity over the
short-term pointers re-mixes the short-term memories per slot, and a small
network predicts per-channel scale/bias from each sampled pointer to
re-instantiate a pseudo dense memory for it. Frame features then cross-attend
over all memory tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import Mlp, _dense_w, _zeros
from .errors import ShapeError


@dataclass(frozen=True)
class MemoryConfig:
    d_m: int = 64
    long_slots: int = 2
    recent_size: int = 6

    def __post_init__(self):
        if self.long_slots < 0:
            raise ValueError("long_slots must be >= 0")
        if self.recent_size < 1:
            raise ValueError("recent_size must be >= 1")


@dataclass
class MemoryEntry:
    frame_idx: int
    mem: T.Tensor        # [h, w, d_m]
    pointer: T.Tensor    # [d_p]
    obj_score: float


@dataclass
class ArchivedPointer:
    frame_idx: int
    pointer: np.ndarray  # [d_p]
    obj_score: float


class MemoryBank:
    """Per-sequence memory store; owned by exactly one tracking loop."""

    def __init__(self, prompted, recent_size=6):
        self.prompted = prompted
        self.recent_size = recent_size
        self.recent = []
        self.archive = []

    def all_frame_indices(self):
        idxs = [self.prompted.frame_idx]
        idxs += [e.frame_idx for e in self.recent]
        idxs += [a.frame_idx for a in self.archive]
        return idxs

    def detach_(self):
        """Cut stored tensors out of the autodiff graph (chunk boundaries)."""
        self.prompted.mem = self.prompted.mem.detach()
        self.prompted.pointer = self.prompted.pointer.detach()
        for e in self.recent:
            e.mem = e.mem.detach()
            e.pointer = e.pointer.detach()


def bank_insert(bank, entry):
    """Append a frame memory; overflow demotes the oldest recent entry to a
    pointer-only archive record. The prompted entry is never touched."""
    if entry.frame_idx <= max(bank.all_frame_indices()):
        raise ValueError(f"out-of-order memory insert (frame {entry.frame_idx})")
    bank.recent.append(entry)
    if len(bank.recent) > bank.recent_size:
        old = bank.recent.pop(0)
        bank.archive.append(ArchivedPointer(
            old.frame_idx, np.array(old.pointer.data), float(old.obj_score)))
    return bank


def occlusion_sample(archive, long_slots, rng):
    """Roulette-sample archived pointers, weighted by exp(visibility score),
    without replacement.

    Returns (frame indices, pointer matrix [n, d_p]) sorted by frame index,
    or (None, None) when there is nothing to sample. When fewer candidates
    exist than slots, all of them are returned.
    """
    if long_slots == 0 or not archive:
        return None, None
    cands = list(archive)
    weights = [math.exp(min(c.obj_score, 700.0)) for c in cands]
    picks = []
    for _ in range(min(long_slots, len(cands))):
        total = sum(weights)
        if total <= 0.0:
            i = 0
        else:
            rv = rng.random() * total
            cum = 0.0
            i = len(weights) - 1
            for j, wj in enumerate(weights):
                cum += wj
                if cum > rv:
                    i = j
                    break
        picks.append(cands.pop(i))
        weights.pop(i)
    picks.sort(key=lambda c: c.frame_idx)
    return ([c.frame_idx for c in picks],
            np.stack([c.pointer for c in picks]))


def pointer_affinity(p_long, p_short):
    """Scaled dot-product similarity, softmax-normalized over the short axis
    so each long slot forms a convex combination of short-term frames."""
    p_long = p_long if isinstance(p_long, T.Tensor) else T.Tensor(p_long)
    p_short = p_short if isinstance(p_short, T.Tensor) else T.Tensor(p_short)
    if p_long.data.ndim != 2 or p_short.data.ndim != 2:
        raise ShapeError("pointer sets must be 2-D")
    if p_long.data.shape[0] == 0 or p_short.data.shape[0] == 0:
        raise ShapeError("pointer sets must be nonempty")
    d_p = p_long.data.shape[1]
    if p_short.data.shape[1] != d_p:
        raise ShapeError("pointer dims differ")
    scores = T.matmul(p_long, T.transpose(p_short)) * (1.0 / math.sqrt(d_p))
    return T.softmax(scores, axis=-1)


def aggregate_short(m_short, affinity):
    """Mix short-term memories into long slots: m_tilde[l] = sum_s a[l,s] m[s]."""
    m_short = m_short if isinstance(m_short, T.Tensor) else T.Tensor(m_short)
    a = affinity if isinstance(affinity, T.Tensor) else T.Tensor(affinity)
    s, h, w, d_m = m_short.data.shape
    if a.data.ndim != 2 or a.data.shape[1] != s:
        raise ShapeError(f"affinity {a.data.shape} does not match {s} memories")
    flat = T.reshape(m_short, (s, h * w * d_m))
    return T.reshape(T.matmul(a, flat), (a.data.shape[0], h, w, d_m))


class FilmGenerator:
    """Two-layer network mapping a pointer to per-channel (scale, bias).

    The output bias starts at scale 1 / bias 0 and the final weights start
    near zero, so modulation begins at identity.
    """

    def __init__(self, d_p, d_m, rng):
        self.d_m = d_m
        self.w1 = _dense_w(rng, 2 * d_m, d_p)
        self.b1 = _zeros(2 * d_m)
        self.w2 = _dense_w(rng, 2 * d_m, 2 * d_m, scale=0.01 / math.sqrt(2 * d_m))
        b2 = np.concatenate([np.ones(d_m), np.zeros(d_m)])
        self.b2 = T.Tensor(b2, requires_grad=True)

    def __call__(self, pointers):
        p = pointers if isinstance(pointers, T.Tensor) else T.Tensor(pointers)
        h = T.relu(T.dense(p, self.w1, self.b1))
        return T.dense(h, self.w2, self.b2)

    def params(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def film(m_tilde, p_long, ffn):
    """Feature-wise modulation: m[l] * gamma_l + beta_l, with (gamma, beta)
    predicted from the matching long pointer."""
    m_tilde = m_tilde if isinstance(m_tilde, T.Tensor) else T.Tensor(m_tilde)
    n, h, w, d_m = m_tilde.data.shape
    gb = ffn(p_long)
    if gb.data.shape != (n, 2 * d_m):
        raise ShapeError(f"modulation shape {gb.data.shape} mismatches memory")
    gamma = T.reshape(gb[:, :d_m], (n, 1, 1, d_m))
    beta = T.reshape(gb[:, d_m:], (n, 1, 1, d_m))
    return m_tilde * gamma + beta


class MemoryReader:
    """One cross-attention layer reading memory tokens into frame features,
    followed by a residual feed-forward block."""

    def __init__(self, d_feat, d_m, d_p, rng):
        self.d_feat = d_feat
        self.wq = _dense_w(rng, d_feat, d_feat)
        self.wk = _dense_w(rng, d_feat, d_m)
        self.wv = _dense_w(rng, d_feat, d_m)
        self.wo = _dense_w(rng, d_feat, d_feat)
        self.bq, self.bk, self.bv, self.bo = (_zeros(d_feat) for _ in range(4))
        self.ln_q = (T.Tensor(np.ones(d_feat), requires_grad=True),
                     T.Tensor(np.zeros(d_feat), requires_grad=True))
        self.ln_kv = (T.Tensor(np.ones(d_m), requires_grad=True),
                      T.Tensor(np.zeros(d_m), requires_grad=True))
        self.ptr_proj_w = _dense_w(rng, d_m, d_p)
        self.ptr_proj_b = _zeros(d_m)
        self.ffn = Mlp(d_feat, 2 * d_feat, rng)
        self.scale = 1.0 / math.sqrt(d_feat)

    def project_pointers(self, pointers):
        return T.dense(pointers, self.ptr_proj_w, self.ptr_proj_b)

    def __call__(self, f16, mem_tokens):
        d, h, w = f16.data.shape
        if d != self.d_feat:
            raise ShapeError(f"expected {self.d_feat} channels, got {d}")
        q_in = T.transpose(T.reshape(f16, (d, h * w)))
        q = T.dense(T.layer_norm(q_in, *self.ln_q), self.wq, self.bq)
        kv = T.layer_norm(mem_tokens, *self.ln_kv)
        k = T.dense(kv, self.wk, self.bk)
        v = T.dense(kv, self.wv, self.bv)
        att = T.softmax(T.matmul(q, T.transpose(k)) * self.scale, axis=-1)
        x = q_in + T.dense(T.matmul(att, v), self.wo, self.bo)
        x = self.ffn(x)
        return T.reshape(T.transpose(x), (d, h, w))

    def params(self, prefix):
        out = {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
               f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo,
               f"{prefix}.bq": self.bq, f"{prefix}.bk": self.bk,
               f"{prefix}.bv": self.bv, f"{prefix}.bo": self.bo,
               f"{prefix}.lnq_g": self.ln_q[0], f"{prefix}.lnq_b": self.ln_q[1],
               f"{prefix}.lnkv_g": self.ln_kv[0], f"{prefix}.lnkv_b": self.ln_kv[1],
               f"{prefix}.ptr_w": self.ptr_proj_w, f"{prefix}.ptr_b": self.ptr_proj_b}
        out.update(self.ffn.params(f"{prefix}.ffn"))
        return out


class MemoryEncoder:
    """Combine a frame's unconditioned features with its selected mask into a
    dense memory entry."""

    def __init__(self, d_feat, d_m, downsampler, rng, pad_mode=T.WRAP):
        self.down = downsampler
        self.pad_mode = pad_mode
        self.proj_k = T.Tensor(rng.normal(0.0, math.sqrt(1.0 / d_feat),
                                          size=(d_m, d_feat, 1, 1)), requires_grad=True)
        self.proj_b = _zeros(d_m)
        self.mix_k = T.Tensor(rng.normal(0.0, math.sqrt(2.0 / (d_m * 9)),
                                         size=(d_m, d_m, 3, 3)), requires_grad=True)
        self.mix_b = _zeros(d_m)

    def __call__(self, features, mask_logits):
        m = self.down(mask_logits)
        f = T.conv2d(features, self.proj_k, self.proj_b, T.PadSpec(T.ZERO, 0))
        if m.data.shape != f.data.shape:
            raise ShapeError(f"mask features {m.data.shape} vs frame {f.data.shape}")
        s = T.relu(m + f)
        out = T.conv2d(s, self.mix_k, self.mix_b, T.PadSpec(self.pad_mode, 1))
        return T.transpose(out, (1, 2, 0))  # [h, w, d_m]

    def params(self, prefix):
        return {f"{prefix}.proj_k": self.proj_k, f"{prefix}.proj_b": self.proj_b,
                f"{prefix}.mix_k": self.mix_k, f"{prefix}.mix_b": self.mix_b}


def _flat_tokens(mem):
    h, w, d_m = mem.data.shape
    return T.reshape(mem, (h * w, d_m))


def condition_features(f16, bank, reader, film_gen, config, rng, long_slots=None):
    """Cross-attend frame features over every available memory token.

    Token order is fixed: prompted memory, recent memories (old to new),
    re-instantiated long-term memories, short pointers, long pointers. The
    long-term path activates only when the archive is nonempty and slots are
    configured, which also realizes the no-long-memory ablation at slots=0.
    """
    if bank is None or bank.prompted is None:
        raise ValueError("memory bank must hold at least the prompted entry")
    if long_slots is None:
        long_slots = config.long_slots

    tokens = [_flat_tokens(bank.prompted.mem)]
    tokens += [_flat_tokens(e.mem) for e in bank.recent]

    p_short = None
    if bank.recent:
        p_short = T.stack([e.pointer for e in bank.recent])

    sampled = None
    if p_short is not None:
        sampled_idx, p_long = occlusion_sample(bank.archive, long_slots, rng)
        if sampled_idx is not None:
            sampled = (sampled_idx, p_long)
            aff = pointer_affinity(T.Tensor(p_long), p_short)
            m_short = T.stack([e.mem for e in bank.recent])
            m_long = film(aggregate_short(m_short, aff), T.Tensor(p_long), film_gen)
            n, h, w, d_m = m_long.data.shape
            tokens.append(T.reshape(m_long, (n * h * w, d_m)))

    if p_short is not None:
        tokens.append(reader.project_pointers(p_short))
    if sampled is not None:
        tokens.append(reader.project_pointers(T.Tensor(sampled[1])))

    return reader(f16, T.concat(tokens, axis=0))
