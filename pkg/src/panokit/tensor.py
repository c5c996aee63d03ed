"""Dense tensors with a minimal reverse-mode autodiff graph.

Arrays are numpy-backed (float64 by default, float32 on request). Each
operation that participates in differentiation records its parents and a
backward closure; ``Tensor.backward()`` walks the graph once in reverse
topological order. Accumulation order inside every op is fixed, so repeated
runs on identical inputs are bit-identical.

Horizontal ("wrap") padding concatenates the last columns on the left and
the first columns on the right before convolving, which makes convolutions
cyclic along the width axis; vertical padding is always zero.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

WRAP = "wrap"
ZERO = "zero"

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(frozen=True)
class PadSpec:
    """Horizontal pad mode ('wrap' or 'zero') and pad width in pixels.

    Vertical padding is always zero; only the horizontal mode varies.
    """

    horizontal: str = ZERO
    amount: int = 0
    vertical: str = ZERO

    def __post_init__(self):
        if self.horizontal not in (WRAP, ZERO):
            raise ValueError(f"unknown horizontal pad mode {self.horizontal!r}")
        if self.vertical != ZERO:
            raise ValueError("vertical padding must be 'zero'")
        if self.amount < 0:
            raise ValueError("pad amount must be >= 0")


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._prev = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """Leaf tensor sharing this tensor's values, outside the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff driver ------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor outside the graph")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "add")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "div")


def power(a, exponent):
    a = _wrap(a)
    exponent = float(exponent)
    out_data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a._accum(g * exponent * a.data ** (exponent - 1.0))

    return Tensor._from_op(out_data, (a,), backward, "pow")


def relu(a):
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return Tensor._from_op(out_data, (a,), backward, "relu")


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), backward, "sigmoid")


def tanh(a):
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (a,), backward, "tanh")


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return Tensor._from_op(out_data, (a,), backward, "exp")


def log(a):
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return Tensor._from_op(out_data, (a,), backward, "log")


def sqrt(a):
    return power(a, 0.5)


# -- reductions and shape ----------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape))

    return Tensor._from_op(np.asarray(out_data), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "reshape")


def transpose(a, axes=None):
    a = _wrap(a)
    out_data = np.transpose(a.data, axes)

    def backward(g):
        if a.requires_grad:
            if axes is None:
                a._accum(np.transpose(g))
            else:
                a._accum(np.transpose(g, np.argsort(axes)))

    return Tensor._from_op(out_data, (a,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def stack(tensors):
    """Stack same-shaped tensors along a new leading axis."""
    tensors = [_wrap(t) for t in tensors]
    return concat([reshape(t, (1,) + t.data.shape) for t in tensors], axis=0)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + eps) ** -0.5) * gamma + beta


def take(a, idx):
    """Basic slicing with gradient scatter back into the source."""
    a = _wrap(a)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

    return Tensor._from_op(np.asarray(out_data), (a,), backward, "take")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


def dense(x, weight, bias):
    """Affine map: rows of ``x`` [N,Din] through ``weight`` [Dout,Din] + bias."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("dense expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[1] or weight.data.shape[0] != bias.data.shape[0]:
        raise ShapeError(
            f"dense mismatch x{x.data.shape} w{weight.data.shape} b{bias.data.shape}")
    out_data = x.data @ weight.data.T + bias.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ weight.data)
        if weight.requires_grad:
            weight._accum(g.T @ x.data)
        if bias.requires_grad:
            bias._accum(g.sum(axis=0))

    return Tensor._from_op(out_data, (x, weight, bias), backward, "dense")


def softmax(x, axis=-1):
    """Max-stabilized softmax along ``axis``; slices sum to one."""
    x = _wrap(x)
    if not np.isfinite(x.data).all():
        raise ValueError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accum(out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), backward, "softmax")


# -- padding and convolution -------------------------------------------------


def _wrap_pad_data(x, p):
    if p == 0:
        return x.copy()
    return np.concatenate([x[..., -p:], x, x[..., :p]], axis=-1)


def wrap_pad(t, p):
    """Cyclically extend a [C,H,W] map by ``p`` columns on each side.

    Output columns are [last p of t | t | first p of t].
    """
    t = _wrap(t)
    if t.data.ndim != 3:
        raise ShapeError("wrap_pad expects a [C,H,W] map")
    w = t.data.shape[-1]
    if p >= w:
        raise ShapeError(f"wrap pad {p} must be smaller than width {w}")
    out_data = _wrap_pad_data(t.data, p)

    def backward(g):
        if not t.requires_grad:
            return
        if p == 0:
            t._accum(g)
            return
        core = g[..., p:p + w].copy()
        core[..., w - p:] += g[..., :p]
        core[..., :p] += g[..., w + p:]
        t._accum(core)

    return Tensor._from_op(out_data, (t,), backward, "wrap_pad")


def _pad_map(x, p, horizontal):
    """Pad [C,H,W]: horizontal per mode, vertical always zero."""
    if p == 0:
        return x
    if horizontal == WRAP:
        if p >= x.shape[-1]:
            raise ShapeError(f"wrap pad {p} must be smaller than width {x.shape[-1]}")
        xp = _wrap_pad_data(x, p)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    return np.pad(xp, ((0, 0), (p, p), (0, 0)))


def _im2col(xp, k, stride):
    # xp: [C, Hp, Wp] -> cols [Ho*Wo, C*k*k] plus output spatial dims
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, kernel, bias, pad, stride=1):
    """2-D convolution with "same"-style padding on a [Cin,H,W] map.

    ``pad.horizontal`` selects cyclic or zero treatment of the width axis;
    vertical out-of-range taps always read zero. ``pad.amount`` must be
    (k-1)/2 so unit stride preserves the spatial size.
    """
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects x [Cin,H,W] and kernel [Cout,Cin,k,k]")
    cout, cin, k, k2 = kernel.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d kernels must be square with odd size")
    if cin != x.data.shape[0]:
        raise ShapeError(
            f"conv2d channel mismatch: x has {x.data.shape[0]}, kernel wants {cin}")
    if bias.data.shape != (cout,):
        raise ShapeError("conv2d bias must be [Cout]")
    p = pad.amount
    if p != (k - 1) // 2:
        raise ShapeError(f"pad amount {p} must be (k-1)/2 = {(k - 1) // 2}")

    xp = _pad_map(x.data, p, pad.horizontal)
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = kernel.data.reshape(cout, cin * k * k)
    out_data = (cols @ wmat.T + bias.data).reshape(ho, wo, cout).transpose(2, 0, 1)
    out_data = np.ascontiguousarray(out_data)

    def backward(g):
        g2 = g.transpose(1, 2, 0).reshape(ho * wo, cout)
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if kernel.requires_grad:
            cols_b, _, _ = _im2col(_pad_map(x.data, p, pad.horizontal), k, stride)
            kernel._accum((g2.T @ cols_b).reshape(cout, cin, k, k))
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, a:a + stride * (ho - 1) + 1:stride,
                        b:b + stride * (wo - 1) + 1:stride] += \
                        gcols[:, :, :, a, b].transpose(2, 0, 1)
            h, w = x.data.shape[1], x.data.shape[2]
            if p == 0:
                x._accum(gxp)
                return
            core = gxp[:, p:p + h, :]
            if pad.horizontal == WRAP:
                gx = core[:, :, p:p + w].copy()
                gx[:, :, w - p:] += core[:, :, :p]
                gx[:, :, :p] += core[:, :, w + p:]
            else:
                gx = core[:, :, p:p + w].copy()
            x._accum(gx)

    return Tensor._from_op(out_data, (x, kernel, bias), backward, "conv2d")


def conv_transpose2x(x, kernel, bias):
    """Upsample [C,h,w] -> [Cout,2h,2w] with learned 2x2 blocks (stride 2)."""
    x, kernel, bias = _wrap(x), _wrap(kernel), _wrap(bias)
    cin, cout, ka, kb = kernel.data.shape
    if (ka, kb) != (2, 2) or cin != x.data.shape[0]:
        raise ShapeError("conv_transpose2x expects kernel [Cin,Cout,2,2] matching x")
    h, w = x.data.shape[1], x.data.shape[2]
    t = np.tensordot(x.data, kernel.data, axes=([0], [0]))  # [h,w,Cout,2,2]
    out_data = np.ascontiguousarray(
        t.transpose(2, 0, 3, 1, 4).reshape(cout, 2 * h, 2 * w))
    out_data += bias.data[:, None, None]

    def backward(g):
        g5 = g.reshape(cout, h, 2, w, 2).transpose(1, 3, 0, 2, 4)  # [h,w,Cout,2,2]
        if bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2)))
        if kernel.requires_grad:
            kernel._accum(np.tensordot(x.data, g5, axes=([1, 2], [0, 1])))
        if x.requires_grad:
            x._accum(np.ascontiguousarray(
                np.tensordot(g5, kernel.data, axes=([2, 3, 4], [1, 2, 3]))
                .transpose(2, 0, 1)))

    return Tensor._from_op(out_data, (x, kernel, bias), backward, "convT2x")


def _bilinear_plan(h, w, factor, wrap_h):
    hh, ww = h * factor, w * factor
    src_i = (np.arange(hh) + 0.5) / factor - 0.5
    src_j = (np.arange(ww) + 0.5) / factor - 0.5
    i0 = np.floor(src_i).astype(int)
    j0 = np.floor(src_j).astype(int)
    wi = src_i - i0
    wj = src_j - j0
    i0c = np.clip(i0, 0, h - 1)
    i1c = np.clip(i0 + 1, 0, h - 1)
    if wrap_h:
        j0c = j0 % w
        j1c = (j0 + 1) % w
    else:
        j0c = np.clip(j0, 0, w - 1)
        j1c = np.clip(j0 + 1, 0, w - 1)
    return (i0c, i1c, wi), (j0c, j1c, wj)


def upsample_bilinear(x, factor, wrap_h=True):
    """Fixed bilinear x``factor`` upsampling; width interpolates cyclically."""
    x = _wrap(x)
    if x.data.ndim != 3:
        raise ShapeError("upsample_bilinear expects [C,h,w]")
    h, w = x.data.shape[1], x.data.shape[2]
    (i0, i1, wi), (j0, j1, wj) = _bilinear_plan(h, w, factor, wrap_h)
    wi2 = wi[None, :, None]
    wj2 = wj[None, None, :]
    d = x.data
    out_data = ((1 - wi2) * (1 - wj2) * d[:, i0[:, None], j0[None, :]]
                + (1 - wi2) * wj2 * d[:, i0[:, None], j1[None, :]]
                + wi2 * (1 - wj2) * d[:, i1[:, None], j0[None, :]]
                + wi2 * wj2 * d[:, i1[:, None], j1[None, :]])

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        c = gx.shape[0]
        ii0 = np.broadcast_to(i0[:, None], g.shape[1:])
        ii1 = np.broadcast_to(i1[:, None], g.shape[1:])
        jj0 = np.broadcast_to(j0[None, :], g.shape[1:])
        jj1 = np.broadcast_to(j1[None, :], g.shape[1:])
        for ch in range(c):
            np.add.at(gx[ch], (ii0, jj0), g[ch] * (1 - wi2[0]) * (1 - wj2[0]))
            np.add.at(gx[ch], (ii0, jj1), g[ch] * (1 - wi2[0]) * wj2[0])
            np.add.at(gx[ch], (ii1, jj0), g[ch] * wi2[0] * (1 - wj2[0]))
            np.add.at(gx[ch], (ii1, jj1), g[ch] * wi2[0] * wj2[0])
        x._accum(gx)

    return Tensor._from_op(out_data, (x,), backward, "upsample")


# -- fused loss primitive ----------------------------------------------------


def weighted_bce_logits(logits, targets, weights=None):
    """Mean of per-element ``w * BCE(sigmoid(logit), target)``.

    Stable log-sum-exp form; gradient w.r.t. logits is
    ``w * (sigmoid(logit) - target) / N``. Targets and weights are constants.
    """
    logits = _wrap(logits)
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"targets {y.shape} must match logits {z.shape}")
    if weights is None:
        w = np.ones_like(z)
    else:
        w = np.asarray(weights, dtype=z.dtype)
        if w.shape != z.shape:
            raise ShapeError(f"weights {w.shape} must match logits {z.shape}")
    n = z.size
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray((w * per).sum() / n)

    def backward(g):
        if logits.requires_grad:
            s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                         np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
            logits._accum(g * w * (s - y) / n)

    return Tensor._from_op(out_data, (logits,), backward, "wbce")


# -- gradient verification ---------------------------------------------------


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. Error
    per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise ValueError("function produced a non-finite value")
    out.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base)).item()
        flat[i] = orig - eps
        lo = f(Tensor(base)).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        if not np.isfinite(numeric):
            raise ValueError("finite difference produced a non-finite value")
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
