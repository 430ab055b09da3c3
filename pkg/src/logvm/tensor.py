"""Strided float64 tensors and the primitive ops everything else composes.

A ``Tensor`` wraps a C-contiguous-or-view numpy float64 array plus an
optional autodiff tape node.  Tensors are treated as immutable after
construction and may be shared freely across threads.  View ops
(reshape / transpose / slice) return numpy views where strides permit,
so values observed through a view always equal values in the base buffer.

Reductions and matrix products go through ``np.einsum(optimize=False)``,
whose accumulation order matches a naive nested loop (innermost index
ascending).  That keeps every primitive bitwise-reproducible against a
straight-loop oracle and independent of BLAS threading.

Multiply accounting: within a ``multiply_counter()`` block each op adds
its logical f64 multiply count (mul/div/exp/log/sqrt count 1 each, adds
are free).  This backs the cross-check of the analytic per-block flop
formulas against an instrumented run.
"""

from __future__ import annotations

import struct
from itertools import product as _iterproduct

import numpy as np

from .autodiff import TapeNode

__all__ = [
    "Tensor", "tensor", "parameter", "zeros", "ones",
    "set_debug_checks", "multiply_counter",
    "add", "sub", "mul", "div", "neg", "scale",
    "exp", "log", "sigmoid", "silu", "softplus",
    "linear", "layer_norm", "softmax", "log_softmax",
    "reduce_sum", "reduce_mean",
    "pad", "reshape", "transpose", "flatten", "concat_axis", "slice_",
    "gather_rows", "depthwise_conv", "unfold", "conv", "max_pool",
    "upsample_nearest", "save_tensor", "load_tensor",
]

_DEBUG_FINITE = False
_MUL_COUNTER = None

_AXLETTERS = "abcdefghijklmnopqrstuvwxyz"


def set_debug_checks(enabled):
    """Toggle NaN/Inf detection at op boundaries (off by default)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class multiply_counter:
    """Context manager that counts logical f64 multiplies of enclosed ops."""

    def __init__(self):
        self.count = 0

    def __enter__(self):
        global _MUL_COUNTER
        self._outer = _MUL_COUNTER
        _MUL_COUNTER = self
        return self

    def __exit__(self, *exc):
        global _MUL_COUNTER
        _MUL_COUNTER = self._outer
        return False


def _bump(n):
    if _MUL_COUNTER is not None:
        _MUL_COUNTER.count += int(n)


class Tensor:
    """Float64 n-d value; optionally attached to an autodiff tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def strides(self):
        """Per-axis element offsets into the flat buffer."""
        return tuple(s // self.data.itemsize for s in self.data.strides)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f", taped:{self.node.op}"
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; shapes must match exactly or the operand is a scalar
    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)


def _coerce(other, like):
    if isinstance(other, Tensor):
        return other
    return Tensor(np.full(like.shape, float(other)))


def tensor(data):
    return Tensor(data)


def parameter(data):
    """A leaf tensor tracked by the tape (gradients accumulate here)."""
    t = Tensor(np.array(data, dtype=np.float64, copy=True))
    node = TapeNode("leaf", (), None, t.data.shape)
    node.tensor = t
    t.node = node
    return t


def zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float64))


def ones(shape):
    return Tensor(np.ones(shape, dtype=np.float64))


def _trace(op, out_data, inputs, backward_fn):
    """Wrap op output; attach a tape node when any input is taped."""
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    nodes = tuple(t.node for t in inputs)
    if all(n is None for n in nodes):
        return Tensor(out_data)
    return Tensor(out_data, node=TapeNode(op, nodes, backward_fn, out_data.shape))


def _esum(arr, axes=None, keepdims=False):
    """Sum with naive per-axis accumulation order (innermost axis first).

    Reduces one axis at a time via einsum(optimize=False), whose inner loop
    is a plain running sum for the small extents the loop oracles probe.
    """
    nd = arr.ndim
    if nd > len(_AXLETTERS):
        raise ValueError("rank too large")
    if axes is None:
        axes = tuple(range(nd))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = sorted(a % nd for a in axes)
    out = arr
    for ax in reversed(axes):
        src = _AXLETTERS[:out.ndim]
        dst = src[:ax] + src[ax + 1:]
        out = np.einsum(f"{src}->{dst}", out, optimize=False)
    if keepdims:
        shape = tuple(1 if i in axes else s for i, s in enumerate(arr.shape))
        out = np.asarray(out).reshape(shape)
    return np.asarray(out)


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    _require_same_shape(a, b, "add")
    out = a.data + b.data
    return _trace("add", out, (a, b), lambda g: (g, g))


def sub(a, b):
    _require_same_shape(a, b, "sub")
    out = a.data - b.data
    return _trace("sub", out, (a, b), lambda g: (g, -g))


def mul(a, b):
    _require_same_shape(a, b, "mul")
    _bump(a.data.size)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _trace("mul", out, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    _require_same_shape(a, b, "div")
    _bump(a.data.size)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _trace("div", out, (a, b),
                  lambda g: (g / bd, -g * ad / (bd * bd)))


def neg(a):
    return _trace("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, s):
    s = float(s)
    _bump(a.data.size)
    return _trace("scale", a.data * s, (a,), lambda g: (g * s,))


def exp(a):
    _bump(a.data.size)
    out = np.exp(a.data)
    return _trace("exp", out, (a,), lambda g: (g * out,))


def log(a):
    _bump(a.data.size)
    ad = a.data
    return _trace("log", np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a):
    _bump(2 * a.data.size)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _trace("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    """x * sigmoid(x)."""
    _bump(3 * a.data.size)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    ad = a.data
    return _trace("silu", out, (a,),
                  lambda g: (g * (s + ad * s * (1.0 - s)),))


def softplus(a):
    """ln(1 + e^x), computed as x + ln(1 + e^-x) for large x (no overflow)."""
    _bump(2 * a.data.size)
    out = np.logaddexp(0.0, a.data)
    ad = a.data
    return _trace("softplus", out, (a,),
                  lambda g: (g / (1.0 + np.exp(-ad)),))


# ---------------------------------------------------------------------------
# linear algebra

def linear(x, weight, bias=None):
    """y[..., j] = sum_i x[..., i] * W[i, j] (+ b[j])."""
    xd, wd = x.data, weight.data
    if wd.ndim != 2:
        raise ValueError(f"linear: weight must be 2-d, got {wd.shape}")
    fin, fout = wd.shape
    if xd.ndim < 1 or xd.shape[-1] != fin:
        raise ValueError(f"linear: trailing axis {xd.shape} incompatible with weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = np.ascontiguousarray(xd.reshape(-1, fin))
    _bump(x2.shape[0] * fin * fout)
    out2 = np.einsum("bi,io->bo", x2, wd, optimize=False)
    if bias is not None:
        bd = bias.data
        if bd.shape != (fout,):
            raise ValueError(f"linear: bias shape {bd.shape} != ({fout},)")
        out2 = out2 + bd
    out = out2.reshape(lead + (fout,))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, fout))
        gx = np.einsum("bo,io->bi", g2, wd, optimize=False).reshape(xd.shape)
        gw = np.einsum("bi,bo->io", x2, g2, optimize=False)
        gb = _esum(g2, axes=0) if bias is not None else None
        return (gx, gw, gb)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    if bias is None:
        return _trace("linear", out, inputs, lambda g: bwd(g)[:2])
    return _trace("linear", out, inputs, bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the trailing (channel) axis to mean 0 / var 1, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    xd = x.data
    c = xd.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ValueError("layer_norm: gain/bias must match the trailing axis")
    _bump((xd.size // c) * (3 * c + 4))
    mu = _esum(xd, axes=-1, keepdims=True) / c
    xc = xd - mu
    var = _esum(xc * xc, axes=-1, keepdims=True) / c
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gg = _esum((g * xhat).reshape(-1, c), axes=0)
        gb = _esum(g.reshape(-1, c), axes=0)
        gx_hat = g * gain.data
        m1 = _esum(gx_hat, axes=-1, keepdims=True) / c
        m2 = _esum(gx_hat * xhat, axes=-1, keepdims=True) / c
        gx = inv * (gx_hat - m1 - xhat * m2)
        return (gx, gg, gb)

    return _trace("layer_norm", out, (x, gain, bias), bwd)


def softmax(x):
    """Softmax over the trailing axis (max-shifted for stability)."""
    xd = x.data
    c = xd.shape[-1]
    _bump(2 * xd.size)
    shifted = xd - np.max(xd, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / _esum(e, axes=-1, keepdims=True)

    def bwd(g):
        dot = _esum(g * p, axes=-1, keepdims=True)
        return (p * (g - dot),)

    return _trace("softmax", p, (x,), bwd)


def log_softmax(x):
    xd = x.data
    c = xd.shape[-1]
    _bump(xd.size + xd.size // c)
    m = np.max(xd, axis=-1, keepdims=True)
    shifted = xd - m
    lse = np.log(_esum(np.exp(shifted), axes=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * _esum(g, axes=-1, keepdims=True),)

    return _trace("log_softmax", out, (x,), bwd)


def reduce_sum(x, axis=None, keepdims=False):
    xd = x.data
    out = _esum(xd, axes=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % xd.ndim for a in axes)
        shape = tuple(1 if i in axes else s for i, s in enumerate(xd.shape))
        return (np.broadcast_to(g.reshape(shape), xd.shape).copy(),)

    return _trace("reduce_sum", out, (x,), bwd)


def reduce_mean(x, axis=None, keepdims=False):
    xd = x.data
    if axis is None:
        n = xd.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([xd.shape[a % xd.ndim] for a in axes]))
    s = reduce_sum(x, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / n)


# ---------------------------------------------------------------------------
# view / layout ops

def pad(x, pad_width):
    """Zero padding; pad_width is one (before, after) pair per axis."""
    xd = x.data
    pw = [(int(b), int(a)) for b, a in pad_width]
    if len(pw) != xd.ndim:
        raise ValueError(f"pad: need {xd.ndim} pairs, got {len(pw)}")
    out = np.pad(xd, pw)
    crop = tuple(slice(b, b + s) for (b, _), s in zip(pw, xd.shape))
    return _trace("pad", out, (x,), lambda g: (g[crop],))


def reshape(x, shape):
    out = x.data.reshape(shape)
    orig = x.data.shape
    return _trace("reshape", out, (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None):
    xd = x.data
    if axes is None:
        axes = tuple(reversed(range(xd.ndim)))
    axes = tuple(int(a) % xd.ndim for a in axes)
    inv = np.argsort(axes)
    out = xd.transpose(axes)
    return _trace("transpose", out, (x,), lambda g: (g.transpose(inv),))


def flatten(x):
    """Row-major flatten to 1-d (last axis fastest)."""
    return reshape(x, (x.data.size,))


def concat_axis(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise ValueError("concat_axis: empty input list")
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ValueError("concat_axis: rank mismatch")
        for i in range(nd):
            if i != ax and p.data.shape[i] != parts[0].data.shape[i]:
                raise ValueError("concat_axis: extent mismatch off the concat axis")
    out = np.concatenate([p.data for p in parts], axis=ax)
    sizes = [p.data.shape[ax] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        gs = []
        for i in range(len(parts)):
            sl = [slice(None)] * nd
            sl[ax] = slice(offs[i], offs[i + 1])
            gs.append(g[tuple(sl)])
        return tuple(gs)

    return _trace("concat_axis", out, tuple(parts), bwd)


def slice_(x, key):
    """Basic strided slicing; key is a tuple of slice objects."""
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise ValueError("slice_: key must contain slice objects only")
    xd = x.data
    out = xd[key]

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[key] = g
        return (gx,)

    return _trace("slice", out, (x,), bwd)


def gather_rows(x, indices):
    """Select rows along axis 0; backward scatter-adds (handles repeats)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows: indices must be 1-d")
    xd = x.data
    out = xd[idx]

    def bwd(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _trace("gather_rows", out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution family (channel-last layout, n-d spatial)

def _per_axis(v, nsp, name, minimum=0):
    vals = tuple(int(x) for x in (v if isinstance(v, (tuple, list)) else (v,) * nsp))
    if len(vals) != nsp:
        raise ValueError(f"{name}: expected {nsp} per-axis values, got {len(vals)}")
    if any(x < minimum for x in vals):
        raise ValueError(f"{name}: values must be >= {minimum}, got {vals}")
    return vals


def depthwise_conv(x, kernel, stride=1, dilation=1, padding=0):
    """Per-channel convolution: out channel c sees only input channel c.

    x: (*spatial, C); kernel: (*taps, C).  Output extent per axis is
    floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1.
    """
    xd, kd = x.data, kernel.data
    nsp = xd.ndim - 1
    if nsp < 1:
        raise ValueError("depthwise_conv: input needs at least one spatial axis")
    if kd.ndim != nsp + 1:
        raise ValueError(f"depthwise_conv: kernel rank {kd.ndim} != spatial+1 ({nsp + 1})")
    c = xd.shape[-1]
    if kd.shape[-1] != c:
        raise ValueError(f"depthwise_conv: channel mismatch {kd.shape[-1]} vs {c}")
    stride = _per_axis(stride, nsp, "stride", minimum=1)
    dilation = _per_axis(dilation, nsp, "dilation", minimum=1)
    padding = _per_axis(padding, nsp, "padding", minimum=0)

    ksp = kd.shape[:-1]
    out_sp = []
    for i in range(nsp):
        ext = (xd.shape[i] + 2 * padding[i] - dilation[i] * (ksp[i] - 1) - 1) // stride[i] + 1
        if ext < 1:
            raise ValueError("depthwise_conv: output extent would be empty")
        out_sp.append(ext)
    out_sp = tuple(out_sp)

    xp = np.pad(xd, [(p, p) for p in padding] + [(0, 0)])
    out = np.zeros(out_sp + (c,))
    taps = list(_iterproduct(*[range(k) for k in ksp]))

    def tap_slice(t):
        return tuple(
            slice(t[i] * dilation[i], t[i] * dilation[i] + out_sp[i] * stride[i], stride[i])
            for i in range(nsp)
        )

    for t in taps:
        out += kd[t] * xp[tap_slice(t)]
    _bump(len(taps) * int(np.prod(out_sp)) * c)

    def bwd(g):
        gk = np.zeros_like(kd)
        gxp = np.zeros_like(xp)
        for t in taps:
            sl = tap_slice(t)
            gk[t] = _esum(g * xp[sl], axes=tuple(range(nsp)))
            gxp[sl] += g * kd[t]
        crop = tuple(slice(p, p + s) for p, s in zip(padding, xd.shape[:-1]))
        return (gxp[crop], gk)

    return _trace("depthwise_conv", out, (x, kernel), bwd)


def unfold(x, window, padding):
    """Stack each window offset's shifted copy along the channel axis.

    x: (*spatial, C) -> (*out_spatial, n_offsets * C), offsets enumerated
    row-major, so output channels [o*C, (o+1)*C) hold the zero-padded input
    shifted by offset o.  Stride is 1.
    """
    xd = x.data
    nsp = xd.ndim - 1
    window = _per_axis(window, nsp, "window", minimum=1)
    padding = _per_axis(padding, nsp, "padding", minimum=0)
    c = xd.shape[-1]
    out_sp = tuple(xd.shape[i] + 2 * padding[i] - (window[i] - 1) for i in range(nsp))
    if any(e < 1 for e in out_sp):
        raise ValueError("unfold: output extent would be empty")

    xp = np.pad(xd, [(p, p) for p in padding] + [(0, 0)])
    offsets = list(_iterproduct(*[range(w) for w in window]))
    out = np.empty(out_sp + (len(offsets) * c,))
    for o, off in enumerate(offsets):
        sl = tuple(slice(off[i], off[i] + out_sp[i]) for i in range(nsp))
        out[..., o * c:(o + 1) * c] = xp[sl]

    def bwd(g):
        gxp = np.zeros_like(xp)
        for o, off in enumerate(offsets):
            sl = tuple(slice(off[i], off[i] + out_sp[i]) for i in range(nsp))
            gxp[sl] += g[..., o * c:(o + 1) * c]
        crop = tuple(slice(p, p + s) for p, s in zip(padding, xd.shape[:-1]))
        return (gxp[crop],)

    return _trace("unfold", out, (x,), bwd)


def conv(x, weight, bias=None, padding=0):
    """Full cross-channel convolution, stride 1, as unfold + linear.

    weight: (*taps, Cin, Cout); the unfold layout (offset-major blocks)
    matches weight.reshape(n_taps * Cin, Cout) row-major.
    """
    wd = weight.data
    nsp = x.data.ndim - 1
    if wd.ndim != nsp + 2:
        raise ValueError(f"conv: weight rank {wd.ndim} != spatial+2 ({nsp + 2})")
    cin = x.data.shape[-1]
    if wd.shape[-2] != cin:
        raise ValueError(f"conv: channel mismatch {wd.shape[-2]} vs {cin}")
    cols = unfold(x, wd.shape[:-2], padding)
    w2 = reshape(weight, (int(np.prod(wd.shape[:-1])), wd.shape[-1]))
    return linear(cols, w2, bias)


def max_pool(x, factor):
    """Non-overlapping 2-d max pooling; ties go to the first maximal element
    in row-major window order (deterministic gradient routing)."""
    xd = x.data
    if xd.ndim != 3:
        raise ValueError("max_pool: expects (H, W, C)")
    f = int(factor)
    h, w, c = xd.shape
    if f < 1 or h % f or w % f:
        raise ValueError(f"max_pool: factor {f} must divide spatial extents {h}x{w}")
    ho, wo = h // f, w // f
    xw = xd.reshape(ho, f, wo, f, c).transpose(0, 2, 1, 3, 4).reshape(ho, wo, f * f, c)
    idx = np.argmax(xw, axis=2)
    out = np.take_along_axis(xw, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def bwd(g):
        gxw = np.zeros_like(xw)
        np.put_along_axis(gxw, idx[:, :, None, :], g[:, :, None, :], axis=2)
        gx = gxw.reshape(ho, wo, f, f, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
        return (gx,)

    return _trace("max_pool", out, (x,), bwd)


def upsample_nearest(x, factor):
    """2-d nearest-neighbor upsampling by an integer factor."""
    xd = x.data
    if xd.ndim != 3:
        raise ValueError("upsample_nearest: expects (H, W, C)")
    f = int(factor)
    out = np.repeat(np.repeat(xd, f, axis=0), f, axis=1)
    h, w, c = xd.shape

    def bwd(g):
        return (np.einsum("hawbc->hwc", g.reshape(h, f, w, f, c), optimize=False),)

    return _trace("upsample_nearest", out, (x,), bwd)


# ---------------------------------------------------------------------------
# serialization: "NDT1" flat binary container

def save_tensor(path, t):
    """magic 'NDT1' | rank u32 LE | extents u32 LE each | f64 LE row-major."""
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(b"NDT1")
        fh.write(struct.pack("<I", arr.ndim))
        for e in arr.shape:
            fh.write(struct.pack("<I", e))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"NDT1":
            raise ValueError(f"bad tensor file magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("truncated tensor file")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(arr)
