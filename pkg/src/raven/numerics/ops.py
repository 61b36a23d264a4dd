"""Differentiable primitives.

Every function takes Tensors (or array-likes, treated as constants) and
returns a Tensor. Elementwise binary ops broadcast numpy-style; their
backward passes sum the incoming gradient back to each operand's shape.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, make


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make(out, (a, b), back)


def neg(a) -> Tensor:
    return mul(a, -1.0)


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for a constant exponent; a must be positive unless p is an integer."""
    a = as_tensor(a)
    ad = a.data
    out = ad ** p
    return make(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return make(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make(_softplus(x), (a,), lambda g: (g * _sigmoid(x),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return make(t, (a,), lambda g: (g * (1.0 - t * t),))


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2/beta inside |x|<beta, |x|-beta/2 outside."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    inside = ax < beta
    out = np.where(inside, 0.5 * x * x / beta, ax - 0.5 * beta)
    return make(out, (a,), lambda g: (g * np.where(inside, x / beta, np.sign(x)),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    keep = (x >= lo) & (x <= hi)
    return make(np.clip(x, lo, hi), (a,), lambda g: (g * keep,))


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make(np.array(a.data[index]), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make(np.broadcast_to(a.data, shape).copy(), (a,),
                lambda g: (_unbroadcast(g, old),))


# --------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make(ad @ bd, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the last axis of x, w shaped (in, out)."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (y.shape[-1],))


# ----------------------------------------------------------- normalisations

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make(s, (a,), back)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    return softmax(a, axis=-1)


LN_EPS = 1e-5


def layer_norm(a, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    a = as_tensor(a)
    n = a.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least two features")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        return (rstd * (g - g.mean(axis=-1, keepdims=True)
                        - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = make(xhat, (a,), back)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# ------------------------------------------------------------------- pooling

def pool_matrix(length: int, k: int, dtype=np.float32) -> np.ndarray:
    """(length, k) averaging matrix; bin b covers [ceil(b*L/K), ceil((b+1)*L/K)).

    Rounding bin edges up puts the longer bins last (L=5, K=2 pools
    [1, 2, 3] and [4, 5]). When K divides L every bin has L/K entries.
    """
    if not 1 <= k <= length:
        raise ValueError(f"pool length {k} outside [1, {length}]")
    m = np.zeros((length, k), dtype=dtype)
    for b in range(k):
        lo = -((-b * length) // k)
        hi = -((-(b + 1) * length) // k)
        m[lo:hi, b] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x, k: int) -> Tensor:
    """Average-pool the last axis of x to length k."""
    x = as_tensor(x)
    m = pool_matrix(x.shape[-1], k, x.dtype)
    if k == x.shape[-1]:
        return x
    return matmul(x, Tensor(m))


def upsample_matrix(n: int, factor: int = 2, dtype=np.float32) -> np.ndarray:
    """(n*factor, n) bilinear interpolation weights, half-pixel centres, edge clamped."""
    out = n * factor
    m = np.zeros((out, n), dtype=dtype)
    for i in range(out):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Bilinear upsampling of a channels-last map (..., H, W, C)."""
    x = as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    uh = upsample_matrix(h, factor, x.dtype)
    uw = upsample_matrix(w, factor, x.dtype)
    xd = x.data

    lead = xd.shape[:-3]

    def rows(m, a):  # apply m along axis -3
        n, wd, c = a.shape[-3:]
        return (m @ a.reshape((-1, n, wd * c))).reshape(lead + (m.shape[0], wd, c))

    def cols(m, a):  # apply m along axis -2
        hh, n, c = a.shape[-3:]
        return (m @ a.reshape((-1, n, c))).reshape(lead + (hh, m.shape[0], c))

    out = cols(uw, rows(uh, xd))

    def back(g):
        return (rows(uh.T, cols(uw.T, g)),)

    return make(out, (x,), back)


# ------------------------------------------------------------------ convolution

def conv1d(x, w, b=None, stride: int = 1, pad=0, groups: int = 1) -> Tensor:
    """Cross-correlation over the last axis.

    x: (..., C_in, L); w: (C_out, C_in // groups, K). ``pad`` is an int
    (symmetric) or a (left, right) pair. ``groups == C_in == C_out`` gives the
    depthwise form.
    """
    x, w = as_tensor(x), as_tensor(w)
    c_in, length = x.shape[-2], x.shape[-1]
    c_out, cpg, k = w.shape
    if c_in % groups or c_out % groups or cpg != c_in // groups:
        raise ValueError(f"channel/group mismatch: C_in={c_in}, w={w.shape}, groups={groups}")
    pl, pr = (pad, pad) if isinstance(pad, int) else pad
    if k > length + pl + pr:
        raise ValueError("kernel longer than padded input")
    xd = x.data
    lead = xd.shape[:-2]
    xp = np.pad(xd, [(0, 0)] * (xd.ndim - 1) + [(pl, pr)])
    lout = (length + pl + pr - k) // stride + 1
    # cols: (..., C_in, L_out, K)
    idx = np.arange(lout)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[..., idx]
    opg = c_out // groups
    cols_g = cols.reshape(lead + (groups, cpg, lout, k))
    wg = w.data.reshape(groups, opg, cpg, k)
    out = np.einsum("...gclk,gock->...gol", cols_g, wg, optimize=True)
    out = out.reshape(lead + (c_out, lout))

    def back(g):
        gg = g.reshape(lead + (groups, opg, lout))
        gw = None
        gx = None
        if w.requires_grad:
            gw = np.einsum("...gol,...gclk->gock", gg, cols_g, optimize=True).reshape(w.shape)
        if x.requires_grad:
            gcols = np.einsum("...gol,gock->...gclk", gg, wg, optimize=True)
            gcols = gcols.reshape(lead + (c_in, lout, k))
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for j in range(k):
                gxp[..., j:j + stride * (lout - 1) + 1:stride] += gcols[..., j]
            gx = gxp[..., pl:pl + length]
        return gx, gw

    y = make(out, (x, w), back)
    if b is not None:
        y = add(y, reshape(as_tensor(b), (c_out, 1)))
    return y


def conv2d_same(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution on a channels-last map.

    x: (..., H, W, C_in); w: (K, K, C_in, C_out) with odd K.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[0]
    if k % 2 == 0 or w.shape[1] != k:
        raise ValueError("conv2d_same expects a square odd kernel")
    if w.shape[2] != x.shape[-1]:
        raise ValueError(f"channel mismatch: x has {x.shape[-1]}, w expects {w.shape[2]}")
    p = k // 2
    xd, wd = x.data, w.data
    h, wid = xd.shape[-3], xd.shape[-2]
    lead = xd.ndim - 3
    xp = np.pad(xd, [(0, 0)] * lead + [(p, p), (p, p), (0, 0)])
    out = np.zeros(xd.shape[:-1] + (wd.shape[3],), dtype=xd.dtype)
    for dy in range(k):
        for dx in range(k):
            out += xp[..., dy:dy + h, dx:dx + wid, :] @ wd[dy, dx]

    def back(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(wd)
            g2 = g.reshape(-1, g.shape[-1])
            for dy in range(k):
                for dx in range(k):
                    patch = xp[..., dy:dy + h, dx:dx + wid, :].reshape(-1, xd.shape[-1])
                    gw[dy, dx] = patch.T @ g2
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for dy in range(k):
                for dx in range(k):
                    gxp[..., dy:dy + h, dx:dx + wid, :] += g @ wd[dy, dx].T
            gx = gxp[..., p:p + h, p:p + wid, :]
        return gx, gw

    y = make(out, (x, w), back)
    if b is not None:
        y = add(y, b)
    return y
