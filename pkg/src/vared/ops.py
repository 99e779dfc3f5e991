"""Differentiable primitives.

Every op computes its forward value with numpy and, when recording, registers
a closure mapping the output gradient to one gradient per input.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, current_tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward)
    return out


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _const(b, a)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _emit(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _emit(np.array(a.data[idx]), (a,), bw)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a: Tensor, indices: Sequence[int], axis: int) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# --------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1 - y * y),))


def phi_clamp(x: Tensor) -> Tensor:
    """max(tanh(x), 0); values lie in [0, 1) and the subgradient at 0 is 0."""
    y = np.tanh(x.data)
    mask = x.data > 0
    # tanh saturates to exactly 1.0 in floating point for large inputs
    out = np.minimum(y * mask, np.nextafter(x.data.dtype.type(1), x.data.dtype.type(0)))
    return _emit(out, (x,), lambda g: (g * (1 - y * y) * mask,))


def elementwise(kind: str, x: Tensor) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "phi_clamp": phi_clamp}[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


# ------------------------------------------------------------------ linear

def fully_connected(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b with x [N, D_in], w [D_in, D_out]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimension mismatch: x has D_in={x.shape[1]}, w has D_in={w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"bias must have shape ({w.shape[1]},), got {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = [g @ wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit(out, (x, w) if b is None else (x, w, b), bw)


# ------------------------------------------------------------- convolution

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v  # type: ignore[return-value]


def conv_output_shape(in_dims, kernel, stride, padding) -> tuple[int, int, int]:
    out = []
    for name, n, k, s, p in zip("THW", in_dims, kernel, stride, padding):
        if s < 1:
            raise ShapeError(f"stride along {name} must be >= 1, got {s}")
        if k > n + 2 * p:
            raise ShapeError(f"kernel {name}={k} exceeds padded input {name}={n + 2 * p}")
        out.append((n + 2 * p - k) // s + 1)
    return tuple(out)  # type: ignore[return-value]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """3-D cross-correlation over [N, C, T, H, W] via im2col and a matmul.

    ``w`` has shape [C_out, C_in / groups, k_t, k_h, k_w]. 2-D and 1-D temporal
    convolutions are the k_t = 1 and k_h = k_w = 1 special cases.
    """
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D [N,C,T,H,W], got {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be 5-D, got {w.shape}")
    n, c, *in_dims = x.shape
    co, cig, *kernel = w.shape
    if c % groups or co % groups:
        raise ShapeError(f"channels C_in={c}, C_out={co} not divisible by groups={groups}")
    if cig * groups != c:
        raise ShapeError(f"C_in mismatch: input has C_in={c}, weight expects {cig * groups}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias must have shape ({co},), got {b.shape}")
    to, ho, wo = conv_output_shape(in_dims, kernel, stride, padding)
    kt, kh, kw = kernel
    st, sh, sw = stride
    pt, ph, pw = padding
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw][:, :, :to, :ho, :wo]
    # cols: [N, To, Ho, Wo, C, kt, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    k = kt * kh * kw
    wd = w.data
    if groups == 1:
        cmat = cols.reshape(-1, c * k)
        wmat = wd.reshape(co, c * k)
        out = (cmat @ wmat.T).reshape(n, to, ho, wo, co)
    else:
        cg = cols.reshape(n, to, ho, wo, groups, cig, k)
        wg = wd.reshape(groups, co // groups, cig, k)
        out = np.einsum("nthwgik,goik->nthwgo", cg, wg, optimize=True).reshape(n, to, ho, wo, co)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if b is not None:
        out += b.data.reshape(1, co, 1, 1, 1)

    def bw(g):
        gm = g.transpose(0, 2, 3, 4, 1)  # N, To, Ho, Wo, Co
        if groups == 1:
            gmat = gm.reshape(-1, co)
            dw = (gmat.T @ cmat).reshape(wd.shape)
            dcols = (gmat @ wmat).reshape(n, to, ho, wo, c, kt, kh, kw)
        else:
            gg = gm.reshape(n, to, ho, wo, groups, co // groups)
            dw = np.einsum("nthwgo,nthwgik->goik", gg, cg, optimize=True).reshape(wd.shape)
            dcols = np.einsum("nthwgo,goik->nthwgik", gg, wg, optimize=True).reshape(
                n, to, ho, wo, c, kt, kh, kw)
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        dcols_t = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)  # N, C, To, Ho, Wo, kt, kh, kw
        for a, bb, cc in itertools.product(range(kt), range(kh), range(kw)):
            dxp[:, :, a:a + st * (to - 1) + 1:st, bb:bb + sh * (ho - 1) + 1:sh,
                cc:cc + sw * (wo - 1) + 1:sw] += dcols_t[..., a, bb, cc]
        dx = dxp[:, :, pt:pt + in_dims[0], ph:ph + in_dims[1], pw:pw + in_dims[2]]
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _emit(out, (x, w) if b is None else (x, w, b), bw)


# ------------------------------------------------------------- normalization

class RunningStats:
    """Per-channel running mean/variance updated by momentum in train mode."""

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, dtype=np.float32):
        self.mean = np.zeros(num_features, dtype=dtype)
        self.var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, mode: str = "train",
               eps: float = BN_EPS) -> Tensor:
    """Normalize over every axis except the channel axis (axis 1)."""
    c = x.shape[1]
    if stats.mean.shape != (c,) or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm channel mismatch: input has C={c}, stats have {stats.mean.shape[0]}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if mode == "train":
        m = int(np.prod([x.shape[a] for a in axes]))
        if x.shape[0] == 0 or m == 0:
            raise ShapeError("batch_norm in train mode needs a non-empty batch")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        mom = stats.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.mean[:] = (1 - mom) * stats.mean + mom * mu
        stats.var[:] = (1 - mom) * stats.var + mom * unbiased
    elif mode == "eval":
        mu, var, m = stats.mean, stats.var, None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if m is None:
            dx = dxhat * inv.reshape(bshape)
        else:
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return _emit(out.astype(xd.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------- pooling

def global_spatial_pool(x: Tensor) -> Tensor:
    """Mean over H and W; C and T are flattened (C-major) into one axis of size C*T."""
    if x.ndim != 5:
        raise ShapeError(f"global_spatial_pool expects [N,C,T,H,W], got {x.shape}")
    n, c, t = x.shape[:3]
    return reshape(mean(x, axis=(3, 4)), (n, c * t))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over (T, H, W) -> [N, C]."""
    return mean(x, axis=(2, 3, 4))


# ------------------------------------------------------------------ losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"got {labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ------------------------------------------------------------ policy helpers

def policy_normalize(v: Tensor) -> Tensor:
    """Row-normalize [N, S] non-negative weights to sum 1.

    Rows summing to zero fall back to a one-hot on the first entry and carry
    no gradient.
    """
    vd = v.data
    s = vd.sum(axis=1, keepdims=True)
    dead = (s <= 0).reshape(-1)
    safe = np.where(s > 0, s, 1)
    out = vd / safe
    out[dead] = 0
    out[dead, 0] = 1

    def bw(g):
        gv = (g - (g * out).sum(axis=1, keepdims=True)) / safe
        gv[dead] = 0
        return (gv,)

    return _emit(out, (v,), bw)


def policy_fallback(v: Tensor) -> Tensor:
    """Pass weights through unchanged except all-zero rows, which become one-hot on entry 1."""
    vd = v.data
    dead = vd.sum(axis=1) <= 0
    out = vd.copy()
    out[dead, 0] = 1

    def bw(g):
        g = g.copy()
        g[dead] = 0
        return (g,)

    return _emit(out, (v,), bw)
