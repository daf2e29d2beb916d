"""Differentiable operations over :class:`~noisydarts.tensor.Tensor`.

Images are NCHW at the interface. Convolutions gather their input columns in
channel-major order and hand back NCHW views over channel-major memory, which
elementwise numpy ops preserve; this keeps the im2col copies contiguous.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor

__all__ = [
    "conv2d", "relu", "batch_norm", "avg_pool2d", "max_pool2d",
    "global_avg_pool", "dense", "add", "scale", "softmax", "cross_entropy",
    "mul", "zero", "sum_all", "concat", "crop", "weighted_sum", "OP_KINDS",
]

OP_KINDS = (
    "conv2d", "relu", "batch_norm", "avg_pool2d", "max_pool2d",
    "global_avg_pool", "dense", "add", "scale", "softmax", "cross_entropy",
    "mul", "zero", "sum_all", "concat", "crop", "weighted_sum",
)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
             ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp, shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False)


def _tap(xp: np.ndarray, i: int, j: int, stride: int, dilation: int,
         ho: int, wo: int) -> tuple[slice, slice]:
    r0, c0 = i * dilation, j * dilation
    return (slice(r0, r0 + stride * (ho - 1) + 1, stride),
            slice(c0, c0 + stride * (wo - 1) + 1, stride))


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _unpad(xp: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def _pad_cnhw(x: np.ndarray, pad: int) -> np.ndarray:
    """Channel-major zero-padded copy of an NCHW array, shape (C, N, H+2p, W+2p)."""
    n, c, h, w = x.shape
    xc = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    xc[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return xc


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation without bias. ``w`` has shape (O, C/groups, kh, kw).

    The result is an NCHW view over channel-major memory.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError(
            f"conv2d: input channels {c}, kernel in-channels {cg}, out {o} "
            f"incompatible with groups={groups}")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wd, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd}")
    xc = _pad_cnhw(x.data, padding)
    padded_hw = xc.shape[2:]
    wdat = w.data
    taps = [(i, j) + _tap(xc, i, j, stride, dilation, ho, wo) for i in range(kh) for j in range(kw)]

    def col2im(dcols: np.ndarray, cin: int) -> np.ndarray:
        # dcols: (cin, kh, kw, n, ho, wo) -> NCHW gradient view
        dxc = np.zeros((cin, n) + padded_hw)
        for i, j, rs, cs in taps:
            dxc[:, :, rs, cs] += dcols[:, i, j]
        return _unpad(dxc, padding).transpose(1, 0, 2, 3)

    if groups == c and o == c and cg == 1 and c > 1:
        # depthwise, one filter per channel
        out = np.zeros((c, n, ho, wo))
        wt = wdat[:, 0]
        for i, j, rs, cs in taps:
            out += xc[:, :, rs, cs] * wt[:, i, j][:, None, None, None]

        def bw(g):
            gc = g.transpose(1, 0, 2, 3)
            dx = dw = None
            if w.requires_grad:
                dw = np.zeros_like(wdat)
                for i, j, rs, cs in taps:
                    dw[:, 0, i, j] = np.einsum("cnhw,cnhw->c", gc, xc[:, :, rs, cs])
            if x.requires_grad:
                dxc = np.zeros_like(xc)
                for i, j, rs, cs in taps:
                    dxc[:, :, rs, cs] += gc * wt[:, i, j][:, None, None, None]
                dx = _unpad(dxc, padding).transpose(1, 0, 2, 3)
            return dx, dw

        return Tensor._from_op(out.transpose(1, 0, 2, 3), "conv2d", (x, w), bw)

    og = o // groups
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i, j, rs, cs in taps:
        cols[:, i, j] = xc[:, :, rs, cs]
    del xc
    cols2 = cols.reshape(groups, cg * kh * kw, n * ho * wo)
    wmat = wdat.reshape(groups, og, cg * kh * kw)
    out = np.matmul(wmat, cols2).reshape(o, n, ho, wo)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(groups, og, n * ho * wo)
        dx = dw = None
        if w.requires_grad:
            dw = np.matmul(g2, cols2.transpose(0, 2, 1)).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.transpose(0, 2, 1), g2).reshape(c, kh, kw, n, ho, wo)
            dx = col2im(dcols, c)
        return dx, dw

    return Tensor._from_op(out.transpose(1, 0, 2, 3), "conv2d", (x, w), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor._from_op(out, "relu", (x,), lambda g: (g * (out > 0),))


def batch_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
               training: bool = True, update_stats: bool = True, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W), or (N,) for 2-d input.

    In training mode batch statistics are used and, if ``update_stats``, the
    running buffers are updated in place. In eval mode the running buffers
    are used.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {p.shape} != ({c},)")
    xd = x.data
    m = xd.size // c
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats and running_mean is not None and running_var is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * m / max(m - 1, 1)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    gdat = gamma.data.reshape(bshape) if gamma is not None else 1.0
    out = xhat * gdat
    if beta is not None:
        out = out + beta.data.reshape(bshape)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def bw(g):
        dxhat = g * gdat
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv.reshape(bshape)
        res = [dx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=axes))
        if beta is not None:
            res.append(g.sum(axis=axes))
        return res

    return Tensor._from_op(out, "batch_norm", parents, bw)


def _box_sum(xp: np.ndarray, kernel: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Sum over kernel x kernel windows of a padded array, separably."""
    span_h = stride * (ho - 1) + kernel
    span_w = stride * (wo - 1) + kernel
    rows = xp[:, :, 0:span_h - kernel + 1]
    rows = rows.copy()
    for i in range(1, kernel):
        rows += xp[:, :, i:i + span_h - kernel + 1]
    rows = rows[:, :, ::stride]
    out = rows[:, :, :, 0:span_w - kernel + 1].copy()
    for j in range(1, kernel):
        out += rows[:, :, :, j:j + span_w - kernel + 1]
    return out[:, :, :, ::stride]


def _box_sum_adjoint(g: np.ndarray, kernel: int, stride: int, padded_shape) -> np.ndarray:
    n, c, hp, wp = padded_shape
    ho, wo = g.shape[2:]
    span_h = stride * (ho - 1) + kernel
    span_w = stride * (wo - 1) + kernel
    # undo the column pass
    up = np.zeros((n, c, ho, span_w - kernel + 1))
    up[:, :, :, ::stride] = g
    cols = np.zeros((n, c, ho, wp))
    for j in range(kernel):
        cols[:, :, :, j:j + span_w - kernel + 1] += up
    # undo the row pass
    up = np.zeros((n, c, span_h - kernel + 1, wp))
    up[:, :, ::stride] = cols
    out = np.zeros(padded_shape)
    for i in range(kernel):
        out[:, :, i:i + span_h - kernel + 1] += up
    return out


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0,
               count_include_pad: bool = False) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, wd = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(wd, kernel, stride, padding, 1)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"avg_pool2d: kernel {kernel} too large for input {h}x{wd}")
    xp = _pad(x.data, padding)
    out = _box_sum(xp, kernel, stride, ho, wo)
    if count_include_pad or padding == 0:
        counts = np.full((ho, wo), float(kernel * kernel))
    else:
        counts = _box_sum(_pad(np.ones((1, 1, h, wd)), padding), kernel, stride, ho, wo)[0, 0]
    out /= counts
    padded_shape = xp.shape

    def bw(g):
        return (_unpad(_box_sum_adjoint(g / counts, kernel, stride, padded_shape), padding),)

    return Tensor._from_op(out, "avg_pool2d", (x,), bw)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; on ties the gradient goes to the first maximal tap (row-major)."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, wd = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(wd, kernel, stride, padding, 1)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"max_pool2d: kernel {kernel} too large for input {h}x{wd}")
    xp = _pad(x.data, padding, -np.inf)
    win = _windows(xp, kernel, kernel, stride, 1, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros_like(xp)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            rs, cs = _tap(xp, i, j, stride, 1, ho, wo)
            dxp[:, :, rs, cs] += np.where(arg == k, g, 0.0)
        return (_unpad(dxp, padding),)

    return Tensor._from_op(np.ascontiguousarray(out), "max_pool2d", (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy(),)

    return Tensor._from_op(out, "global_avg_pool", (x,), bw)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} != ({w.shape[0]},)")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        res = [g @ w.data, g.T @ x.data]
        if b is not None:
            res.append(g.sum(axis=0))
        return res

    return Tensor._from_op(out, "dense", parents, bw)


def add(*xs: Tensor) -> Tensor:
    """Elementwise sum of one or more same-shaped tensors."""
    if not xs:
        raise ShapeError("add: needs at least one input")
    xs = tuple(_as_tensor(x) for x in xs)
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"add: shape mismatch {shape} vs {t.shape}")
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data
    return Tensor._from_op(out, "add", xs, lambda g: [g] * len(xs))


def scale(x: Tensor, s, index: int | tuple | None = None) -> Tensor:
    """Multiply ``x`` by a scalar.

    ``s`` may be a float (constant) or a Tensor; with ``index`` the factor is
    ``s.data[index]`` and the gradient flows to that entry only.
    """
    if not isinstance(s, Tensor):
        c = float(s)
        return Tensor._from_op(x.data * c, "scale", (x,), lambda g: (g * c,))
    if index is None:
        if s.size != 1:
            raise ShapeError(f"scale: factor must be scalar, got shape {s.shape}")
        c = float(s.data.reshape(()))
    else:
        c = float(s.data[index])

    def bw(g):
        ds = np.zeros_like(s.data)
        val = float(np.vdot(g, x.data))
        if index is None:
            ds.reshape(-1)[0] = val
        else:
            ds[index] = val
        return g * c, ds

    return Tensor._from_op(x.data * c, "scale", (x, s), bw)


def weighted_sum(xs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_k weights[k] * xs[k]`` for same-shaped ``xs`` and a 1-d ``weights``."""
    if weights.shape != (len(xs),):
        raise ShapeError(f"weighted_sum: {len(xs)} inputs but weights of shape {weights.shape}")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum: shape mismatch {shape} vs {t.shape}")
    wv = weights.data
    out = xs[0].data * wv[0]
    for k in range(1, len(xs)):
        out += xs[k].data * wv[k]

    def bw(g):
        grads = [g * wv[k] if xs[k].requires_grad else None for k in range(len(xs))]
        dw = np.array([float(np.vdot(g, t.data)) for t in xs]) if weights.requires_grad else None
        return grads + [dw]

    return Tensor._from_op(out, "weighted_sum", tuple(xs) + (weights,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, "softmax", (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``labels`` are integer class indices."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"cross_entropy: labels outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return Tensor._from_op(np.array(loss), "cross_entropy", (logits,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def zero(x: Tensor, stride: int = 1) -> Tensor:
    """The 'none' op: zeros shaped like ``x`` (spatially strided if stride > 1)."""
    if stride == 1:
        shape = x.shape
    else:
        shape = x.data[:, :, ::stride, ::stride].shape
    return Tensor._from_op(np.zeros(shape), "zero", (x,), lambda g: (np.zeros_like(x.data),))


def sum_all(x: Tensor) -> Tensor:
    return Tensor._from_op(np.array(x.data.sum()), "sum_all", (x,),
                           lambda g: (np.full_like(x.data, float(g)),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat: needs at least one input")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
                a != b for d, (a, b) in enumerate(zip(ref, other)) if d != axis):
            raise ShapeError(f"concat: shape mismatch {tuple(ref)} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._from_op(out, "concat", tuple(xs), bw)


def crop(x: Tensor, offset: int) -> Tensor:
    """Drop the first ``offset`` rows and columns, ``x[:, :, o:, o:]``."""
    if x.ndim != 4 or offset >= min(x.shape[2:]):
        raise ShapeError(f"crop: offset {offset} invalid for shape {x.shape}")

    def bw(g):
        dx = np.zeros_like(x.data)
        dx[:, :, offset:, offset:] = g
        return (dx,)

    return Tensor._from_op(x.data[:, :, offset:, offset:].copy(), "crop", (x,), bw)
