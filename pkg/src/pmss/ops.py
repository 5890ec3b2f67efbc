"""Differentiable primitives over NCHW tensors.

Convolutions are stride-1, zero same-padded, and dispatched to BLAS: a 1x1
kernel is a single batched GEMM, a 3x3 kernel is nine tap-shifted GEMMs.
Grouped channels never mix across groups. All elementwise ops require exact
shape matches; broadcasting only happens inside dedicated primitives (bias,
spatial expansion) where the gradient is a well-defined reduction.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, record, wants_grad

PROB_FLOOR = 1e-300  # guards log() against exact zeros from total underflow


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_nchw(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an NxCxHxW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise / reductions

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if wants_grad(a, b):
        record("add", out, (a, b), lambda g: (g.copy(), g.copy()))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if wants_grad(a, b):
        ad, bd = a.data, b.data
        record("mul", out, (a, b), lambda g: (g * bd, g * ad))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    if wants_grad(x):
        record("scale", out, (x,), lambda g: (g * c,))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if wants_grad(x):
        mask = x.data > 0.0
        record("relu", out, (x,), lambda g: (g * mask,))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    if wants_grad(x):
        shape = x.shape
        record("sum_all", out, (x,), lambda g: (np.full(shape, g, dtype=DTYPE),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())
    if wants_grad(x):
        shape = x.shape
        record("mean_all", out, (x,), lambda g: (np.full(shape, g / n, dtype=DTYPE),))
    return out


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if wants_grad(x):
        orig = x.shape
        record("reshape", out, (x,), lambda g: (g.reshape(orig),))
    return out


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    if wants_grad(x):
        inv = tuple(np.argsort(axes))
        record("permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))
    return out


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits back exactly."""
    if len(tensors) < 2:
        raise ShapeError("concat_channels needs at least two tensors")
    n, _, h, w = tensors[0].shape if tensors[0].ndim == 4 else (None,) * 4
    for t in tensors:
        _check_nchw(t, "concat_channels")
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch {t.shape} vs {tensors[0].shape}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    if wants_grad(*tensors):
        splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
        record(
            "concat_channels",
            out,
            tensors,
            lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1)),
        )
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_nchw(x, "slice_channels")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels: range [{start},{stop}) outside C={x.shape[1]}")
    out = Tensor(np.ascontiguousarray(x.data[:, start:stop]))
    if wants_grad(x):
        shape = x.shape

        def vjp(g):
            dx = np.zeros(shape, dtype=DTYPE)
            dx[:, start:stop] = g
            return (dx,)

        record("slice_channels", out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# convolution

def _im2col(xd: np.ndarray, k: int, d: int, pad: int) -> np.ndarray:
    """(N,Cin,H,W) -> (Cin*k*k, N*H*W) columns, channel-major then tap-major.

    Row order matches weight.reshape(Cout, Cin/g*k*k) after the group split,
    so the whole convolution is one stacked GEMM.
    """
    n, cin, h, w = xd.shape
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xt = xd.transpose(1, 0, 2, 3)
    if k == 1:
        return np.ascontiguousarray(xt).reshape(cin, n * h * w)
    cols = np.empty((cin, k * k, n, h, w), dtype=DTYPE)
    t = 0
    for ky in range(k):
        for kx in range(k):
            cols[:, t] = xt[:, :, ky * d : ky * d + h, kx * d : kx * d + w]
            t += 1
    return cols.reshape(cin, k * k, n * h * w)


def conv2d(x: Tensor, layer) -> Tensor:
    """Stride-1 grouped dilated convolution with zero same-padding.

    ``layer`` supplies weight (Cout, Cin/g, k, k), bias (Cout,), kernel size
    in {1, 3}, dilation, and groups; spatial extent is preserved for every
    dilation because padding is pinned to dilation*(k-1)/2. Lowered to one
    stacked GEMM over im2col columns; the backward pass recomputes columns
    instead of caching them.
    """
    _check_nchw(x, "conv2d")
    w, b = layer.weight, layer.bias
    n, cin, h, wd = x.shape
    cout = layer.out_channels
    g = layer.groups
    if cin != layer.in_channels:
        raise ShapeError(f"conv2d: input has {cin} channels, layer expects {layer.in_channels}")
    if cin % g or cout % g:
        raise ShapeError(f"conv2d: channels ({cin}->{cout}) not divisible by groups={g}")
    k, d = layer.kernel, layer.dilation
    pad = d * (k - 1) // 2
    cig, cog = cin // g, cout // g
    nhw = n * h * wd
    w3 = w.data.reshape(g, cog, cig * k * k)

    cols = _im2col(x.data, k, d, pad).reshape(g, cig * k * k, nhw)
    raw = np.matmul(w3, cols).reshape(cout, n, h, wd)
    out_data = np.ascontiguousarray(raw.transpose(1, 0, 2, 3))
    out_data += b.data.reshape(1, cout, 1, 1)
    out = Tensor(out_data)

    if wants_grad(x, w, b):
        need_x, need_w, need_b = x._needs, w._needs, b._needs

        def vjp(grad):
            dx = dw = db = None
            gf = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(g, cog, nhw)
            if need_x:
                dcols = np.matmul(w3.transpose(0, 2, 1), gf).reshape(cin, k * k, n, h, wd)
                if k == 1:
                    dx = np.ascontiguousarray(dcols.reshape(cin, n, h, wd).transpose(1, 0, 2, 3))
                else:
                    hp, wp = h + 2 * pad, wd + 2 * pad
                    dxt = np.zeros((cin, n, hp, wp), dtype=DTYPE)
                    t = 0
                    for ky in range(k):
                        for kx in range(k):
                            dxt[:, :, ky * d : ky * d + h, kx * d : kx * d + wd] += dcols[:, t]
                            t += 1
                    dx = np.ascontiguousarray(
                        dxt[:, :, pad : pad + h, pad : pad + wd].transpose(1, 0, 2, 3)
                    )
            if need_w:
                cols_b = _im2col(x.data, k, d, pad).reshape(g, cig * k * k, nhw)
                dw = np.matmul(gf, cols_b.transpose(0, 2, 1)).reshape(w.shape)
            if need_b:
                db = grad.sum(axis=(0, 2, 3))
            return dx, dw, db

        record("conv2d", out, (x, w, b), vjp)
    return out


# ---------------------------------------------------------------------------
# pooling / resizing

def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, ceil mode; clipped windows average valid pixels only."""
    _check_nchw(x, "avg_pool2")
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xp = x.data
    if (h, w) != (2 * ho, 2 * wo):
        xp = np.pad(xp, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)))
    sums = xp.reshape(n, c, ho, 2, wo, 2).sum(axis=(3, 5))
    rows = np.minimum(2, h - 2 * np.arange(ho))
    cols = np.minimum(2, w - 2 * np.arange(wo))
    counts = (rows[:, None] * cols[None, :]).astype(DTYPE)
    out = Tensor(sums / counts)
    if wants_grad(x):

        def vjp(g):
            t = g / counts
            dx = np.repeat(np.repeat(t, 2, axis=2), 2, axis=3)[:, :, :h, :w]
            return (np.ascontiguousarray(dx),)

        record("avg_pool2", out, (x,), vjp)
    return out


_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear resampling matrix, sample centers at (i+0.5)*scale-0.5.

    Rows are convex (nonnegative, sum to 1), so resizing a per-pixel simplex
    keeps it on the simplex.
    """
    key = (n_in, n_out)
    mat = _INTERP_CACHE.get(key)
    if mat is None:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(np.int64)
        frac = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        mat = np.zeros((n_out, n_in), dtype=DTYPE)
        rows = np.arange(n_out)
        np.add.at(mat, (rows, lo), 1.0 - frac)
        np.add.at(mat, (rows, hi), frac)
        _INTERP_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling to (out_h, out_w)."""
    _check_nchw(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} must be >= 1x1")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = Tensor(x.data.copy())
        if wants_grad(x):
            record("bilinear_resize", out, (x,), lambda g: (g.copy(),))
        return out
    ry = _interp_matrix(h, out_h)
    rx = _interp_matrix(w, out_w)
    out = Tensor(np.matmul(np.matmul(ry, x.data), rx.T))
    if wants_grad(x):
        record(
            "bilinear_resize",
            out,
            (x,),
            lambda g: (np.matmul(np.matmul(ry.T, g), rx),),
        )
    return out


def global_max_pool(x: Tensor) -> Tensor:
    """NxCxHxW -> NxC spatial max; gradient routes to the first argmax."""
    _check_nchw(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = Tensor(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0])
    if wants_grad(x):

        def vjp(g):
            dx = np.zeros((n, c, h * w), dtype=DTYPE)
            np.put_along_axis(dx, idx[:, :, None], g[:, :, None], axis=2)
            return (dx.reshape(n, c, h, w),)

        record("global_max_pool", out, (x,), vjp)
    return out


def broadcast_to_batch(x: Tensor, n: int) -> Tensor:
    """Tile a tensor along a new leading batch axis; gradient sums it out."""
    out = Tensor(np.broadcast_to(x.data, (n, *x.shape)).copy())
    if wants_grad(x):
        record("broadcast_to_batch", out, (x,), lambda g: (g.sum(axis=0),))
    return out


def expand_spatial(v: Tensor, h: int, w: int) -> Tensor:
    """Copy an NxK vector to every location of an NxKxHxW map."""
    if v.ndim != 2:
        raise ShapeError(f"expand_spatial expects NxK, got shape {v.shape}")
    out = Tensor(np.broadcast_to(v.data[:, :, None, None], (*v.shape, h, w)).copy())
    if wants_grad(v):
        record("expand_spatial", out, (v,), lambda g: (g.sum(axis=(2, 3)),))
    return out


# ---------------------------------------------------------------------------
# linear / softmax

def linear(x: Tensor, layer) -> Tensor:
    """Affine map on the last axis: (..., F) -> (..., G)."""
    w, b = layer.weight, layer.bias
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"linear: input has {x.shape[-1]} features, layer expects {layer.in_features}")
    out = Tensor(x.data @ w.data.T + b.data)
    if wants_grad(x, w, b):
        need_x, need_w, need_b = x._needs, w._needs, b._needs
        xd = x.data

        def vjp(g):
            dx = dw = db = None
            g2 = g.reshape(-1, g.shape[-1])
            if need_x:
                dx = (g @ w.data).reshape(xd.shape)
            if need_w:
                dw = g2.T @ xd.reshape(-1, xd.shape[-1])
            if need_b:
                db = g2.sum(axis=0)
            return dx, dw, db

        record("linear", out, (x, w, b), vjp)
    return out


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(p: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return p * (g - (g * p).sum(axis=axis, keepdims=True))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an NxKxHxW tensor."""
    _check_nchw(x, "softmax_channels")
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs K>=2 channels, got {x.shape[1]}")
    p = _softmax(x.data, axis=1)
    out = Tensor(p)
    if wants_grad(x):
        record("softmax_channels", out, (x,), lambda g: (_softmax_vjp(p, g, 1),))
    return out


def softmax_vec(x: Tensor) -> Tensor:
    """Softmax over the last axis (class-probability vectors)."""
    p = _softmax(x.data, axis=-1)
    out = Tensor(p)
    if wants_grad(x):
        record("softmax_vec", out, (x,), lambda g: (_softmax_vjp(p, g, -1),))
    return out


# ---------------------------------------------------------------------------
# loss

def _validate_labels(labels: np.ndarray, k: int, ignore_index: int | None) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("cross_entropy: labels must be integers")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        bad = checked[(checked < 0) | (checked >= k)][0]
        raise ValueError(f"cross_entropy: label {bad} outside [0,{k}) and not ignore_index")
    return valid


def cross_entropy(
    pred: Tensor,
    target: np.ndarray,
    ignore_index: int | None = None,
    *,
    from_logits: bool,
) -> Tensor:
    """Mean negative log-likelihood of the target labels over non-ignored pixels.

    With ``from_logits`` the softmax is fused in log-sum-exp form; otherwise
    ``pred`` is already a per-pixel distribution and is read directly.
    """
    _check_nchw(pred, "cross_entropy")
    n, k, h, w = pred.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {(n, h, w)}")
    valid = _validate_labels(target, k, ignore_index)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: no non-ignored pixels")
    gather = np.where(valid, target, 0).astype(np.int64)[:, None]

    if from_logits:
        z = pred.data - pred.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        picked = np.take_along_axis(logp, gather, axis=1)[:, 0]
        out = Tensor(-(picked * valid).sum() / count)
        if wants_grad(pred):

            def vjp(g):
                d = np.exp(logp)
                onehot = np.zeros_like(d)
                np.put_along_axis(onehot, gather, 1.0, axis=1)
                d -= onehot
                d *= valid[:, None] * (float(g) / count)
                return (d,)

            record("cross_entropy", out, (pred,), vjp)
        return out

    p_t = np.take_along_axis(pred.data, gather, axis=1)[:, 0]
    p_safe = np.maximum(p_t, PROB_FLOOR)
    out = Tensor(-(np.log(p_safe) * valid).sum() / count)
    if wants_grad(pred):

        def vjp(g):
            d = np.zeros(pred.shape, dtype=DTYPE)
            live = valid & (p_t >= PROB_FLOOR)
            contrib = np.where(live, -float(g) / (count * p_safe), 0.0)
            np.put_along_axis(d, gather, contrib[:, None], axis=1)
            return (d,)

        record("cross_entropy", out, (pred,), vjp)
    return out
