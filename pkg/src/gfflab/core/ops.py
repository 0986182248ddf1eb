"""Differentiable primitives on NCHW tensors."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, check_same_dtype, make_result

_threads = 1


def set_num_threads(n: int):
    """Split convolutions over the batch axis into ``n`` worker threads.

    Chunks are fixed by index and weight gradients are reduced in chunk
    order, so results are reproducible for a given ``n``.
    """
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def get_num_threads() -> int:
    return _threads


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 4 and b.ndim == 4:
        sa, sb = a.shape, b.shape
        if (sa[0], sa[2], sa[3]) == (sb[0], sb[2], sb[3]):
            if sb[1] == 1:
                return "b_channel"
            if sa[1] == 1:
                return "a_channel"
    raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} (only 1-channel broadcast is allowed)")


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=1, keepdims=True)


def add(a, b) -> Tensor:
    """Elementwise sum; a scalar or a 1-channel map broadcasts over channels."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise ValueError("only python scalars may be added to a tensor without wrapping")
        return make_result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    check_same_dtype(a, b)
    kind = _broadcast_kind(a.data, b.data)

    def backward(g):
        ga = _reduce_channel(g) if kind == "a_channel" else g
        gb = _reduce_channel(g) if kind == "b_channel" else g
        return ga, gb

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Elementwise product with the same broadcasting rule as :func:`add`."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise ValueError("only python scalars may multiply a tensor without wrapping")
        return make_result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    check_same_dtype(a, b)
    kind = _broadcast_kind(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd
        gb = g * ad
        if kind == "a_channel":
            ga = _reduce_channel(ga)
        elif kind == "b_channel":
            gb = _reduce_channel(gb)
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return make_result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g, dtype=g.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return make_result(np.asarray(x.data.sum() / n, dtype=x.dtype), (x,),
                       lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


# -- convolution --------------------------------------------------------------

def _im2col(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * kh * kw, n * ho * wo)


def _conv_chunk(xp, w2d, kh, kw, stride, dilation, ho, wo):
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = w2d @ cols
    return cols, out.reshape(w2d.shape[0], xp.shape[0], ho, wo)


def _chunks(n: int):
    k = min(_threads, n)
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(k)]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding (NCHW input, OIHW weights)."""
    tensors = (x, w) if b is None else (x, w, b)
    check_same_dtype(*tensors)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {c2}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ekh, ekw = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    hp, wp = h + 2 * padding, wd + 2 * padding
    if ekh > hp or ekw > wp:
        raise ValueError(f"conv2d: kernel extent {ekh}x{ekw} exceeds padded input {hp}x{wp}")
    ho = (hp - ekh) // stride + 1
    wo = (wp - ekw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w2d = w.data.reshape(o, -1)
    parts = _chunks(n)
    if len(parts) == 1:
        results = [_conv_chunk(xp, w2d, kh, kw, stride, dilation, ho, wo)]
    else:
        with ThreadPoolExecutor(len(parts)) as pool:
            results = list(pool.map(
                lambda se: _conv_chunk(xp[se[0]:se[1]], w2d, kh, kw, stride, dilation, ho, wo), parts))
    out = np.concatenate([r[1] for r in results], axis=1) if len(results) > 1 else results[0][1]
    out = out.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    need_dx = x.requires_grad

    def backward(g):
        gt = g.transpose(1, 0, 2, 3)
        dw = np.zeros_like(w2d)
        dxp = np.zeros(xp.shape, dtype=g.dtype) if need_dx else None
        for (s, e), (cols, _) in zip(parts, results):
            g2 = gt[:, s:e].reshape(o, -1)
            dw += g2 @ cols.T
            if need_dx:
                dcols = (w2d.T @ g2).reshape(c, kh, kw, e - s, ho, wo)
                tgt = dxp[s:e]
                for i in range(kh):
                    for j in range(kw):
                        hi, wj = i * dilation, j * dilation
                        tgt[:, :, hi:hi + stride * (ho - 1) + 1:stride,
                            wj:wj + stride * (wo - 1) + 1:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = None
        if need_dx:
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
            dx = np.ascontiguousarray(dx)
        grads = [dx, dw.reshape(w.shape)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out, tensors, backward, "conv2d")


# -- separable linear resampling ------------------------------------------------

def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray, name: str) -> Tensor:
    """out[n,c] = rows @ x[n,c] @ cols.T, with the transposed map as backward."""
    rows = rows.astype(x.dtype)
    cols = cols.astype(x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return make_result(out, (x,), backward, name)


def bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix (n_out, n_in), half-pixel centers, border clamp."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for d in range(n_out):
        src = min(max((d + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[d, i0] += 1.0 - f
        m[d, i1] += f
    return m


def bilinear_resample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resample: output size must be positive")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "resample_identity")
    return _separable(x, bilinear_weights(h, out_h), bilinear_weights(w, out_w), "bilinear_resample")


def pool_bounds(n_in: int, bins: int):
    """Non-overlapping near-equal partition of ``range(n_in)`` into ``bins`` parts."""
    return [((i * n_in) // bins, ((i + 1) * n_in) // bins) for i in range(bins)]


def _pool_weights(n_in: int, bins: int) -> np.ndarray:
    m = np.zeros((bins, n_in))
    for i, (s, e) in enumerate(pool_bounds(n_in, bins)):
        m[i, s:e] = 1.0 / (e - s)
    return m


def avg_pool_adaptive(x: Tensor, bin_h: int, bin_w: int) -> Tensor:
    h, w = x.shape[2:]
    if not (1 <= bin_h <= h and 1 <= bin_w <= w):
        raise ValueError(f"avg_pool_adaptive: bins {bin_h}x{bin_w} do not fit input {h}x{w}")
    return _separable(x, _pool_weights(h, bin_h), _pool_weights(w, bin_w), "avg_pool_adaptive")


# -- normalization -------------------------------------------------------------

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, training: bool,
               eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (N, H, W)."""
    check_same_dtype(x, gamma, beta)
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    n, c, h, w = x.shape
    m = n * h * w
    if m == 0:
        raise ValueError("batch_norm: zero elements per channel")
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)

    if not training:
        inv = (1.0 / np.sqrt(state.var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
        mu = state.mean.astype(x.dtype).reshape(1, c, 1, 1)
        xhat = (x.data - mu) * inv
        out = gd * xhat + bd

        def backward_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, gamma, beta), backward_eval, "batch_norm_eval")

    if m < 2:
        raise ValueError("batch_norm: training mode needs at least 2 elements per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gd * xhat + bd

    state.mean[...] = (1 - momentum) * state.mean + momentum * mu.reshape(c)
    state.var[...] = (1 - momentum) * state.var + momentum * var.reshape(c) * (m / (m - 1))

    def backward(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


# -- channel plumbing ----------------------------------------------------------

def concat_channels(xs) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels: empty input list")
    check_same_dtype(*xs)
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: spatial mismatch {t.shape} vs {ref}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return make_result(out, xs, backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


# -- loss -------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, ignore_label: int = 255) -> Tensor:
    """Mean pixel cross-entropy over non-ignored labels."""
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_label
    count = int(valid.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every pixel is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError("softmax_cross_entropy: label outside [0, K)")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        d = (p - onehot) * valid[:, None] * (g / count)
        return (d.astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")
