"""Differentiable primitives on channels-last tensors.

Spatial ops accept ``H x W x C`` inputs or a leading batch axis
(``N x H x W x C``); the output keeps the input's rank.
"""

from __future__ import annotations

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor

# caps the im2col buffer at ~64 MB of float64
_IM2COL_BUDGET = 8_000_000
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(x.data[idx], (x,), backward)


def split_channels(x: Tensor, sizes) -> list[Tensor]:
    """Inverse of ``concat`` along the channel axis."""
    x = as_tensor(x)
    if builtins.sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {sizes} do not cover {x.shape[-1]} channels")
    out, start = [], 0
    for n in sizes:
        out.append(getitem(x, (Ellipsis, slice(start, start + n))))
        start += n
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so every output is strictly inside (0, 1)."""
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    s = np.clip(s, _SIGMOID_LO, _SIGMOID_HI)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``weight`` of shape ``m x n``.

    Evaluated as a broadcast product and reduction instead of BLAS so each
    output row is computed identically regardless of its position in ``x``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {as_tensor(bias).shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    y = (x2[:, None, :] * wd[None, :, :]).sum(axis=2).reshape(*lead, wd.shape[0])

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2[:, :, None] * wd[None, :, :]).sum(axis=1).reshape(xd.shape)
        gw = (g2[:, :, None] * x2[:, None, :]).sum(axis=0)
        return gx, gw

    out = Tensor._make(y, (x, weight), backward)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------
def _as4d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC, got shape {x.shape}")
    return x, False


def _restore(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, Ho, Wo, k, k, C) strided view of a padded NHWC array."""
    v = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return v.transpose(0, 1, 2, 4, 5, 3)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    padding: str = "same",
    stride: int = 1,
) -> Tensor:
    """2-D cross-correlation with a ``k x k x C_in x C_out`` kernel (im2col)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d kernel must be k x k x C_in x C_out, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[-1]}, kernel expects {cin}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    x4, squeeze = _as4d(x)
    xd = x4.data
    n, h, w, _ = xd.shape
    p = k // 2 if padding == "same" else 0
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and k={k}")
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    kmat = kernel.data.reshape(k * k * cin, cout)
    chunk = builtins.max(1, _IM2COL_BUDGET // builtins.max(1, ho * wo * k * k * cin))

    y = np.empty((n, ho, wo, cout))
    for s in range(0, n, chunk):
        cols = _windows(xp[s : s + chunk], k, stride, ho, wo).reshape(-1, k * k * cin)
        y[s : s + chunk] = (cols @ kmat).reshape(-1, ho, wo, cout)

    def backward(g):
        gk = np.zeros_like(kmat)
        for s in range(0, n, chunk):
            gs = g[s : s + chunk].reshape(-1, cout)
            cols = _windows(xp[s : s + chunk], k, stride, ho, wo).reshape(-1, k * k * cin)
            gk += cols.T @ gs
        if stride == 1:
            # input grad is a full correlation of g with the flipped, transposed kernel
            q = k - 1 - p
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (0, 0))) if q else g
            kflip = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gchunk = builtins.max(1, _IM2COL_BUDGET // builtins.max(1, h * w * k * k * cout))
            gx = np.empty((n, h, w, cin))
            for s in range(0, n, gchunk):
                gcols = _windows(gp[s : s + gchunk], k, 1, h, w).reshape(-1, k * k * cout)
                gx[s : s + gchunk] = (gcols @ kflip).reshape(-1, h, w, cin)
            return gx, gk.reshape(kernel.shape)
        gxp = np.zeros_like(xp)
        for s in range(0, n, chunk):
            gs = g[s : s + chunk].reshape(-1, cout)
            gcols = (gs @ kmat.T).reshape(-1, ho, wo, k, k, cin)
            for i in range(k):
                for j in range(k):
                    gxp[s : s + chunk, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
        gx = gxp[:, p : p + h, p : p + w] if p else gxp
        return gx, gk.reshape(kernel.shape)

    out = Tensor._make(y, (x4, kernel), backward)
    if bias is not None:
        out = add(out, bias)
    return _restore(out, squeeze)


def transposed_conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2
) -> Tensor:
    """Fractionally strided convolution doubling the spatial dims.

    The kernel is ``k x k x C_in x C_out`` with ``k >= stride``; the full
    ``(H-1)*s + k`` output is center-cropped to ``s*H``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride != 2:
        raise ShapeError(f"transposed_conv2d supports stride 2 only, got {stride}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] < stride:
        raise ShapeError(f"transposed_conv2d kernel must be k x k x C_in x C_out, k >= 2, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"transposed_conv2d channel mismatch: {x.shape[-1]} vs {cin}")
    if builtins.min(x.shape) <= 0:
        raise ShapeError(f"transposed_conv2d needs positive dims, got {x.shape}")
    x4, squeeze = _as4d(x)
    xd, kd = x4.data, kernel.data
    n, h, w, _ = xd.shape
    s = stride
    crop = (k - s) // 2
    full = np.zeros((n, (h - 1) * s + k, (w - 1) * s + k, cout))
    flat = xd.reshape(-1, cin)
    for a in range(k):
        for b in range(k):
            full[:, a : a + s * h : s, b : b + s * w : s] += (flat @ kd[a, b]).reshape(n, h, w, cout)
    y = full[:, crop : crop + s * h, crop : crop + s * w].copy()

    def backward(g):
        gfull = np.zeros_like(full)
        gfull[:, crop : crop + s * h, crop : crop + s * w] = g
        gx = np.zeros((n * h * w, cin))
        gk = np.zeros_like(kd)
        for a in range(k):
            for b in range(k):
                ga = gfull[:, a : a + s * h : s, b : b + s * w : s].reshape(-1, cout)
                gx += ga @ kd[a, b].T
                gk[a, b] = flat.T @ ga
        return gx.reshape(xd.shape), gk

    out = Tensor._make(y, (x4, kernel), backward)
    if bias is not None:
        out = add(out, bias)
    return _restore(out, squeeze)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; the gradient goes to the first argmax."""
    x = as_tensor(x)
    x4, squeeze = _as4d(x)
    n, h, w, c = x4.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    blocks = x4.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return _restore(Tensor._make(y, (x4,), backward), squeeze)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` mean pooling."""
    x = as_tensor(x)
    x4, squeeze = _as4d(x)
    n, h, w, c = x4.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool factor {factor} does not divide {h}x{w}")
    r = reshape(x4, (n, h // factor, factor, w // factor, factor, c))
    y = mean(r, axis=(2, 4))
    return _restore(y, squeeze)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``... x H x W x C -> ... x 1 x 1 x C``."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects HxWxC, got {x.shape}")
    return mean(x, axis=(-3, -2), keepdims=True)


def channel_stat_maps(x: Tensor) -> Tensor:
    """Stack of per-pixel channel max (channel 0) and channel mean (channel 1)."""
    x = as_tensor(x)
    xd = x.data
    if xd.shape[-1] < 1:
        raise ShapeError("channel_stat_maps needs at least one channel")
    arg = xd.argmax(axis=-1)
    mx = np.take_along_axis(xd, arg[..., None], axis=-1)

    def backward(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, arg[..., None], g, axis=-1)
        return (gx,)

    max_map = Tensor._make(mx, (x,), backward)
    return concat([max_map, mean(x, axis=-1, keepdims=True)], axis=-1)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)


def scale_channels(f: Tensor, a: Tensor) -> Tensor:
    """Multiply every pixel of ``f`` by the per-channel vector ``a`` (1x1xC)."""
    f, a = as_tensor(f), as_tensor(a)
    if a.shape[-3:-1] != (1, 1) or a.shape[-1] != f.shape[-1]:
        raise ShapeError(f"scale_channels: {f.shape} vs {a.shape}")
    return mul(f, a)


def scale_spatial(f: Tensor, m: Tensor) -> Tensor:
    """Multiply every channel of ``f`` by the single-channel map ``m`` (HxWx1)."""
    f, m = as_tensor(f), as_tensor(m)
    if m.shape[-1] != 1 or m.shape[:-1] != f.shape[:-1]:
        raise ShapeError(f"scale_spatial: {f.shape} vs {m.shape}")
    return mul(f, m)


# ---------------------------------------------------------------------------
# graph ops
# ---------------------------------------------------------------------------
def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]``; duplicate indices accumulate in backward."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(x.data[idx], (x,), backward)


def segment_sum(values: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``values`` into ``n`` buckets given by ``segments``.

    Within each bucket the contributions are sorted by value before adding,
    so the result does not depend on the order rows arrive in. Empty buckets
    are zero.
    """
    values = as_tensor(values)
    seg = np.asarray(segments, dtype=np.int64)
    vd = values.data
    feat = vd.shape[1:]
    if len(seg) == 0:
        return Tensor._make(np.zeros((n,) + feat), (values,), lambda g: (np.zeros_like(vd),))
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.searchsorted(sorted_seg, np.arange(n))
    slot = np.arange(len(seg)) - starts[sorted_seg]
    width = int(slot.max()) + 1
    padded = np.zeros((n, width) + feat)
    padded[sorted_seg, slot] = vd[order]
    y = np.sort(padded, axis=1).sum(axis=1)
    return Tensor._make(y, (values,), lambda g: (g[seg],))


def bucket_counts(segments: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(np.asarray(segments, dtype=np.int64), minlength=n).astype(np.float64)


def segment_mean(values: Tensor, segments: np.ndarray, n: int) -> Tensor:
    """Mean of the rows landing in each bucket; empty buckets are zero."""
    counts = bucket_counts(segments, n)
    scale = 1.0 / np.maximum(counts, 1.0)
    return mul(segment_sum(values, segments, n), scale.reshape((n,) + (1,) * (as_tensor(values).ndim - 1)))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def bce_loss(prob: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Binary cross-entropy of probabilities against {0,1} targets."""
    prob = as_tensor(prob)
    t = as_tensor(target).data
    p = np.clip(prob.data, eps, 1.0 - eps)
    val = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    n = p.size

    def backward(g):
        return (g * (p - t) / (p * (1.0 - p)) / n,)

    return Tensor._make(np.array(val), (prob,), backward)


__all__ = [
    "add",
    "avg_pool",
    "bce_loss",
    "channel_stat_maps",
    "concat",
    "concat_channels",
    "conv2d",
    "getitem",
    "global_avg_pool",
    "linear",
    "matmul",
    "max_pool2",
    "mean",
    "mse_loss",
    "mul",
    "relu",
    "reshape",
    "scale_channels",
    "scale_spatial",
    "segment_mean",
    "segment_sum",
    "sigmoid",
    "split_channels",
    "sub",
    "sum",
    "take_rows",
    "transposed_conv2d",
]
