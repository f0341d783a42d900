"""Differentiable operations on :class:`~kiprn.tensor.Tensor`.

All image tensors are NCHW.  Every op computes its forward value with plain
numpy and, when recording, registers a closure mapping the output gradient
to input gradients.
"""
from __future__ import annotations

import contextlib

from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .tensor import ShapeError, Tensor, record


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return record("add", out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    return record("mul", out, (a, b), lambda g: (g * b.data, g * a.data))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    out = Tensor(np.sum(x.data, dtype=x.dtype))
    return record("sum", out, (x,), lambda g: (np.full_like(x.data, g),))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    out = Tensor(y)
    return record("relu", out, (x,), lambda g: (g * (y > 0),))


activation = relu


def concat(xs: list, axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(xs), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, NCHW -> [N, C]."""
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return record("gap", out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x [N, F], weight [O, F]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def bw(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    return record("linear", out, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# convolution


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        return 0
    return span // stride + 1


# FFT is chosen for stride-1 convs with kernels >= this size; "im2col" or
# "fft" forces one path everywhere.
FFT_MIN_KERNEL = 5
CONV_PATH = "auto"


@contextlib.contextmanager
def conv_path(mode: str):
    """Temporarily force the conv2d path: "auto", "im2col" or "fft"."""
    global CONV_PATH
    if mode not in ("auto", "im2col", "fft"):
        raise ValueError(f"unknown conv path {mode!r}")
    prev, CONV_PATH = CONV_PATH, mode
    try:
        yield
    finally:
        CONV_PATH = prev


def _use_fft(kh: int, kw: int, stride: int) -> bool:
    if CONV_PATH == "fft":
        return stride == 1
    if CONV_PATH == "im2col":
        return False
    return stride == 1 and min(kh, kw) >= FFT_MIN_KERNEL


def _conv_im2col(x: Tensor, weight: Tensor, stride: int, padding: int, ho: int, wo: int):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    # channel-major internal layout keeps every patch row a contiguous slab
    xc = x.data.transpose(1, 0, 2, 3)
    if padding:
        xc = np.pad(xc, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    pointwise = kh == kw == 1 and stride == 1
    if pointwise:
        cols = np.ascontiguousarray(xc).reshape(c, n * ho * wo)
    else:
        cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xc[:, :, i : i + hs : stride, j : j + ws : stride]
        cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = weight.data.reshape(o, -1)
    y = np.ascontiguousarray((w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g, need_x, need_w):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if need_w else None
        gx = None
        if need_x:
            dcols = w2.T @ g2
            if pointwise:
                gxc = dcols.reshape(c, n, ho, wo)
            else:
                dcols = dcols.reshape(c, kh, kw, n, ho, wo)
                gxc = np.zeros(xc.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxc[:, :, i : i + hs : stride, j : j + ws : stride] += dcols[:, i, j]
                if padding:
                    gxc = gxc[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxc.transpose(1, 0, 2, 3))
        return gx, gw

    return y, bw


def _conv_fft(x: Tensor, weight: Tensor, padding: int):
    """Stride-1 correlation in the frequency domain.

    Transforms span the padded input exactly; valid output indices never
    reach the circular wrap-around, so no extra zero padding is needed.
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    dt = x.dtype
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    l1, l2 = xp.shape[2], xp.shape[3]
    ho, wo = l1 - kh + 1, l2 - kw + 1
    s = (l1, l2)
    xf = sfft.rfft2(xp, s=s)
    nf = xf.shape[2] * xf.shape[3]
    xm = xf.reshape(n, c, nf).transpose(2, 0, 1)                     # F, N, C
    wf = sfft.rfft2(weight.data, s=s).reshape(o, c, nf).transpose(2, 1, 0)  # F, C, O
    yf = np.matmul(xm, np.conj(wf)).transpose(1, 2, 0).reshape(n, o, l1, -1)
    y = np.ascontiguousarray(sfft.irfft2(yf, s=s)[:, :, :ho, :wo]).astype(dt, copy=False)

    def bw(g, need_x, need_w):
        gm = sfft.rfft2(g, s=s).reshape(n, o, nf).transpose(2, 0, 1)      # F, N, O
        gx = gw = None
        if need_x:
            gxf = np.matmul(gm, wf.transpose(0, 2, 1)).transpose(1, 2, 0).reshape(n, c, l1, -1)
            gx = sfft.irfft2(gxf, s=s)[:, :, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gx).astype(dt, copy=False)
        if need_w:
            gwf = np.matmul(np.conj(gm).transpose(0, 2, 1), xm).transpose(1, 2, 0).reshape(o, c, l1, -1)
            gw = np.ascontiguousarray(sfft.irfft2(gwf, s=s)[:, :, :kh, :kw]).astype(dt, copy=False)
        return gx, gw

    return y, bw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and a single GEMM."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} must be odd")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} with weight {weight.shape}, padding {padding}, "
                         f"stride {stride} gives non-positive output size")

    if _use_fft(kh, kw, stride):
        y, bw = _conv_fft(x, weight, padding)
    else:
        y, bw = _conv_im2col(x, weight, stride, padding, ho, wo)
    if bias is not None:
        y += bias.data.reshape(1, o, 1, 1)
    out = Tensor(y)

    def bw_all(g):
        gx, gw = bw(g, x.requires_grad, weight.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    return record("conv2d", out, (x, weight, bias), bw_all)


# ---------------------------------------------------------------------------
# bilinear resize


@lru_cache(maxsize=256)
def resize_taps(in_size: int, out_size: int):
    """Source indices and blend weights along one axis (half-pixel centres).

    Returns ``(i0, i1, lam)`` such that destination ``d`` takes
    ``(1 - lam[d]) * src[i0[d]] + lam[d] * src[i1[d]]``.
    """
    scale = in_size / out_size
    d = np.arange(out_size, dtype=np.float64)
    src = np.clip((d + 0.5) * scale - 0.5, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    return i0, i1, lam


@lru_cache(maxsize=256)
def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    i0, i1, lam = resize_taps(in_size, out_size)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def _blend(a: np.ndarray, axis: int, in_size: int, out_size: int) -> np.ndarray:
    i0, i1, lam = resize_taps(in_size, out_size)
    shape = [1] * a.ndim
    shape[axis] = out_size
    lam = lam.astype(a.dtype).reshape(shape)
    lo = np.take(a, i0, axis=axis)
    # lo + lam*(hi - lo) keeps constant regions exact
    return lo + lam * (np.take(a, i1, axis=axis) - lo)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize NCHW images with plain (non anti-aliased) bilinear interpolation."""
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValueError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    out_h, out_w = int(out_h), int(out_w)
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        y = x.data.copy()
    else:
        y = x.data
        if out_h != h:
            y = _blend(y, 2, h, out_h)
        if out_w != w:
            y = _blend(y, 3, w, out_w)
    out = Tensor(y)

    def bw(g):
        gx = g
        if out_h != h:
            mh = _resize_matrix(h, out_h).astype(g.dtype)
            gx = np.einsum("oi,ncow->nciw", mh, gx, optimize=True)
        if out_w != w:
            mw = _resize_matrix(w, out_w).astype(g.dtype)
            gx = gx @ mw
        return (np.ascontiguousarray(gx),)

    return record("bilinear_resize", out, (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    dt = x.dtype
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = np.einsum("ngk,ngk->ng", xc, xc)[..., None] / dt.type(xc.shape[2])
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xc * inv).reshape(n, c, h, w)
    y = xhat * gamma.data.reshape(1, c, 1, 1)
    y += beta.data.reshape(1, c, 1, 1)
    out = Tensor(y)

    def bw(g):
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gbt = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        k = dt.type(xh.shape[2])
        m1 = dxhat.sum(axis=2, keepdims=True) / k
        m2 = np.einsum("ngk,ngk->ng", dxhat, xh)[..., None] / k
        dx = dxhat - m1
        dx -= xh * m2
        dx *= inv
        return dx.reshape(x.shape), gg, gbt

    return record("group_norm", out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# loss


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bw(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return record("softmax_xent", out, (logits,), bw)
