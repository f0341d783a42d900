"""Independent reference implementations written for clarity, not speed."""
import math

import numpy as np


def conv_loop(x, w, b, stride, pad):
    """Direct quadruple loop over (n, o, i, j)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, oi, i, j] = np.sum(patch * w[oi]) + (b[oi] if b is not None else 0.0)
    return out


def bilinear_scalar(img, out_h, out_w):
    """Half-pixel-centre bilinear sampling, one output pixel at a time."""
    h, w = img.shape

    def tap(i, n_in, n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        r0, r1, a = tap(i, h, out_h)
        for j in range(out_w):
            c0, c1, b = tap(j, w, out_w)
            top = (1 - b) * img[r0, c0] + b * img[r0, c1]
            bot = (1 - b) * img[r1, c0] + b * img[r1, c1]
            out[i, j] = (1 - a) * top + a * bot
    return out


def adamw_scalar(p, g, m, v, t, lr, b1, b2, eps, wd):
    p = p - lr * wd * p
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return p - lr * mhat / (math.sqrt(vhat) + eps), m, v
