"""Pure numpy versions of the compiled kernels.

Each reduction is unrolled in Python over the reduction axis and vectorized
over everything else, so the float32 rounding sequence is identical to the
scalar loops in ``_kernels.pyx``.
"""
import numpy as np


def dense(x, w):
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"dense: input has {x.shape[1]} features, weight expects {w.shape[1]}")
    acc = np.zeros((x.shape[0], w.shape[0]), dtype=np.float32)
    for i in range(x.shape[1]):
        acc += x[:, i, None] * w[None, :, i]
    return acc


def conv2d(x, w, stride, padding):
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    nb, cin, h, wd = x.shape
    cout, wcin, k, _ = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    acc = np.zeros((nb, cout, ho, wo), dtype=np.float32)
    ystop = (ho - 1) * stride + 1
    xstop = (wo - 1) * stride + 1
    for c in range(cin):
        for ky in range(k):
            for kx in range(k):
                patch = xp[:, c, ky:ky + ystop:stride, kx:kx + xstop:stride]
                acc += patch[:, None, :, :] * w[None, :, c, ky, kx, None, None]
    return acc


def global_avg_pool(x):
    x = np.ascontiguousarray(x, dtype=np.float32)
    nb, nc, h, wd = x.shape
    acc = np.zeros((nb, nc), dtype=np.float32)
    for i in range(h):
        for j in range(wd):
            acc += x[:, :, i, j]
    return acc / np.float32(h * wd)


def qdq(t, scale, zero_point, n, p):
    """Fused quantize-dequantize over a [pre, channels, post] view."""
    t = np.asarray(t, dtype=np.float32)
    if scale.shape[0] != t.shape[1] or zero_point.shape[0] != t.shape[1]:
        raise ValueError("qdq: one scale and zero point per channel expected")
    s = scale[None, :, None]
    z = zero_point[None, :, None]
    q = np.clip(np.rint(t.astype(np.float64) / s) + z, n, p).astype(np.int64)
    return (s * (q - z)).astype(np.float32)
