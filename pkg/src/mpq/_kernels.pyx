# cython: language_level=3
"""Compiled float32 kernels for the MAC-bearing and reducing graph ops.

Every output accumulates its terms in float32 in the same order as the
numpy fallback in ``_fallback.py``; the two backends agree bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport nearbyint

cnp.import_array()


def dense(const float[:, ::1] x, const float[:, ::1] w):
    cdef Py_ssize_t nb = x.shape[0], nin = x.shape[1], nout = w.shape[0]
    cdef Py_ssize_t b, o, i
    cdef float xv
    if w.shape[1] != nin:
        raise ValueError(f"dense: input has {nin} features, weight expects {w.shape[1]}")
    wt_arr = np.ascontiguousarray(np.asarray(w).T)
    cdef const float[:, ::1] wt = wt_arr
    out = np.zeros((nb, nout), dtype=np.float32)
    cdef float[:, ::1] y = out
    # the inner loop runs over independent outputs; each output still sums
    # its inputs in index order
    with nogil:
        for b in range(nb):
            for i in range(nin):
                xv = x[b, i]
                for o in range(nout):
                    y[b, o] = y[b, o] + xv * wt[i, o]
    return out


def conv2d(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t nb = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - k) // stride + 1
    cdef Py_ssize_t b, o, c, oy, ox, ky, kx, iy, ix
    cdef float xv
    if w.shape[1] != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {w.shape[1]}")
    # output channels innermost: [c, ky, kx, o] weights into an NHWC buffer
    wt_arr = np.ascontiguousarray(np.asarray(w).transpose(1, 2, 3, 0))
    cdef const float[:, :, :, ::1] wt = wt_arr
    buf = np.zeros((nb, ho, wo, cout), dtype=np.float32)
    cdef float[:, :, :, ::1] y = buf
    # taps are visited in (c, ky, kx) order for every output pixel; padded
    # taps are skipped, which matches adding an exact zero
    with nogil:
        for b in range(nb):
            for oy in range(ho):
                for ox in range(wo):
                    for c in range(cin):
                        for ky in range(k):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - padding
                                if ix < 0 or ix >= wd:
                                    continue
                                xv = x[b, c, iy, ix]
                                for o in range(cout):
                                    y[b, oy, ox, o] = y[b, oy, ox, o] + xv * wt[c, ky, kx, o]
    return np.ascontiguousarray(buf.transpose(0, 3, 1, 2))


def global_avg_pool(const float[:, :, :, ::1] x):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t b, c, i, j
    cdef float acc
    cdef float count = <float>(h * wd)
    out = np.empty((nb, nc), dtype=np.float32)
    cdef float[:, ::1] y = out
    with nogil:
        for b in range(nb):
            for c in range(nc):
                acc = 0.0
                for i in range(h):
                    for j in range(wd):
                        acc = acc + x[b, c, i, j]
                y[b, c] = acc / count
    return out


def qdq(const float[:, :, ::1] t, const double[::1] scale, const long long[::1] zero_point,
        long long n, long long p):
    """Fused quantize-dequantize over a [pre, channels, post] view."""
    cdef Py_ssize_t a = t.shape[0], nc = t.shape[1], m = t.shape[2]
    cdef Py_ssize_t i, c, j
    cdef double s, v
    cdef long long z, q
    if scale.shape[0] != nc or zero_point.shape[0] != nc:
        raise ValueError("qdq: one scale and zero point per channel expected")
    out = np.empty((a, nc, m), dtype=np.float32)
    cdef float[:, :, ::1] y = out
    with nogil:
        for i in range(a):
            for c in range(nc):
                s = scale[c]
                z = zero_point[c]
                for j in range(m):
                    v = nearbyint(<double>t[i, c, j] / s) + <double>z
                    if v < n:
                        v = n
                    elif v > p:
                        v = p
                    q = <long long>v
                    y[i, c, j] = <float>(s * <double>(q - z))
    return out
