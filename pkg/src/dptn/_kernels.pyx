# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for strided, zero-padded 2D convolution.

Column layout is ``[C*kh*kw, N*Ho*Wo]`` with rows ordered (c, i, j) so that
``w.reshape(O, -1) @ cols`` is the convolution. Results are bit-identical to
the numpy fallback in :mod:`dptn._kernels_py`.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride) nogil:
    # smallest wo with wo*stride + j - pad >= 0
    if j >= pad:
        return 0
    return (pad - j + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t j, Py_ssize_t pad, Py_ssize_t stride,
                                  Py_ssize_t W, Py_ssize_t Wo) nogil:
    # one past the largest wo with wo*stride + j - pad < W
    cdef Py_ssize_t hi
    if W - 1 + pad - j < 0:
        return 0
    hi = (W - 1 + pad - j) // stride + 1
    return hi if hi < Wo else Wo


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C * kh * kw, N * Ho * Wo), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t c, i, j, n, ho, wo, row, col, y, lo, hi
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    lo = _first_valid(j, pad, stride)
                    hi = _end_valid(j, pad, stride, W, Wo)
                    col = 0
                    for n in range(N):
                        for ho in range(Ho):
                            y = ho * stride + i - pad
                            if y < 0 or y >= H:
                                for wo in range(Wo):
                                    cols[row, col + wo] = 0
                            else:
                                for wo in range(lo):
                                    cols[row, col + wo] = 0
                                for wo in range(lo, hi):
                                    cols[row, col + wo] = x[n, c, y, wo * stride + j - pad]
                                for wo in range(hi, Wo):
                                    cols[row, col + wo] = 0
                            col += Wo
    return out


def col2im(real[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    if cols.shape[0] != C * kh * kw or cols.shape[1] != N * Ho * Wo:
        raise ValueError(f"col2im: cols shape {tuple(cols.shape)[:2]} does not match "
                         f"({C * kh * kw}, {N * Ho * Wo})")
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t c, i, j, n, ho, wo, row, col, y, lo, hi
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    lo = _first_valid(j, pad, stride)
                    hi = _end_valid(j, pad, stride, W, Wo)
                    col = 0
                    for n in range(N):
                        for ho in range(Ho):
                            y = ho * stride + i - pad
                            if y >= 0 and y < H:
                                for wo in range(lo, hi):
                                    dx[n, c, y, wo * stride + j - pad] += cols[row, col + wo]
                            col += Wo
    return out
