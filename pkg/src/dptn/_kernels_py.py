"""Pure-numpy im2col / col2im, used when the compiled kernels are unavailable."""
import numpy as np


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def col2im(cols, N, C, H, W, kh, kw, stride, pad):
    Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
    if cols.shape != (C * kh * kw, N * Ho * Wo):
        raise ValueError(
            f"col2im: cols shape {cols.shape} does not match {(C * kh * kw, N * Ho * Wo)}"
        )
    cols = cols.reshape(C, kh, kw, N, Ho, Wo)
    dxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    return dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
