"""Pure-numpy versions of the hot kernels.

These are always importable and define the reference behaviour the compiled
extension has to reproduce.
"""
import numpy as np


def im2col(x, kh, kw, stride, dilation, pad):
    """Unfold patches into a ``(C*kh*kw, N*Ho*Wo)`` matrix (zero padded)."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    x = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = x[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                              c0:c0 + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, kh, kw, stride, dilation, pad):
    n, c, h, w = shape
    ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    out = out[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


def maxpool2_forward(x):
    """2x2/stride-2 max pool; returns (out, argmax) with argmax in 0..3 row-major."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.int8)  # argmax keeps the first max
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(grad, idx):
    n, c, ho, wo = grad.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, ho * 2, wo * 2))
