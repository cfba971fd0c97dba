# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im with dilation and implicit zero padding, and 2x2 max pooling."""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


def _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride,
              Py_ssize_t dilation, Py_ssize_t pad):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    # b > 0; rounds toward +inf for either sign of a
    return -((-a) // b) if a < 0 else (a + b - 1) // b


cdef inline void _valid_range(Py_ssize_t off, Py_ssize_t size, Py_ssize_t stride,
                              Py_ssize_t n_out, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output positions o with 0 <= o*stride + off < size
    cdef Py_ssize_t a = _ceil_div(-off, stride)
    cdef Py_ssize_t b = _ceil_div(size - off, stride)
    lo[0] = min(max(a, 0), n_out)
    hi[0] = min(max(b, lo[0]), n_out)


cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t dilation, Py_ssize_t pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, oy, ox, iy, row, lo, hi, x0
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef real* dst
    cdef const real* src
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                x0 = j * dilation - pad
                _valid_range(x0, W, stride, wo, &lo, &hi)
                for n in range(N):
                    for oy in range(ho):
                        dst = &cols[row, (n * ho + oy) * wo]
                        iy = oy * stride - pad + i * dilation
                        if iy < 0 or iy >= H or lo >= hi:
                            memset(dst, 0, wo * sizeof(real))
                            continue
                        src = &x[n, c, iy, 0]
                        if lo > 0:
                            memset(dst, 0, lo * sizeof(real))
                        if stride == 1:
                            memcpy(dst + lo, src + lo + x0, (hi - lo) * sizeof(real))
                        else:
                            for ox in range(lo, hi):
                                dst[ox] = src[ox * stride + x0]
                        if hi < wo:
                            memset(dst + hi, 0, (wo - hi) * sizeof(real))


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                  Py_ssize_t dilation, Py_ssize_t pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, oy, ox, iy, row, lo, hi, x0
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef real* dst
    cdef const real* src
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                x0 = j * dilation - pad
                _valid_range(x0, W, stride, wo, &lo, &hi)
                if lo >= hi:
                    continue
                for n in range(N):
                    for oy in range(ho):
                        iy = oy * stride - pad + i * dilation
                        if iy < 0 or iy >= H:
                            continue
                        src = &cols[row, (n * ho + oy) * wo]
                        dst = &out[n, c, iy, 0]
                        for ox in range(lo, hi):
                            dst[ox * stride + x0] += src[ox]


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t dilation, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = _out_size(x.shape[2], kh, stride, dilation, pad)
    cdef Py_ssize_t wo = _out_size(x.shape[3], kw, stride, dilation, pad)
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, dilation, pad, ho, wo)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, dilation, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t dilation, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = shape
    cdef Py_ssize_t ho = _out_size(h, kh, stride, dilation, pad)
    cdef Py_ssize_t wo = _out_size(w, kw, stride, dilation, pad)
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, kh, kw, stride, dilation, pad, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, kh, kw, stride, dilation, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out


cdef void _pool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                    cnp.int8_t[:, :, :, ::1] idx) noexcept nogil:
    cdef Py_ssize_t n, c, oy, ox, k, best
    cdef real v, m
    for n in range(out.shape[0]):
        for c in range(out.shape[1]):
            for oy in range(out.shape[2]):
                for ox in range(out.shape[3]):
                    m = x[n, c, 2 * oy, 2 * ox]
                    best = 0
                    for k in range(1, 4):
                        v = x[n, c, 2 * oy + k // 2, 2 * ox + k % 2]
                        if v > m:
                            m = v
                            best = k
                    out[n, c, oy, ox] = m
                    idx[n, c, oy, ox] = <cnp.int8_t>best


cdef void _pool_bwd(const real[:, :, :, ::1] g, const cnp.int8_t[:, :, :, ::1] idx,
                    real[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t n, c, oy, ox, k
    for n in range(g.shape[0]):
        for c in range(g.shape[1]):
            for oy in range(g.shape[2]):
                for ox in range(g.shape[3]):
                    k = idx[n, c, oy, ox]
                    out[n, c, 2 * oy + k // 2, 2 * ox + k % 2] = g[n, c, oy, ox]


def maxpool2_forward(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    if x.dtype == np.float32:
        _pool_fwd[float](x, out, idx)
    elif x.dtype == np.float64:
        _pool_fwd[double](x, out, idx)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out, idx


def maxpool2_backward(grad, idx):
    grad = np.ascontiguousarray(grad)
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, ho * 2, wo * 2), dtype=grad.dtype)
    if grad.dtype == np.float32:
        _pool_bwd[float](grad, idx, out)
    elif grad.dtype == np.float64:
        _pool_bwd[double](grad, idx, out)
    else:
        raise TypeError(f"unsupported dtype {grad.dtype}")
    return out
