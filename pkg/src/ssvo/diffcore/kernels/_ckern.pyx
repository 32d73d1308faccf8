# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution kernels.

Same geometry contract as numpy_backend: ceil-mode "same" padding with the
top/left share passed in. Patch gather/scatter (im2col / col2im) runs as
compiled loops — the part the numpy fallback is slow at — and the dense
contraction goes through BLAS dgemm via np.dot. Everything is
single-threaded under the reference thread settings and accumulates in a
fixed order per call, so results are bitwise reproducible run to run.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef void _ranges(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride,
                  Py_ssize_t nin, Py_ssize_t nout,
                  Py_ssize_t[::1] lo, Py_ssize_t[::1] hi) noexcept nogil:
    # valid output range per kernel offset: 0 <= o*stride - pad + kk < nin.
    # C division truncates toward zero, so keep both numerators non-negative:
    # clamp at 0, which is exact because o itself is never negative.
    cdef Py_ssize_t kk, l, num
    for kk in range(k):
        l = pad - kk
        if l > 0:
            l = (l + stride - 1) // stride
        else:
            l = 0
        lo[kk] = l
        num = nin - 1 - kk + pad
        if num < 0:
            hi[kk] = 0
        else:
            hi[kk] = min(nout, num // stride + 1)


cdef void _im2col(double[:, :, ::1] x, double[:, ::1] cols,
                  Py_ssize_t stride, Py_ssize_t pt, Py_ssize_t pl,
                  Py_ssize_t ho, Py_ssize_t wo, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t[::1] oh_lo, Py_ssize_t[::1] oh_hi,
                  Py_ssize_t[::1] ow_lo, Py_ssize_t[::1] ow_hi) noexcept nogil:
    """Gather padded kh*kw patches of x [C,H,W] into cols [C*kh*kw, ho*wo].

    Only in-range entries are written; the caller keeps padding rows zeroed
    (the zero pattern depends on geometry alone, not on the sample)."""
    cdef Py_ssize_t c = x.shape[0]
    cdef Py_ssize_t ci, ky, kx, oh, ow, ih, iw0, r, base
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                r = (ci * kh + ky) * kw + kx
                iw0 = kx - pl
                for oh in range(oh_lo[ky], oh_hi[ky]):
                    ih = oh * stride - pt + ky
                    base = oh * wo
                    for ow in range(ow_lo[kx], ow_hi[kx]):
                        cols[r, base + ow] = x[ci, ih, iw0 + ow * stride]


cdef void _col2im_add(double[:, ::1] cols, double[:, :, ::1] gx,
                      Py_ssize_t stride, Py_ssize_t pt, Py_ssize_t pl,
                      Py_ssize_t ho, Py_ssize_t wo, Py_ssize_t kh,
                      Py_ssize_t kw,
                      Py_ssize_t[::1] oh_lo, Py_ssize_t[::1] oh_hi,
                      Py_ssize_t[::1] ow_lo, Py_ssize_t[::1] ow_hi) noexcept nogil:
    """Adjoint of _im2col: scatter-add cols back into gx [C,H,W]."""
    cdef Py_ssize_t c = gx.shape[0]
    cdef Py_ssize_t ci, ky, kx, oh, ow, ih, iw0, r, base
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                r = (ci * kh + ky) * kw + kx
                iw0 = kx - pl
                for oh in range(oh_lo[ky], oh_hi[ky]):
                    ih = oh * stride - pt + ky
                    base = oh * wo
                    for ow in range(ow_lo[kx], ow_hi[kx]):
                        gx[ci, ih, iw0 + ow * stride] += cols[r, base + ow]


cdef class _Geometry:
    cdef Py_ssize_t[::1] oh_lo, oh_hi, ow_lo, ow_hi

    def __init__(self, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t pt,
                 Py_ssize_t pl, Py_ssize_t stride, Py_ssize_t h,
                 Py_ssize_t wd, Py_ssize_t ho, Py_ssize_t wo):
        self.oh_lo = np.empty(kh, dtype=np.intp)
        self.oh_hi = np.empty(kh, dtype=np.intp)
        self.ow_lo = np.empty(kw, dtype=np.intp)
        self.ow_hi = np.empty(kw, dtype=np.intp)
        _ranges(kh, pt, stride, h, ho, self.oh_lo, self.oh_hi)
        _ranges(kw, pl, stride, wd, wo, self.ow_lo, self.ow_hi)


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   int stride, int pt, int pl, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef _Geometry g = _Geometry(kh, kw, pt, pl, stride, h, wd, ho, wo)
    w2d = np.asarray(w).reshape(f, c * kh * kw)
    out = np.empty((n, f, ho, wo), dtype=np.float64)
    cols_arr = np.zeros((c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t ni
    for ni in range(n):
        with nogil:
            _im2col(x[ni], cols, stride, pt, pl, ho, wo, kh, kw,
                    g.oh_lo, g.oh_hi, g.ow_lo, g.ow_hi)
        np.dot(w2d, cols_arr, out=out[ni].reshape(f, ho * wo))
    return out


def conv2d_input_grad(double[:, :, :, ::1] gy, double[:, :, :, ::1] w,
                      int stride, int pt, int pl, int h, int wd):
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef _Geometry g = _Geometry(kh, kw, pt, pl, stride, h, wd, ho, wo)
    w2d_t = np.asarray(w).reshape(f, c * kh * kw).T
    gy_arr = np.asarray(gy)
    out = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = out
    gcols_arr = np.empty((c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, ::1] gcols = gcols_arr
    cdef Py_ssize_t ni
    for ni in range(n):
        np.dot(w2d_t, gy_arr[ni].reshape(f, ho * wo), out=gcols_arr)
        with nogil:
            _col2im_add(gcols, gx[ni], stride, pt, pl, ho, wo, kh, kw,
                        g.oh_lo, g.oh_hi, g.ow_lo, g.ow_hi)
    return out


def conv2d_weight_grad(double[:, :, :, ::1] gy, double[:, :, :, ::1] x,
                       int stride, int pt, int pl, int kh, int kw):
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef _Geometry g = _Geometry(kh, kw, pt, pl, stride, h, wd, ho, wo)
    gy_arr = np.asarray(gy)
    gw = np.zeros((f, c * kh * kw), dtype=np.float64)
    tmp = np.empty((f, c * kh * kw), dtype=np.float64)
    cols_arr = np.zeros((c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t ni
    for ni in range(n):
        with nogil:
            _im2col(x[ni], cols, stride, pt, pl, ho, wo, kh, kw,
                    g.oh_lo, g.oh_hi, g.ow_lo, g.ow_hi)
        np.dot(gy_arr[ni].reshape(f, ho * wo), cols_arr.T, out=tmp)
        gw += tmp
    return gw.reshape(f, c, kh, kw)
