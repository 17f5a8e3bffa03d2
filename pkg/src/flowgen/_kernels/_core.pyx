# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled periodic-convolution kernels (float64, channels-last).

Semantics match numpy_backend exactly; tests assert bitwise-comparable
results to within floating-point reassociation (<= 1e-12 relative).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] kernel, int stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1], cout = kernel.shape[3]
    cdef Py_ssize_t ca = kh // 2, cb = kw // 2
    cdef Py_ssize_t ho = h // stride, wo = w // stride
    out_arr = np.zeros((n, ho, wo, cout), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b0, i, j, a, b, ci, co, ii, jj
    cdef double v
    cdef double *acc
    cdef const double *krow
    cdef const double *xrow
    with nogil:
        for b0 in range(n):
            for i in range(ho):
                for j in range(wo):
                    acc = &out[b0, i, j, 0]
                    for a in range(kh):
                        ii = (i * stride + a - ca) % h
                        if ii < 0:
                            ii += h
                        for b in range(kw):
                            jj = (j * stride + b - cb) % w
                            if jj < 0:
                                jj += w
                            xrow = &x[b0, ii, jj, 0]
                            for ci in range(cin):
                                v = xrow[ci]
                                krow = &kernel[a, b, ci, 0]
                                for co in range(cout):
                                    acc[co] += v * krow[co]
    return out_arr


def conv2d_grad_input(double[:, :, :, ::1] grad_out, double[:, :, :, ::1] kernel,
                      int stride, in_shape):
    cdef Py_ssize_t n = in_shape[0], h = in_shape[1], w = in_shape[2], cin = in_shape[3]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1], cout = kernel.shape[3]
    cdef Py_ssize_t ca = kh // 2, cb = kw // 2
    cdef Py_ssize_t ho = grad_out.shape[1], wo = grad_out.shape[2]
    gx_arr = np.zeros((n, h, w, cin), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b0, i, j, a, b, ci, co, ii, jj
    cdef double g
    with nogil:
        for b0 in range(n):
            for i in range(ho):
                for j in range(wo):
                    for a in range(kh):
                        ii = (i * stride + a - ca) % h
                        if ii < 0:
                            ii += h
                        for b in range(kw):
                            jj = (j * stride + b - cb) % w
                            if jj < 0:
                                jj += w
                            for co in range(cout):
                                g = grad_out[b0, i, j, co]
                                for ci in range(cin):
                                    gx[b0, ii, jj, ci] += g * kernel[a, b, ci, co]
    return gx_arr


def conv2d_grad_kernel(double[:, :, :, ::1] x, double[:, :, :, ::1] grad_out,
                       int stride, kernel_shape):
    cdef Py_ssize_t kh = kernel_shape[0], kw = kernel_shape[1]
    cdef Py_ssize_t cin = kernel_shape[2], cout = kernel_shape[3]
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ca = kh // 2, cb = kw // 2
    cdef Py_ssize_t ho = grad_out.shape[1], wo = grad_out.shape[2]
    gk_arr = np.zeros((kh, kw, cin, cout), dtype=np.float64)
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t b0, i, j, a, b, ci, co, ii, jj
    cdef double v
    with nogil:
        for b0 in range(n):
            for i in range(ho):
                for j in range(wo):
                    for a in range(kh):
                        ii = (i * stride + a - ca) % h
                        if ii < 0:
                            ii += h
                        for b in range(kw):
                            jj = (j * stride + b - cb) % w
                            if jj < 0:
                                jj += w
                            for ci in range(cin):
                                v = x[b0, ii, jj, ci]
                                for co in range(cout):
                                    gk[a, b, ci, co] += v * grad_out[b0, i, j, co]
    return gk_arr
