# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled direct-loop 2-D convolution kernels (HWC layout).

These are the hot inner loops of the library. A pure-numpy im2col
implementation with identical semantics lives in ``cfsam.backend``;
which one is used is decided at import time.
"""

import numpy as np

ctypedef fused floating:
    float
    double


def conv2d_forward(floating[:, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b, int padding, int stride):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], Ci = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], Co = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - k) // stride + 1
    if floating is float:
        out_np = np.zeros((Ho, Wo, Co), dtype=np.float32)
    else:
        out_np = np.zeros((Ho, Wo, Co), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t oi, oj, di, dj, ci, co, ii, jj
    cdef floating xv
    for oi in range(Ho):
        for oj in range(Wo):
            for co in range(Co):
                out[oi, oj, co] = b[co]
            for di in range(k):
                ii = oi * stride + di - padding
                if ii < 0 or ii >= H:
                    continue
                for dj in range(k):
                    jj = oj * stride + dj - padding
                    if jj < 0 or jj >= W:
                        continue
                    for ci in range(Ci):
                        xv = x[ii, jj, ci]
                        for co in range(Co):
                            out[oi, oj, co] += xv * w[di, dj, ci, co]
    return out_np


def conv2d_backward_input(floating[:, :, :, ::1] w, floating[:, :, ::1] dout,
                          Py_ssize_t H, Py_ssize_t W, int padding, int stride):
    cdef Py_ssize_t k = w.shape[0], Ci = w.shape[2], Co = w.shape[3]
    cdef Py_ssize_t Ho = dout.shape[0], Wo = dout.shape[1]
    if floating is float:
        dx_np = np.zeros((H, W, Ci), dtype=np.float32)
    else:
        dx_np = np.zeros((H, W, Ci), dtype=np.float64)
    cdef floating[:, :, ::1] dx = dx_np
    cdef Py_ssize_t oi, oj, di, dj, ci, co, ii, jj
    cdef floating acc
    for oi in range(Ho):
        for oj in range(Wo):
            for di in range(k):
                ii = oi * stride + di - padding
                if ii < 0 or ii >= H:
                    continue
                for dj in range(k):
                    jj = oj * stride + dj - padding
                    if jj < 0 or jj >= W:
                        continue
                    for ci in range(Ci):
                        acc = 0
                        for co in range(Co):
                            acc += dout[oi, oj, co] * w[di, dj, ci, co]
                        dx[ii, jj, ci] += acc
    return dx_np


def conv2d_backward_kernel(floating[:, :, ::1] x, floating[:, :, ::1] dout,
                           Py_ssize_t k, int padding, int stride):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], Ci = x.shape[2]
    cdef Py_ssize_t Ho = dout.shape[0], Wo = dout.shape[1], Co = dout.shape[2]
    if floating is float:
        dw_np = np.zeros((k, k, Ci, Co), dtype=np.float32)
    else:
        dw_np = np.zeros((k, k, Ci, Co), dtype=np.float64)
    cdef floating[:, :, :, ::1] dw = dw_np
    cdef Py_ssize_t oi, oj, di, dj, ci, co, ii, jj
    cdef floating xv
    for oi in range(Ho):
        for oj in range(Wo):
            for di in range(k):
                ii = oi * stride + di - padding
                if ii < 0 or ii >= H:
                    continue
                for dj in range(k):
                    jj = oj * stride + dj - padding
                    if jj < 0 or jj >= W:
                        continue
                    for ci in range(Ci):
                        xv = x[ii, jj, ci]
                        for co in range(Co):
                            dw[di, dj, ci, co] += xv * dout[oi, oj, co]
    return dw_np
