# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled same-padded 2-D convolution kernels (depthwise and full)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def dwconv_forward(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[::1] b):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], p = k // 2
    cdef Py_ssize_t i, j, a, bb, ch, si, sj
    out_arr = np.empty((H, W, C), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for i in range(H):
            for j in range(W):
                for ch in range(C):
                    out[i, j, ch] = b[ch]
                for a in range(k):
                    si = i + a - p
                    if si < 0 or si >= H:
                        continue
                    for bb in range(k):
                        sj = j + bb - p
                        if sj < 0 or sj >= W:
                            continue
                        for ch in range(C):
                            out[i, j, ch] += w[a, bb, ch] * x[si, sj, ch]
    return out_arr


def dwconv_backward(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[:, :, ::1] g):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], p = k // 2
    cdef Py_ssize_t i, j, a, bb, ch, si, sj
    gx_arr = np.zeros((H, W, C), dtype=np.float64)
    gw_arr = np.zeros((k, k, C), dtype=np.float64)
    gb_arr = np.zeros(C, dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double gv
    with nogil:
        for i in range(H):
            for j in range(W):
                for ch in range(C):
                    gb[ch] += g[i, j, ch]
                for a in range(k):
                    si = i + a - p
                    if si < 0 or si >= H:
                        continue
                    for bb in range(k):
                        sj = j + bb - p
                        if sj < 0 or sj >= W:
                            continue
                        for ch in range(C):
                            gv = g[i, j, ch]
                            gx[si, sj, ch] += gv * w[a, bb, ch]
                            gw[a, bb, ch] += gv * x[si, sj, ch]
    return gx_arr, gw_arr, gb_arr


def conv_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w, const double[::1] b):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], p = k // 2, O = w.shape[3]
    cdef Py_ssize_t i, j, a, bb, ci, o, si, sj
    cdef double xv
    out_arr = np.empty((H, W, O), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for i in range(H):
            for j in range(W):
                for o in range(O):
                    out[i, j, o] = b[o]
                for a in range(k):
                    si = i + a - p
                    if si < 0 or si >= H:
                        continue
                    for bb in range(k):
                        sj = j + bb - p
                        if sj < 0 or sj >= W:
                            continue
                        for ci in range(C):
                            xv = x[si, sj, ci]
                            for o in range(O):
                                out[i, j, o] += w[a, bb, ci, o] * xv
    return out_arr


def conv_backward(const double[:, :, ::1] x, const double[:, :, :, ::1] w, const double[:, :, ::1] g):
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], p = k // 2, O = w.shape[3]
    cdef Py_ssize_t i, j, a, bb, ci, o, si, sj
    cdef double xv, acc
    gx_arr = np.zeros((H, W, C), dtype=np.float64)
    gw_arr = np.zeros((k, k, C, O), dtype=np.float64)
    gb_arr = np.zeros(O, dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    with nogil:
        for i in range(H):
            for j in range(W):
                for o in range(O):
                    gb[o] += g[i, j, o]
                for a in range(k):
                    si = i + a - p
                    if si < 0 or si >= H:
                        continue
                    for bb in range(k):
                        sj = j + bb - p
                        if sj < 0 or sj >= W:
                            continue
                        for ci in range(C):
                            xv = x[si, sj, ci]
                            acc = 0.0
                            for o in range(O):
                                acc = acc + g[i, j, o] * w[a, bb, ci, o]
                                gw[a, bb, ci, o] += g[i, j, o] * xv
                            gx[si, sj, ci] += acc
    return gx_arr, gw_arr, gb_arr
