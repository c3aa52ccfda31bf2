# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sliding-window kernels. Same signatures as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv1d_forward(double[:, :, ::1] x, double[:, :, ::1] w):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t F = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Lo = L - K + 1
    out_arr = np.zeros((B, F, Lo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, f, c, j, t
    cdef double acc
    for b in range(B):
        for f in range(F):
            for j in range(Lo):
                acc = 0.0
                for c in range(C):
                    for t in range(K):
                        acc = acc + x[b, c, j + t] * w[f, c, t]
                out[b, f, j] = acc
    return out_arr


def conv1d_grad_input(double[:, :, ::1] g, double[:, :, ::1] w, Py_ssize_t length):
    cdef Py_ssize_t B = g.shape[0], F = g.shape[1], Lo = g.shape[2]
    cdef Py_ssize_t C = w.shape[1], K = w.shape[2]
    gx_arr = np.zeros((B, C, length), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, f, c, j, t
    cdef double gv
    for b in range(B):
        for f in range(F):
            for j in range(Lo):
                gv = g[b, f, j]
                if gv == 0.0:
                    continue
                for c in range(C):
                    for t in range(K):
                        gx[b, c, j + t] += gv * w[f, c, t]
    return gx_arr


def conv1d_grad_kernel(double[:, :, ::1] g, double[:, :, ::1] x, Py_ssize_t k):
    cdef Py_ssize_t B = g.shape[0], F = g.shape[1], Lo = g.shape[2]
    cdef Py_ssize_t C = x.shape[1]
    gw_arr = np.zeros((F, C, k), dtype=np.float64)
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, f, c, j, t
    cdef double acc
    for f in range(F):
        for c in range(C):
            for t in range(k):
                acc = 0.0
                for b in range(B):
                    for j in range(Lo):
                        acc = acc + g[b, f, j] * x[b, c, j + t]
                gw[f, c, t] = acc
    return gw_arr


def argmax_lastaxis(double[:, ::1] x):
    cdef Py_ssize_t N = x.shape[0], L = x.shape[1]
    vals_arr = np.empty(N, dtype=np.float64)
    idx_arr = np.empty(N, dtype=np.int64)
    cdef double[::1] vals = vals_arr
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef Py_ssize_t n, j, best
    cdef double m
    for n in range(N):
        best = 0
        m = x[n, 0]
        for j in range(1, L):
            # strict '>' keeps the first maximal index
            if x[n, j] > m:
                m = x[n, j]
                best = j
        vals[n] = m
        idx[n] = best
    return vals_arr, idx_arr
