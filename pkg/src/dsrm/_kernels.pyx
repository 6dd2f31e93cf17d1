# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conv/pool kernels (channels-last float64).

Work is split so every output element is written by exactly one thread;
accumulation order is fixed for a given OMP thread count, so results are
bit-identical across runs in the same environment.
"""

import numpy as np

cimport numpy as cnp
cimport openmp
from cython.parallel import prange, threadid

cnp.import_array()


def conv3x3_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b,
                    bint relu=False):
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], wd = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t co = w.shape[3]
    cdef Py_ssize_t ho = h - 2, wo = wd - 2, span = 3 * ci
    # (co, di, dj, ci): one contiguous 3*ci run per (q, di)
    wt_arr = np.ascontiguousarray(np.transpose(w, (3, 0, 1, 2)))
    cdef double[:, :, :, ::1] wt = wt_arr
    y_arr = np.empty((bsz, ho, wo, co))
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t n, i, j, di, q, t, quads = wo // 4
    cdef double s0, s1, s2, s3, wv
    cdef double *px
    cdef double *pw
    with nogil:
        for n in prange(bsz, schedule='static'):
            for i in range(ho):
                # four output columns share one weight stream; the ci == 3
                # branch gives the compiler a constant trip count to unroll
                for j in range(quads):
                    for q in range(co):
                        s0 = 0.0
                        s1 = 0.0
                        s2 = 0.0
                        s3 = 0.0
                        if ci == 3:
                            for di in range(3):
                                px = &x[n, i + di, 4 * j, 0]
                                pw = &wt[q, di, 0, 0]
                                for t in range(9):
                                    wv = pw[t]
                                    s0 = s0 + px[t] * wv
                                    s1 = s1 + px[t + 3] * wv
                                    s2 = s2 + px[t + 6] * wv
                                    s3 = s3 + px[t + 9] * wv
                        else:
                            for di in range(3):
                                px = &x[n, i + di, 4 * j, 0]
                                pw = &wt[q, di, 0, 0]
                                for t in range(span):
                                    wv = pw[t]
                                    s0 = s0 + px[t] * wv
                                    s1 = s1 + px[t + ci] * wv
                                    s2 = s2 + px[t + 2 * ci] * wv
                                    s3 = s3 + px[t + 3 * ci] * wv
                        s0 = s0 + b[q]
                        s1 = s1 + b[q]
                        s2 = s2 + b[q]
                        s3 = s3 + b[q]
                        if relu:
                            s0 = max(s0, 0.0)
                            s1 = max(s1, 0.0)
                            s2 = max(s2, 0.0)
                            s3 = max(s3, 0.0)
                        y[n, i, 4 * j, q] = s0
                        y[n, i, 4 * j + 1, q] = s1
                        y[n, i, 4 * j + 2, q] = s2
                        y[n, i, 4 * j + 3, q] = s3
                for j in range(4 * quads, wo):
                    for q in range(co):
                        s0 = 0.0
                        for di in range(3):
                            px = &x[n, i + di, j, 0]
                            pw = &wt[q, di, 0, 0]
                            for t in range(span):
                                s0 = s0 + px[t] * pw[t]
                        s0 = s0 + b[q]
                        if relu:
                            s0 = max(s0, 0.0)
                        y[n, i, j, q] = s0
    return y_arr


def conv3x3_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                     double[:, :, :, ::1] dy, bint want_dx=True):
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], wd = x.shape[2], ci = x.shape[3]
    cdef Py_ssize_t co = w.shape[3]
    cdef Py_ssize_t ho = h - 2, wo = wd - 2, span = 3 * ci
    cdef int nt = openmp.omp_get_max_threads()
    wt_arr = np.ascontiguousarray(np.transpose(w, (3, 0, 1, 2)))
    cdef double[:, :, :, ::1] wt = wt_arr
    dx_arr = np.zeros((bsz, h, wd, ci)) if want_dx else None
    cdef double[:, :, :, ::1] dx = dx_arr if want_dx else wt_arr
    cdef Py_ssize_t n, i, j, di, dj, k, q, t
    cdef double dyv, xv
    cdef double *pxd
    cdef double *pw
    cdef double *pdy
    cdef double *pp
    cdef double *px

    # one fused pass: dx scatter, dw and db into per-thread padded partials;
    # threads own disjoint batch items, summation order fixed per thread count
    cdef Py_ssize_t slab = 9 * ci * co
    cdef Py_ssize_t row = ((slab + co + 7) // 8 + 1) * 8
    part_arr = np.zeros((nt, row))
    cdef double[:, ::1] part = part_arr
    cdef int tid
    with nogil:
        for n in prange(bsz, schedule='static', num_threads=nt):
            tid = threadid()
            for i in range(ho):
                for j in range(wo):
                    pdy = &dy[n, i, j, 0]
                    for q in range(co):
                        part[tid, slab + q] += pdy[q]
                    for di in range(3):
                        px = &x[n, i + di, j, 0]
                        pp = &part[tid, di * 3 * ci * co]
                        for t in range(span):
                            xv = px[t]
                            for q in range(co):
                                pp[t * co + q] += xv * pdy[q]
                        if want_dx:
                            pxd = &dx[n, i + di, j, 0]
                            for q in range(co):
                                dyv = pdy[q]
                                pw = &wt[q, di, 0, 0]
                                for t in range(span):
                                    pxd[t] += dyv * pw[t]

    dw_arr = part_arr[:, :slab].sum(axis=0).reshape(3, 3, ci, co)
    db_arr = part_arr[:, slab:slab + co].sum(axis=0)
    return dx_arr, dw_arr, db_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = wd // 2
    y_arr = np.empty((bsz, ho, wo, c))
    idx_arr = np.empty((bsz, ho, wo, c), dtype=np.uint8)
    cdef double[:, :, :, ::1] y = y_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, i, j, k, di, dj
    cdef double best, v
    cdef unsigned char which
    with nogil:
        for n in prange(bsz, schedule='static'):
            for i in range(ho):
                for j in range(wo):
                    for k in range(c):
                        best = x[n, 2 * i, 2 * j, k]
                        which = 0
                        for di in range(2):
                            for dj in range(2):
                                v = x[n, 2 * i + di, 2 * j + dj, k]
                                if v > best:
                                    best = v
                                    which = <unsigned char> (2 * di + dj)
                        y[n, i, j, k] = best
                        idx[n, i, j, k] = which
    return y_arr, idx_arr


def maxpool2_backward(unsigned char[:, :, :, ::1] idx, double[:, :, :, ::1] dy,
                      Py_ssize_t h, Py_ssize_t w, gate=None):
    """Scatter dy to pooling winners; gate (the relu output) zeroes entries
    where the winning activation was clamped. Single write pass: loser
    cells and cropped tails are written as zeros."""
    cdef Py_ssize_t bsz = dy.shape[0], ho = dy.shape[1], wo = dy.shape[2], c = dy.shape[3]
    dx_arr = np.zeros((bsz, h, w, c))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] gv = gate if gate is not None else dx_arr
    cdef bint gated = gate is not None
    cdef Py_ssize_t n, i, j, k, ti, tj
    cdef unsigned char which
    with nogil:
        for n in prange(bsz, schedule='static'):
            for i in range(ho):
                for j in range(wo):
                    for k in range(c):
                        which = idx[n, i, j, k]
                        ti = 2 * i + which // 2
                        tj = 2 * j + which % 2
                        if gated and gv[n, ti, tj, k] <= 0.0:
                            continue
                        dx[n, ti, tj, k] = dy[n, i, j, k]
    return dx_arr
