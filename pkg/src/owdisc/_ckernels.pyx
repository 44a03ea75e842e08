# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: nearest-center assignment, center accumulation,
mini-batch center updates and greedy NMS.

Nearest-center assignment streams row chunks through BLAS ``dgemm`` and fuses
the argmin, so the full ``n x k`` distance matrix is never materialized.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fmax, fmin
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

DEF CHUNK = 256


def assign_nearest(X, C):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] Cv = np.ascontiguousarray(C, dtype=np.float64)
    cdef int n = Xv.shape[0]
    cdef int d = Xv.shape[1]
    cdef int k = Cv.shape[0]
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    if n == 0:
        return labels_arr, dist_arr
    cdef double[::1] cc = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] G = np.empty((CHUNK, k), dtype=np.float64)
    cdef int i, j, t, start, m, best
    cdef double s, v, bestv, xx
    cdef char ta = b'T'
    cdef char tb = b'N'
    cdef double one = 1.0
    cdef double zero = 0.0
    with nogil:
        for j in range(k):
            s = 0.0
            for t in range(d):
                s = s + Cv[j, t] * Cv[j, t]
            cc[j] = s
        start = 0
        while start < n:
            m = n - start
            if m > CHUNK:
                m = CHUNK
            # column-major: G^T (k x m) = C (k x d) . X_chunk^T (d x m)
            dgemm(&ta, &tb, &k, &m, &d, &one, &Cv[0, 0], &d,
                  &Xv[start, 0], &d, &zero, &G[0, 0], &k)
            for i in range(m):
                best = 0
                bestv = cc[0] - 2.0 * G[i, 0]
                for j in range(1, k):
                    v = cc[j] - 2.0 * G[i, j]
                    if v < bestv:
                        bestv = v
                        best = j
                xx = 0.0
                for t in range(d):
                    xx = xx + Xv[start + i, t] * Xv[start + i, t]
                labels[start + i] = best
                dist[start + i] = fmax(bestv + xx, 0.0)
            start = start + m
    return labels_arr, dist_arr


def accumulate(X, labels, Py_ssize_t k):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef long long[::1] lv = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = Xv.shape[0]
    cdef Py_ssize_t d = Xv.shape[1]
    sums_arr = np.zeros((k, d), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef long long[::1] counts = counts_arr
    cdef Py_ssize_t i, t
    cdef long long c
    with nogil:
        for i in range(n):
            c = lv[i]
            counts[c] += 1
            for t in range(d):
                sums[c, t] += Xv[i, t]
    return sums_arr, counts_arr


def minibatch_update(double[:, ::1] centers, long long[::1] counts, batch, labels):
    """Sequential per-sample update ``c += (x - c) / n_c`` in sample order."""
    cdef double[:, ::1] B = np.ascontiguousarray(batch, dtype=np.float64)
    cdef long long[::1] lv = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = B.shape[0]
    cdef Py_ssize_t d = B.shape[1]
    cdef Py_ssize_t i, t
    cdef long long c
    cdef double eta
    with nogil:
        for i in range(n):
            c = lv[i]
            counts[c] += 1
            eta = 1.0 / counts[c]
            for t in range(d):
                centers[c, t] += eta * (B[i, t] - centers[c, t])


def nms_keep(boxes, groups, double thresh):
    cdef double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef long long[::1] gv = np.ascontiguousarray(groups, dtype=np.int64)
    cdef Py_ssize_t n = bv.shape[0]
    keep_arr = np.zeros(n, dtype=bool)
    cdef cnp.npy_bool[::1] keep = keep_arr
    cdef char[::1] dead = np.zeros(n, dtype=np.int8)
    cdef double[::1] area = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double w, h, inter
    with nogil:
        for i in range(n):
            area[i] = (bv[i, 2] - bv[i, 0]) * (bv[i, 3] - bv[i, 1])
        for i in range(n):
            if dead[i]:
                continue
            keep[i] = True
            for j in range(i + 1, n):
                if dead[j] or gv[j] != gv[i]:
                    continue
                w = fmax(0.0, fmin(bv[i, 2], bv[j, 2]) - fmax(bv[i, 0], bv[j, 0]))
                h = fmax(0.0, fmin(bv[i, 3], bv[j, 3]) - fmax(bv[i, 1], bv[j, 1]))
                inter = w * h
                if inter / (area[i] + area[j] - inter) > thresh:
                    dead[j] = 1
    return keep_arr
