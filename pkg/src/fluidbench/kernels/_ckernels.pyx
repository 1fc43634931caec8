# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_py``; same signatures and results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def dot_rows(mat, x):
    cdef const double[:, ::1] m = np.ascontiguousarray(mat, dtype=np.float64)
    cdef const double[::1] v = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t k = m.shape[0], d = m.shape[1], i, j
    if v.shape[0] != d:
        raise ValueError(f"dimension mismatch: matrix has {d} columns, vector has {v.shape[0]}")
    out = np.empty(k, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc
    for i in range(k):
        acc = 0.0
        for j in range(d):
            acc += m[i, j] * v[j]
        o[i] = acc
    return out


def sq_dists(mat, x):
    cdef const double[:, ::1] m = np.ascontiguousarray(mat, dtype=np.float64)
    cdef const double[::1] v = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t k = m.shape[0], d = m.shape[1], i, j
    if v.shape[0] != d:
        raise ValueError(f"dimension mismatch: matrix has {d} columns, vector has {v.shape[0]}")
    out = np.empty(k, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc, t
    for i in range(k):
        acc = 0.0
        for j in range(d):
            t = m[i, j] - v[j]
            acc += t * t
        o[i] = acc
    return out


def add_row(double[:, ::1] sums, counts, Py_ssize_t row, x, double scale):
    cdef const double[::1] v = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t j, d = sums.shape[1]
    for j in range(d):
        sums[row, j] += scale * v[j]
    counts[row] += 1


def positive_rank_sum(scores, positive):
    s_arr = np.asarray(scores, dtype=np.float64)
    cdef const cnp.npy_bool[::1] pos = np.ascontiguousarray(positive, dtype=bool)
    cdef const cnp.intp_t[::1] order = np.argsort(s_arr, kind="mergesort")
    cdef const double[::1] s = s_arr
    cdef Py_ssize_t n = s.shape[0], start = 0, end, t
    cdef double total = 0.0, mid
    cdef long npos
    while start < n:
        end = start + 1
        while end < n and s[order[end]] == s[order[start]]:
            end += 1
        mid = (start + end + 1) / 2.0
        npos = 0
        for t in range(start, end):
            if pos[order[t]]:
                npos += 1
        total += npos * mid
        start = end
    return total


def f1_sweep(scores, positive):
    s_arr = np.asarray(scores, dtype=np.float64)
    cdef const cnp.npy_bool[::1] pos = np.ascontiguousarray(positive, dtype=bool)
    cdef const cnp.intp_t[::1] order = np.argsort(s_arr, kind="mergesort")
    cdef const double[::1] s = s_arr
    cdef Py_ssize_t n = s.shape[0], i = 0, j, t, m = 1
    cdef double tp = 0.0, pp = <double>n, denom, n_pos = 0.0
    for t in range(n):
        if pos[t]:
            n_pos += 1.0
    tp = n_pos
    thresholds = np.empty(n + 1, dtype=np.float64)
    f1 = np.empty(n + 1, dtype=np.float64)
    cdef double[::1] th_v = thresholds
    cdef double[::1] f1_v = f1
    # threshold -inf: everything predicted positive
    th_v[0] = -INFINITY
    denom = pp + n_pos
    f1_v[0] = 2.0 * tp / denom if denom > 0 else 0.0
    # raising the threshold to each distinct score drops that score's group
    while i < n:
        j = i
        while j < n and s[order[j]] == s[order[i]]:
            if pos[order[j]]:
                tp -= 1.0
            pp -= 1.0
            j += 1
        th_v[m] = s[order[i]]
        denom = pp + n_pos
        f1_v[m] = 2.0 * tp / denom if denom > 0 else 0.0
        m += 1
        i = j
    return thresholds[:m], f1[:m]
