# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Every kernel accumulates in double and rounds once to float32 on store.
Exponentials go through numpy's vectorised ufunc between compiled passes.
Rows are independent and each row is reduced by one thread in a fixed
order, so results do not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"


def matmul(const float[:, ::1] a, const float[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], inner = a.shape[1], m = b.shape[1]
    out_arr = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, j
    cdef double aik
    cdef double *acc
    cdef const float *brow
    if n == 0 or m == 0:
        return out_arr
    with nogil, parallel():
        acc = <double *> malloc(m * sizeof(double))
        for i in prange(n, schedule="static"):
            for j in range(m):
                acc[j] = 0.0
            for k in range(inner):
                aik = a[i, k]
                brow = &b[k, 0]
                for j in range(m):
                    acc[j] = acc[j] + aik * brow[j]
            for j in range(m):
                out[i, j] = <float> acc[j]
        free(acc)
    return out_arr


def _normalize_rows(double[:, ::1] e, float[:, ::1] out, const Py_ssize_t[::1] hi):
    # rows of e hold exp(x - rowmax) in their first hi[i] columns
    cdef Py_ssize_t n = e.shape[0], i, j
    cdef double total
    with nogil:
        for i in prange(n, schedule="static"):
            total = 0.0
            for j in range(hi[i]):
                total = total + e[i, j]
            for j in range(hi[i]):
                e[i, j] = e[i, j] / total
                out[i, j] = <float> e[i, j]


def softmax_rows(const float[:, ::1] x, const cnp.uint8_t[:, ::1] mask=None):
    # Masked entries never enter the max or the sum; rows must have one unmasked entry.
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.zeros((n, m), dtype=np.float32)
    if n == 0 or m == 0:
        return out_arr
    shifted_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] shifted = shifted_arr
    cdef bint masked = mask is not None
    cdef Py_ssize_t i, j
    cdef double mx
    with nogil:
        for i in prange(n, schedule="static"):
            mx = -INFINITY
            for j in range(m):
                if masked and not mask[i, j]:
                    continue
                if x[i, j] > mx:
                    mx = x[i, j]
            for j in range(m):
                if masked and not mask[i, j]:
                    shifted[i, j] = -INFINITY
                else:
                    shifted[i, j] = <double> x[i, j] - mx
    # vectorised exp; masked entries become exact zeros
    np.exp(shifted_arr, out=shifted_arr)
    _normalize_rows(shifted_arr, out_arr, np.full(n, m, dtype=np.intp))
    return out_arr


def attention_head(const float[:, ::1] q, const float[:, ::1] k,
                   const float[:, ::1] v, double scale, bint causal):
    """Fused scaled dot-product attention for one head.

    Returns (weights, output). Under ``causal`` the keys after each query
    are skipped outright, so their weights are exact zeros.
    """
    cdef Py_ssize_t nq = q.shape[0], nk = k.shape[0], d = q.shape[1], dv = v.shape[1]
    w_arr = np.zeros((nq, nk), dtype=np.float32)
    o_arr = np.empty((nq, dv), dtype=np.float32)
    if nq == 0 or nk == 0:
        return w_arr, o_arr
    # keys transposed so the score loop runs over contiguous key columns
    cdef const float[:, ::1] kt = np.ascontiguousarray(np.asarray(k).T)
    p_arr = np.empty((nq, nk), dtype=np.float64)
    hi_arr = np.empty(nq, dtype=np.intp)
    cdef double[:, ::1] p = p_arr
    cdef Py_ssize_t[::1] hi = hi_arr
    cdef float[:, ::1] o = o_arr
    cdef Py_ssize_t i, j, t, top
    cdef double qit, mx, pij
    cdef double *row
    cdef double *acc
    cdef const float *src
    with nogil:
        for i in prange(nq, schedule="static"):
            top = nk
            if causal and i + 1 < nk:
                top = i + 1
            hi[i] = top
            row = &p[i, 0]
            for j in range(top):
                row[j] = 0.0
            for t in range(d):
                qit = q[i, t]
                src = &kt[t, 0]
                for j in range(top):
                    row[j] = row[j] + qit * src[j]
            mx = -INFINITY
            for j in range(top):
                row[j] = row[j] * scale
                if row[j] > mx:
                    mx = row[j]
            for j in range(top):
                row[j] = row[j] - mx
            for j in range(top, nk):
                row[j] = -INFINITY
    np.exp(p_arr, out=p_arr)
    _normalize_rows(p_arr, w_arr, hi_arr)
    with nogil, parallel():
        acc = <double *> malloc((dv + 1) * sizeof(double))
        for i in prange(nq, schedule="static"):
            for t in range(dv):
                acc[t] = 0.0
            for j in range(hi[i]):
                pij = p[i, j]
                src = &v[j, 0]
                for t in range(dv):
                    acc[t] = acc[t] + pij * src[t]
            for t in range(dv):
                o[i, t] = <float> acc[t]
        free(acc)
    return w_arr, o_arr


def dot_argmax(const float[:, ::1] cands, const float[:, ::1] refs):
    """Index of the reference with the largest dot product, first wins on ties."""
    cdef Py_ssize_t m = cands.shape[0], n = refs.shape[0], d = cands.shape[1]
    best_arr = np.zeros(m, dtype=np.int64)
    cdef cnp.int64_t[::1] best = best_arr
    cdef const float[:, ::1] rt = np.ascontiguousarray(np.asarray(refs).T)
    cdef Py_ssize_t i, r, t, arg
    cdef double cit, top
    cdef double *s
    cdef const float *src
    if m == 0 or n == 0:
        return best_arr
    with nogil, parallel():
        s = <double *> malloc(n * sizeof(double))
        for i in prange(m, schedule="static"):
            for r in range(n):
                s[r] = 0.0
            for t in range(d):
                cit = cands[i, t]
                src = &rt[t, 0]
                for r in range(n):
                    s[r] = s[r] + cit * src[r]
            top = -INFINITY
            arg = 0
            for r in range(n):
                if s[r] > top:
                    top = s[r]
                    arg = r
            best[i] = arg
        free(s)
    return best_arr
