# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused softmax statistics/gradient and exact top-k
selection with deterministic tie-breaks. Contracts match _pykernels."""

import numpy as np

from libc.math cimport exp

ctypedef fused floating:
    float
    double

BACKEND_NAME = "cython"
WEIGHTED_EXP = 0
WEIGHTED_LOGIT = 1


def softmax_stats(floating[:, ::1] logits, floating[::1] row_max,
                  const long long[::1] pos_cols, const long long[:, ::1] neg_cols,
                  double pos_mass, double neg_mass, int variant):
    cdef Py_ssize_t b = logits.shape[0]
    cdef Py_ssize_t n = logits.shape[1]
    cdef Py_ssize_t nk = neg_cols.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double m, s, w, sh
    cdef long long c
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    exp_sums_arr = np.empty(b, dtype=dtype)
    weighted_arr = np.empty(b, dtype=dtype)
    cdef floating[::1] exp_sums = exp_sums_arr
    cdef floating[::1] weighted = weighted_arr
    with nogil:
        for i in range(b):
            m = <double> row_max[i]
            s = 0.0
            for j in range(n):
                s += exp(<double> logits[i, j] - m)
            exp_sums[i] = <floating> s
            w = 0.0
            c = pos_cols[i]
            if c >= 0:
                sh = <double> logits[i, c] - m
                w += pos_mass * (exp(sh) if variant == 0 else sh)
            for t in range(nk):
                c = neg_cols[i, t]
                if c >= 0:
                    sh = <double> logits[i, c] - m
                    w += neg_mass * (exp(sh) if variant == 0 else sh)
            weighted[i] = <floating> w
    return exp_sums_arr, weighted_arr


def softmax_loss_grad(floating[:, ::1] logits, floating[::1] row_max,
                      floating[::1] exp_sums, floating[::1] weighted,
                      const long long[::1] pos_cols, const long long[:, ::1] neg_cols,
                      double pos_mass, double neg_mass, double scale, int variant):
    cdef Py_ssize_t b = logits.shape[0]
    cdef Py_ssize_t n = logits.shape[1]
    cdef Py_ssize_t nk = neg_cols.shape[1]
    cdef Py_ssize_t i, j, t
    cdef double m, inv_s, inv_u
    cdef long long c
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    grad_arr = np.empty((b, n), dtype=dtype)
    cdef floating[:, ::1] grad = grad_arr
    with nogil:
        for i in range(b):
            m = <double> row_max[i]
            inv_s = 1.0 / <double> exp_sums[i]
            for j in range(n):
                grad[i, j] = <floating> (exp(<double> logits[i, j] - m) * inv_s * scale)
            if variant == 0:
                inv_u = 1.0 / <double> weighted[i]
                c = pos_cols[i]
                if c >= 0:
                    grad[i, c] -= <floating> (pos_mass * exp(<double> logits[i, c] - m) * inv_u * scale)
                for t in range(nk):
                    c = neg_cols[i, t]
                    if c >= 0:
                        grad[i, c] -= <floating> (neg_mass * exp(<double> logits[i, c] - m) * inv_u * scale)
            else:
                c = pos_cols[i]
                if c >= 0:
                    grad[i, c] -= <floating> (pos_mass * scale)
                for t in range(nk):
                    c = neg_cols[i, t]
                    if c >= 0:
                        grad[i, c] -= <floating> (neg_mass * scale)
    return grad_arr


cdef inline bint _worse(double av, long long ai, double bv, long long bi) noexcept nogil:
    # total order used for keeping the k best: better = higher value, ties to
    # the lower index; _worse is its inverse for the min-heap root
    return av < bv or (av == bv and ai > bi)


cdef void _sift_down(double* hv, long long* hi, Py_ssize_t pos, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t child
    cdef double v = hv[pos]
    cdef long long x = hi[pos]
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _worse(hv[child + 1], hi[child + 1], hv[child], hi[child]):
            child += 1
        if _worse(hv[child], hi[child], v, x):
            hv[pos] = hv[child]
            hi[pos] = hi[child]
            pos = child
        else:
            break
    hv[pos] = v
    hi[pos] = x


def topk_desc(const double[:, ::1] scores, const long long[::1] exclude_cols, Py_ssize_t k):
    cdef Py_ssize_t b = scores.shape[0]
    cdef Py_ssize_t n = scores.shape[1]
    cdef Py_ssize_t i, j, filled, size, t
    cdef long long ex
    cdef double v
    out_arr = np.empty((b, k), dtype=np.int64)
    if k == 0:
        return out_arr
    cdef bint any_excluded = False
    for i in range(b):
        if exclude_cols[i] >= 0:
            any_excluded = True
            break
    if k > n or (k == n and any_excluded):
        raise ValueError(f"k={k} exceeds available candidate columns")
    cdef long long[:, ::1] out = out_arr
    heap_val_arr = np.empty(k, dtype=np.float64)
    heap_idx_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] hv = heap_val_arr
    cdef long long[::1] hi = heap_idx_arr
    with nogil:
        for i in range(b):
            ex = exclude_cols[i]
            filled = 0
            j = 0
            while filled < k:
                if j != ex:
                    hv[filled] = scores[i, j]
                    hi[filled] = j
                    filled += 1
                j += 1
            for t in range(filled // 2 - 1, -1, -1):
                _sift_down(&hv[0], &hi[0], t, filled)
            while j < n:
                if j != ex:
                    v = scores[i, j]
                    if _worse(hv[0], hi[0], v, j):
                        hv[0] = v
                        hi[0] = j
                        _sift_down(&hv[0], &hi[0], 0, k)
                j += 1
            size = k
            for t in range(k):
                out[i, k - 1 - t] = hi[0]
                size -= 1
                hv[0] = hv[size]
                hi[0] = hi[size]
                if size > 0:
                    _sift_down(&hv[0], &hi[0], 0, size)
    return out_arr
