# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same contracts as ``_kernels_py``; results are bit-identical."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

BACKEND = "cython"

cdef uint64_t GAMMA = 0x9E3779B97F4A7C15ULL
cdef uint64_t M1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t M2 = 0x94D049BB133111EBULL
cdef double TO_UNIT = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * M1
    z = (z ^ (z >> 27)) * M2
    return z ^ (z >> 31)


cdef inline double _unit(uint64_t key, uint64_t ctr) noexcept nogil:
    return <double>(_mix(key + (ctr + 1) * GAMMA) >> 11) * TO_UNIT


def uniform_block(uint64_t key, int64_t start, int64_t n):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef int64_t j
    with nogil:
        for j in range(n):
            o[j] = _unit(key, <uint64_t>(start + j))
    return out


def dare_sparsify(x, uint64_t key, double p):
    cdef const float[::1] xv = np.ascontiguousarray(x, dtype=np.float32).ravel()
    cdef int64_t n = xv.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double scale = 1.0 / (1.0 - p)
    cdef int64_t j, kept = 0
    with nogil:
        for j in range(n):
            if _unit(key, <uint64_t>j) >= p:
                o[j] = (<double>xv[j]) * scale
                kept += 1
    return out, kept


def della_sparsify(x, uint64_t key, double p_target, double max_abs):
    cdef const float[::1] xv = np.ascontiguousarray(x, dtype=np.float32).ravel()
    cdef int64_t n = xv.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef int64_t j, kept = 0
    cdef double v, p
    with nogil:
        for j in range(n):
            v = <double>xv[j]
            if max_abs > 0.0:
                p = (1.0 - fabs(v) / max_abs) * p_target
            else:
                p = 0.0
            if _unit(key, <uint64_t>j) >= p:
                o[j] = v * (1.0 / (1.0 - p))
                kept += 1
    return out, kept


def ties_elect_merge(stack):
    cdef const double[:, ::1] s = np.ascontiguousarray(stack, dtype=np.float64)
    cdef int64_t n_vec = s.shape[0], n = s.shape[1]
    merged = np.zeros(n, dtype=np.float64)
    contrib_arr = np.zeros(n_vec, dtype=np.int64)
    cdef double[::1] o = merged
    cdef int64_t[::1] contrib = contrib_arr
    cdef int64_t i, j, pos, neg, cnt
    cdef int64_t conflicts = 0, n_pos = 0, n_neg = 0
    cdef double total, acc, v
    cdef int elected
    with nogil:
        for j in range(n):
            pos = 0
            neg = 0
            total = 0.0
            for i in range(n_vec):
                v = s[i, j]
                if v > 0:
                    pos += 1
                elif v < 0:
                    neg += 1
                total = total + v
            if pos > neg:
                elected = 1
            elif neg > pos:
                elected = -1
            elif total > 0:
                elected = 1
            elif total < 0:
                elected = -1
            else:
                elected = 0
            if pos > 0 and neg > 0:
                conflicts += 1
            if elected == 0:
                continue
            if elected == 1:
                n_pos += 1
            else:
                n_neg += 1
            acc = 0.0
            cnt = 0
            for i in range(n_vec):
                v = s[i, j]
                if (elected == 1 and v > 0) or (elected == -1 and v < 0):
                    acc = acc + v
                    cnt += 1
                    contrib[i] += 1
            if cnt > 0:
                o[j] = acc / cnt
    return merged, contrib_arr, conflicts, n_pos, n_neg, n - n_pos - n_neg


def sign_agree_count(a, b):
    cdef const float[::1] av = np.ascontiguousarray(a, dtype=np.float32).ravel()
    cdef const float[::1] bv = np.ascontiguousarray(b, dtype=np.float32).ravel()
    cdef int64_t n = av.shape[0], j, total = 0
    cdef int sa, sb
    with nogil:
        for j in range(n):
            sa = (av[j] > 0) - (av[j] < 0)
            sb = (bv[j] > 0) - (bv[j] < 0)
            if sa == sb:
                total += 1
    return total
