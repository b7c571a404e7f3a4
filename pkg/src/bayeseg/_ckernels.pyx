# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.  ``bayeseg._pykernels`` mirrors every function."""
import numpy as np
from cython.parallel import parallel, prange
from libc.stdlib cimport free, malloc
from libc.math cimport exp, sqrt, INFINITY
from libc.stdint cimport uint64_t, uint8_t, int16_t, int32_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9
cdef uint64_t MIX2 = 0x94D049BB133111EB
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _fin(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


def counter_uniform(uint64_t key, Py_ssize_t start, Py_ssize_t n, int num_threads=1):
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        o[i] = <double>(_fin(key + <uint64_t>(start + i + 1) * GOLDEN) >> 11) * TWO_M53
    return out


cdef inline int32_t _pick(const double[:, ::1] logw, Py_ssize_t i, double u, double* buf) noexcept nogil:
    cdef Py_ssize_t j, k = logw.shape[1]
    cdef double m = -INFINITY, tot = 0.0, c = 0.0, target
    for j in range(k):
        if logw[i, j] > m:
            m = logw[i, j]
    if m == -INFINITY:
        return -1
    for j in range(k):
        buf[j] = exp(logw[i, j] - m)
        tot = tot + buf[j]
    target = u * tot
    for j in range(k):
        c = c + buf[j]
        if c > target:
            return <int32_t>j
    # u * tot rounding past the last partial sum; take the last positive entry
    for j in range(k - 1, -1, -1):
        if logw[i, j] > -INFINITY:
            return <int32_t>j
    return -1


def categorical(const double[:, ::1] logw, const double[::1] u, int num_threads=1):
    cdef Py_ssize_t n = logw.shape[0], k = logw.shape[1], i
    out = np.empty(n, dtype=np.int32)
    cdef int32_t[::1] o = out
    cdef double* buf
    with nogil, parallel(num_threads=num_threads):
        buf = <double*> malloc(max(k, 1) * sizeof(double))
        for i in prange(n, schedule="static"):
            o[i] = _pick(logw, i, u[i], buf)
        free(buf)
    return out


def neighbor_count26(const uint8_t[:, :, ::1] v, int num_threads=1):
    cdef Py_ssize_t nx = v.shape[0], ny = v.shape[1], nz = v.shape[2]
    cdef Py_ssize_t x, y, z, a, b, c
    cdef int s
    out = np.zeros((nx, ny, nz), dtype=np.int16)
    cdef int16_t[:, :, ::1] o = out
    for x in prange(nx, nogil=True, num_threads=num_threads, schedule="static"):
        for y in range(ny):
            for z in range(nz):
                s = 0
                for a in range(x - 1, x + 2):
                    if a < 0 or a >= nx:
                        continue
                    for b in range(y - 1, y + 2):
                        if b < 0 or b >= ny:
                            continue
                        for c in range(z - 1, z + 2):
                            if c < 0 or c >= nz:
                                continue
                            s = s + v[a, b, c]
                o[x, y, z] = <int16_t>(s - v[x, y, z])
    return out


cdef inline double _nearest(const double[:, ::1] a, Py_ssize_t i, const double[:, ::1] b) noexcept nogil:
    cdef Py_ssize_t j, d, nd = a.shape[1]
    cdef double best = INFINITY, s, t
    for j in range(b.shape[0]):
        s = 0.0
        for d in range(nd):
            t = a[i, d] - b[j, d]
            s = s + t * t
        if s < best:
            best = s
    return sqrt(best)


def min_distances(const double[:, ::1] a, const double[:, ::1] b, int num_threads=1):
    cdef Py_ssize_t n = a.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        o[i] = _nearest(a, i, b)
    return out
