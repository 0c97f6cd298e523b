# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled grid-search and 3x3 eigen kernels.

Mirrors ``_kernels_py``; see that module for the contracts.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, ceil, fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"

cdef double _SLACK = 1.0 - 1e-7


cdef inline long _clampi(long v, long hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


cdef inline bint _better(double d, long i, double bd, long bi) noexcept nogil:
    return d < bd or (d == bd and i < bi)


cdef inline void _insert(double d, long i, double* bd, long* bi, int* count, int k) noexcept nogil:
    cdef int pos
    if count[0] == k:
        if not _better(d, i, bd[k - 1], bi[k - 1]):
            return
        pos = k - 1
    else:
        pos = count[0]
        count[0] += 1
    while pos > 0 and _better(d, i, bd[pos - 1], bi[pos - 1]):
        bd[pos] = bd[pos - 1]
        bi[pos] = bi[pos - 1]
        pos -= 1
    bd[pos] = d
    bi[pos] = i


cdef void _scan_cell(const double[:, ::1] pts, const long[::1] order, const long[::1] starts,
                     long cid, double qx, double qy, double qz,
                     double* bd, long* bi, int* count, int k) noexcept nogil:
    cdef long s, j
    cdef double dx, dy, dz, d2
    for s in range(starts[cid], starts[cid + 1]):
        j = order[s]
        dx = qx - pts[j, 0]
        dy = qy - pts[j, 1]
        dz = qz - pts[j, 2]
        d2 = dx * dx + dy * dy + dz * dz
        _insert(d2, j, bd, bi, count, k)


def knn(points, order, starts, origin, double cell, dims, queries, long k):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const long[::1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef const long[::1] stv = np.ascontiguousarray(starts, dtype=np.int64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef long nx = dims[0], ny = dims[1], nz = dims[2]
    cdef long nq = qs.shape[0]
    if k > pts.shape[0]:
        k = pts.shape[0]
    out_i = np.empty((nq, k), dtype=np.int64)
    out_d = np.empty((nq, k), dtype=np.float64)
    cdef long[:, ::1] oi = out_i
    cdef double[:, ::1] od = out_d
    cdef long max_ring = max(nx, ny, nz)
    cdef double* bd = <double*> malloc(k * sizeof(double)) if k > 0 else NULL
    cdef long* bi = <long*> malloc(k * sizeof(long)) if k > 0 else NULL
    cdef long qi, r, cx, cy, cz, x, y, z, ax, ay, az
    cdef int count, t
    cdef double qx, qy, qz, lb
    if k == 0:
        return out_i, out_d
    try:
        with nogil:
            for qi in range(nq):
                qx = qs[qi, 0]
                qy = qs[qi, 1]
                qz = qs[qi, 2]
                cx = _clampi(<long> floor((qx - ox) / cell), nx - 1)
                cy = _clampi(<long> floor((qy - oy) / cell), ny - 1)
                cz = _clampi(<long> floor((qz - oz) / cell), nz - 1)
                count = 0
                r = 0
                while r <= max_ring:
                    for x in range(max(cx - r, 0), min(cx + r, nx - 1) + 1):
                        ax = x - cx if x >= cx else cx - x
                        for y in range(max(cy - r, 0), min(cy + r, ny - 1) + 1):
                            ay = y - cy if y >= cy else cy - y
                            for z in range(max(cz - r, 0), min(cz + r, nz - 1) + 1):
                                az = z - cz if z >= cz else cz - z
                                if ax != r and ay != r and az != r:
                                    continue
                                _scan_cell(pts, ordv, stv, x + nx * (y + ny * z),
                                           qx, qy, qz, bd, bi, &count, <int> k)
                    if count == k:
                        lb = r * cell * _SLACK
                        if lb * lb > bd[k - 1]:
                            break
                    r += 1
                for t in range(<int> k):
                    oi[qi, t] = bi[t]
                    od[qi, t] = bd[t]
    finally:
        free(bd)
        free(bi)
    return out_i, out_d


def radius(points, order, starts, origin, double cell, dims, queries, double rad, long max_k):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] qs = np.ascontiguousarray(queries, dtype=np.float64)
    cdef const long[::1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef const long[::1] stv = np.ascontiguousarray(starts, dtype=np.int64)
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef long nx = dims[0], ny = dims[1], nz = dims[2]
    cdef long nq = qs.shape[0]
    cdef long max_ring = max(nx, ny, nz)
    cdef double ring_f = ceil(rad / cell / _SLACK)
    cdef long rings = max_ring if not ring_f < max_ring else <long> ring_f
    cdef double r2 = rad * rad
    offsets = np.zeros(nq + 1, dtype=np.int64)
    cdef long[::1] off = offsets
    out_i = np.empty(nq * max_k, dtype=np.int64)
    out_d = np.empty(nq * max_k, dtype=np.float64)
    cdef long[::1] oi = out_i
    cdef double[::1] od = out_d
    cdef double* bd = <double*> malloc(max_k * sizeof(double))
    cdef long* bi = <long*> malloc(max_k * sizeof(long))
    cdef long qi, x, y, z, s, j, pos = 0
    cdef int count, t
    cdef double qx, qy, qz, dx, dy, dz, d2
    cdef long cx, cy, cz
    try:
        with nogil:
            for qi in range(nq):
                qx = qs[qi, 0]
                qy = qs[qi, 1]
                qz = qs[qi, 2]
                cx = _clampi(<long> floor((qx - ox) / cell), nx - 1)
                cy = _clampi(<long> floor((qy - oy) / cell), ny - 1)
                cz = _clampi(<long> floor((qz - oz) / cell), nz - 1)
                count = 0
                for x in range(max(cx - rings, 0), min(cx + rings, nx - 1) + 1):
                    for y in range(max(cy - rings, 0), min(cy + rings, ny - 1) + 1):
                        for z in range(max(cz - rings, 0), min(cz + rings, nz - 1) + 1):
                            for s in range(stv[x + nx * (y + ny * z)], stv[x + nx * (y + ny * z) + 1]):
                                j = ordv[s]
                                dx = qx - pts[j, 0]
                                dy = qy - pts[j, 1]
                                dz = qz - pts[j, 2]
                                d2 = dx * dx + dy * dy + dz * dz
                                if d2 <= r2:
                                    _insert(d2, j, bd, bi, &count, <int> max_k)
                for t in range(count):
                    oi[pos] = bi[t]
                    od[pos] = bd[t]
                    pos += 1
                off[qi + 1] = pos
    finally:
        free(bd)
        free(bi)
    return offsets, out_i[:pos].copy(), out_d[:pos].copy()


cdef void _jacobi3(double a[3][3], double v[3][3]) noexcept nogil:
    cdef int sweep, r, p, q, k
    cdef int pairs[3][2]
    cdef double off, diag, apq, theta, t, c, s, x1, x2
    pairs[0][0] = 0; pairs[0][1] = 1
    pairs[1][0] = 0; pairs[1][1] = 2
    pairs[2][0] = 1; pairs[2][1] = 2
    for r in range(3):
        for k in range(3):
            v[r][k] = 1.0 if r == k else 0.0
    for sweep in range(50):
        off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]
        diag = a[0][0] * a[0][0] + a[1][1] * a[1][1] + a[2][2] * a[2][2]
        if off <= 1e-36 * diag or off == 0.0:
            break
        for k in range(3):
            p = pairs[k][0]
            q = pairs[k][1]
            apq = a[p][q]
            if apq == 0.0:
                continue
            theta = (a[q][q] - a[p][p]) / (2.0 * apq)
            t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / sqrt(t * t + 1.0)
            s = t * c
            for r in range(3):
                x1 = a[r][p]
                x2 = a[r][q]
                a[r][p] = c * x1 - s * x2
                a[r][q] = s * x1 + c * x2
            for r in range(3):
                x1 = a[p][r]
                x2 = a[q][r]
                a[p][r] = c * x1 - s * x2
                a[q][r] = s * x1 + c * x2
            for r in range(3):
                x1 = v[r][p]
                x2 = v[r][q]
                v[r][p] = c * x1 - s * x2
                v[r][q] = s * x1 + c * x2


def eig3(mats):
    cdef const double[:, :, ::1] m = np.ascontiguousarray(np.asarray(mats, dtype=np.float64).reshape(-1, 3, 3))
    cdef long n = m.shape[0]
    w_arr = np.empty((n, 3), dtype=np.float64)
    v_arr = np.empty((n, 3, 3), dtype=np.float64)
    cdef double[:, ::1] w = w_arr
    cdef double[:, :, ::1] vv = v_arr
    cdef double a[3][3]
    cdef double v[3][3]
    cdef long i
    cdef int r, c
    with nogil:
        for i in range(n):
            for r in range(3):
                for c in range(3):
                    a[r][c] = m[i, r, c]
            _jacobi3(a, v)
            for r in range(3):
                w[i, r] = a[r][r]
                for c in range(3):
                    vv[i, r, c] = v[r][c]
    return w_arr, v_arr
