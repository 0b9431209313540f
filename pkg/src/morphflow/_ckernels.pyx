# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled basis evaluation kernels.

Same contract as ``morphflow._kernels_py``; loops run per point so no
``(N, K)`` temporaries are allocated.  Points are distributed over OpenMP
threads when the extension was built with OpenMP.
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.math cimport M_PI, cos, sin, sqrt
from libc.stdlib cimport free, malloc


cdef inline void _tables(const double[:, ::1] points, Py_ssize_t n, Py_ssize_t dim,
                         Py_ssize_t jmax, double* ts, double* tc) noexcept nogil:
    cdef Py_ssize_t d, j
    cdef double ang, s2 = sqrt(2.0)
    for d in range(dim):
        for j in range(jmax):
            ang = points[n, d] * (M_PI * (j + 1))
            ts[d * jmax + j] = s2 * sin(ang)
            tc[d * jmax + j] = s2 * cos(ang)


cdef inline void _entry(const Py_ssize_t[:, ::1] modes, Py_ssize_t k, Py_ssize_t dim,
                        Py_ssize_t jmax, const double* ts, const double* tc,
                        double* f, double* g, double* q, double* grad, double* hess,
                        bint want_hess) noexcept nogil:
    cdef Py_ssize_t d, e, e2, jd
    cdef double w, p
    for d in range(dim):
        jd = modes[k, d]
        w = M_PI * jd
        f[d] = ts[d * jmax + jd - 1]
        g[d] = tc[d * jmax + jd - 1] * w
        q[d] = -(f[d] * w) * w
    for d in range(dim):
        p = g[0] if d == 0 else f[0]
        for e in range(1, dim):
            p = p * (g[e] if e == d else f[e])
        grad[d] = p
    if not want_hess:
        return
    for d in range(dim):
        p = q[0] if d == 0 else f[0]
        for e in range(1, dim):
            p = p * (q[e] if e == d else f[e])
        hess[d * dim + d] = p
        for e2 in range(d + 1, dim):
            p = g[0] if (d == 0 or e2 == 0) else f[0]
            for e in range(1, dim):
                p = p * (g[e] if (e == d or e == e2) else f[e])
            hess[d * dim + e2] = p
            hess[e2 * dim + d] = p


def field(const double[:, ::1] points, const Py_ssize_t[:, ::1] modes,
          const Py_ssize_t[:, ::1] src, const double[:, ::1] sgn,
          const double[::1] a, bint jacobian=False, int num_threads=1):
    cdef Py_ssize_t n_pts = points.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    cdef Py_ssize_t n_modes = modes.shape[0]
    cdef Py_ssize_t jmax = np.max(modes) if n_modes else 1
    v_arr = np.zeros((n_pts, dim))
    j_arr = np.zeros((n_pts if jacobian else 0, dim, dim))
    cdef double[:, ::1] v = v_arr
    cdef double[:, :, ::1] jac = j_arr
    cdef Py_ssize_t n, k, i, col, s_i
    cdef double coef
    cdef double* buf
    cdef double* ts
    cdef double* tc
    cdef double* f
    cdef double* g
    cdef double* q
    cdef double* grad
    cdef double* hess
    cdef double* acc
    if num_threads < 1:
        num_threads = 1
    with nogil, parallel(num_threads=num_threads):
        buf = <double*> malloc(sizeof(double) * (2 * dim * jmax + 4 * dim + 2 * dim * dim + dim))
        ts = buf
        tc = ts + dim * jmax
        f = tc + dim * jmax
        g = f + dim
        q = g + dim
        grad = q + dim
        hess = grad + dim
        acc = hess + dim * dim
        for n in prange(n_pts, schedule="static"):
            _tables(points, n, dim, jmax, ts, tc)
            for i in range(dim + dim * dim):
                acc[i] = 0.0
            for k in range(n_modes):
                if a[k] == 0.0:
                    continue
                _entry(modes, k, dim, jmax, ts, tc, f, g, q, grad, hess, jacobian)
                for i in range(dim):
                    if sgn[k, i] == 0.0:
                        continue
                    coef = a[k] * sgn[k, i]
                    s_i = src[k, i]
                    acc[i] = acc[i] + coef * grad[s_i]
                    if jacobian:
                        for col in range(dim):
                            acc[dim + i * dim + col] = acc[dim + i * dim + col] + coef * hess[s_i * dim + col]
            for i in range(dim):
                v[n, i] = acc[i]
            if jacobian:
                for i in range(dim):
                    for col in range(dim):
                        jac[n, i, col] = acc[dim + i * dim + col]
        free(buf)
    return v_arr, (j_arr if jacobian else None)


def basis(const double[:, ::1] points, const Py_ssize_t[:, ::1] modes,
          const Py_ssize_t[:, ::1] src, const double[:, ::1] sgn,
          bint entry_jacobians=False, int num_threads=1):
    cdef Py_ssize_t n_pts = points.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    cdef Py_ssize_t n_modes = modes.shape[0]
    cdef Py_ssize_t jmax = np.max(modes) if n_modes else 1
    val_arr = np.empty((n_pts, n_modes, dim))
    dj_arr = np.empty((n_pts if entry_jacobians else 0, n_modes, dim, dim))
    cdef double[:, :, ::1] values = val_arr
    cdef double[:, :, :, ::1] djac = dj_arr
    cdef Py_ssize_t n, k, i, col, s_i
    cdef double s
    cdef double* buf
    cdef double* ts
    cdef double* tc
    cdef double* f
    cdef double* g
    cdef double* q
    cdef double* grad
    cdef double* hess
    if num_threads < 1:
        num_threads = 1
    with nogil, parallel(num_threads=num_threads):
        buf = <double*> malloc(sizeof(double) * (2 * dim * jmax + 4 * dim + dim * dim))
        ts = buf
        tc = ts + dim * jmax
        f = tc + dim * jmax
        g = f + dim
        q = g + dim
        grad = q + dim
        hess = grad + dim
        for n in prange(n_pts, schedule="static"):
            _tables(points, n, dim, jmax, ts, tc)
            for k in range(n_modes):
                _entry(modes, k, dim, jmax, ts, tc, f, g, q, grad, hess, entry_jacobians)
                for i in range(dim):
                    s = sgn[k, i]
                    s_i = src[k, i]
                    values[n, k, i] = grad[s_i] * s
                    if entry_jacobians:
                        for col in range(dim):
                            djac[n, k, i, col] = hess[s_i * dim + col] * s
        free(buf)
    return val_arr, (dj_arr if entry_jacobians else None)
