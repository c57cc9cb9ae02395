# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, ceil, exp, fabs, floor

cnp.import_array()


def ray_integrals(double[:, ::1] mu_total, double[:, ::1] mu_excess,
                  double apex_x, double apex_y, double step):
    cdef Py_ssize_t h = mu_total.shape[0], w = mu_total.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tot = np.zeros((h, w), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] exc = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] tv = tot, ev = exc
    cdef Py_ssize_t r, c, k, n, si, sj
    cdef double px, py, dx, dy, t0, seg, dl, t, sx, sy, acc_t, acc_e
    with nogil:
        for r in range(h):
            for c in range(w):
                px = c + 0.5
                py = r + 0.5
                dx = px - apex_x
                dy = py - apex_y
                if apex_y < 0.0:
                    t0 = -apex_y / dy
                else:
                    t0 = 0.0
                seg = sqrt(dx * dx + dy * dy) * (1.0 - t0)
                n = <Py_ssize_t>ceil(seg / step)
                if n < 1:
                    n = 1
                dl = seg / n
                acc_t = 0.0
                acc_e = 0.0
                for k in range(n):
                    t = t0 + (k + 0.5) / n * (1.0 - t0)
                    sx = apex_x + t * dx
                    sy = apex_y + t * dy
                    sj = <Py_ssize_t>floor(sx)
                    si = <Py_ssize_t>floor(sy)
                    if sj < 0:
                        sj = 0
                    elif sj >= w:
                        sj = w - 1
                    if si < 0:
                        si = 0
                    elif si >= h:
                        si = h - 1
                    acc_t = acc_t + mu_total[si, sj] * dl
                    acc_e = acc_e + mu_excess[si, sj] * dl
                tv[r, c] = acc_t
                ev[r, c] = acc_e
    return tot, exc


def rw_edge_weights(double[:, ::1] g, double beta, double gamma, double eps):
    """Edge weights of the 8-connected grid, one array per direction.

    Returns (right, down, down_right, down_left) with shapes
    (h, w-1), (h-1, w), (h-1, w-1), (h-1, w-1).
    """
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] right = np.empty((h, w - 1))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] down = np.empty((h - 1, w))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dr = np.empty((h - 1, w - 1))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dlf = np.empty((h - 1, w - 1))
    cdef double[:, ::1] rv = right, dv = down, drv = dr, dlv = dlf
    with nogil:
        for i in range(h):
            for j in range(w - 1):
                rv[i, j] = gamma * exp(-beta * fabs(g[i, j] - g[i, j + 1])) + eps
        for i in range(h - 1):
            for j in range(w):
                dv[i, j] = exp(-beta * fabs(g[i, j] - g[i + 1, j])) + eps
            for j in range(w - 1):
                drv[i, j] = exp(-beta * fabs(g[i, j] - g[i + 1, j + 1])) + eps
                dlv[i, j] = exp(-beta * fabs(g[i, j + 1] - g[i + 1, j])) + eps
    return right, down, dr, dlf
