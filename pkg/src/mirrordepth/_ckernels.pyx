# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for patch extraction, patch scatter and z-buffering.

Every routine accumulates in exactly the order used by ``_pykernels`` so the
two backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, ::1] xp, int k, int s, int ho, int wo):
    cdef Py_ssize_t c_n = xp.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((c_n, k, k, ho, wo), dtype=dtype)
    cdef floating[:, :, :, :, ::1] cols = out
    cdef Py_ssize_t c, i, j, y, x
    for c in range(c_n):
        for i in range(k):
            for j in range(k):
                for y in range(ho):
                    for x in range(wo):
                        cols[c, i, j, y, x] = xp[c, i + s * y, j + s * x]
    return out.reshape(c_n * k * k, ho * wo)


def col2im(floating[:, ::1] cols, int c_n, int hp, int wp, int k, int s, int ho, int wo):
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((c_n, hp, wp), dtype=dtype)
    cdef floating[:, :, ::1] img = out
    cdef Py_ssize_t c, i, j, y, x, row
    for c in range(c_n):
        for i in range(k):
            for j in range(k):
                row = (c * k + i) * k + j
                for y in range(ho):
                    for x in range(wo):
                        img[c, i + s * y, j + s * x] += cols[row, y * wo + x]
    return out


def zbuffer_splat(cnp.int64_t[::1] rows, cnp.int64_t[::1] cols, floating[::1] depth,
                  int h, int w):
    dtype = np.float32 if floating is float else np.float64
    out = np.full((h, w), np.inf, dtype=dtype)
    cdef floating[:, ::1] buf = out
    cdef Py_ssize_t n, r, c
    for n in range(depth.shape[0]):
        r = rows[n]
        c = cols[n]
        if depth[n] < buf[r, c]:
            buf[r, c] = depth[n]
    return out
