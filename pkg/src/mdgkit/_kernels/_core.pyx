# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the differentiation engine.

Same contract as numpy_backend: C-contiguous float64 in, fresh C-contiguous
float64 out. The wins over numpy come from fusing multi-pass operations
(log-softmax, masked products) into single loops and from skipping ufunc
dispatch on the small arrays this engine spends its time on.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp
from libc.math cimport isfinite as c_isfinite
from libc.math cimport log as c_log
from libc.math cimport tanh as c_tanh

cnp.import_array()

NAME = "cython"


def matmul(a, b):
    # BLAS already optimal; keep parity with the numpy backend.
    return a @ b


def transpose(cnp.ndarray a):
    return np.ascontiguousarray(a.T)


def add(double[::1] a_flat, double[::1] b_flat, shape):
    cdef Py_ssize_t i, n = a_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = a_flat[i] + b_flat[i]
    return out.reshape(shape)


def add_bias(double[:, ::1] x, double[::1] b):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            o[i, j] = x[i, j] + b[j]
    return out


def mul(double[::1] a_flat, double[::1] b_flat, shape):
    cdef Py_ssize_t i, n = a_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = a_flat[i] * b_flat[i]
    return out.reshape(shape)


def scale(double[::1] x_flat, double c, shape):
    cdef Py_ssize_t i, n = x_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = x_flat[i] * c
    return out.reshape(shape)


def relu(double[::1] x_flat, shape):
    cdef Py_ssize_t i, n = x_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = x_flat[i] if x_flat[i] > 0.0 else 0.0
    return out.reshape(shape)


def mask_pos(double[::1] ref_flat, double[::1] t_flat, shape):
    cdef Py_ssize_t i, n = ref_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = t_flat[i] if ref_flat[i] > 0.0 else 0.0
    return out.reshape(shape)


def tanh(double[::1] x_flat, shape):
    cdef Py_ssize_t i, n = x_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = c_tanh(x_flat[i])
    return out.reshape(shape)


def exp(double[::1] x_flat, shape):
    cdef Py_ssize_t i, n = x_flat.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = c_exp(x_flat[i])
    return out.reshape(shape)


def log_softmax(double[:, ::1] x):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    cdef double rowmax, acc
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        rowmax = x[i, 0]
        for j in range(1, m):
            if x[i, j] > rowmax:
                rowmax = x[i, j]
        acc = 0.0
        for j in range(m):
            o[i, j] = x[i, j] - rowmax
            acc += c_exp(o[i, j])
        acc = c_log(acc)
        for j in range(m):
            o[i, j] -= acc
    return out


def gather_rows(double[:, ::1] x, long long[::1] idx):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = x[i, idx[i]]
    return out


def scatter_rows(double[::1] v, long long[::1] idx, Py_ssize_t ncols):
    cdef Py_ssize_t i, n = v.shape[0]
    out = np.zeros((n, ncols))
    cdef double[:, ::1] o = out
    for i in range(n):
        o[i, idx[i]] = v[i]
    return out


def sum_all(double[::1] x_flat):
    cdef Py_ssize_t i, n = x_flat.shape[0]
    cdef double acc = 0.0
    for i in range(n):
        acc += x_flat[i]
    return np.asarray(acc)


def sum_axis0(double[:, ::1] x):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    out = np.zeros(m)
    cdef double[::1] o = out
    for i in range(n):
        for j in range(m):
            o[j] += x[i, j]
    return out


def sum_axis1_keep(double[:, ::1] x):
    cdef Py_ssize_t i, j, n = x.shape[0], m = x.shape[1]
    cdef double acc
    out = np.empty((n, 1))
    cdef double[:, ::1] o = out
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += x[i, j]
        o[i, 0] = acc
    return out


def broadcast_cols(double[:, ::1] c, Py_ssize_t m):
    cdef Py_ssize_t i, j, n = c.shape[0]
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            o[i, j] = c[i, 0]
    return out


def broadcast_rows(double[::1] r, Py_ssize_t n):
    cdef Py_ssize_t i, j, m = r.shape[0]
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            o[i, j] = r[j]
    return out


def fill(shape, double s):
    return np.full(shape, s)


def check_finite(double[::1] x_flat):
    cdef Py_ssize_t i, n = x_flat.shape[0]
    for i in range(n):
        if not c_isfinite(x_flat[i]):
            return False
    return True
