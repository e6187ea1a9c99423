"""Pure-numpy implementations of the differentiation-engine kernels.

Every function takes C-contiguous float64 arrays and returns a fresh
C-contiguous float64 array (the graph layer owns validation). Matrix
multiplication delegates to BLAS in both backends; the compiled core only
replaces the elementwise / reduction / softmax kernels where per-call
overhead and extra array passes dominate.
"""

import numpy as np

NAME = "numpy"


def matmul(a, b):
    return a @ b


def transpose(a):
    return np.ascontiguousarray(a.T)


def add(a, b):
    return a + b


def add_bias(x, b):
    return x + b


def mul(a, b):
    return a * b


def scale(x, c):
    return x * c


def relu(x):
    return np.maximum(x, 0.0)


def mask_pos(ref, t):
    # t gated by the strict-positivity mask of ref (ReLU derivative; 0 at the kink)
    return np.where(ref > 0.0, t, 0.0)


def tanh(x):
    return np.tanh(x)


def exp(x):
    return np.exp(x)


def log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def gather_rows(x, idx):
    return np.ascontiguousarray(x[np.arange(x.shape[0]), idx])


def scatter_rows(v, idx, ncols):
    out = np.zeros((v.shape[0], ncols))
    out[np.arange(v.shape[0]), idx] = v
    return out


def sum_all(x):
    return np.asarray(x.sum())


def sum_axis0(x):
    return x.sum(axis=0)


def sum_axis1_keep(x):
    return x.sum(axis=1, keepdims=True)


def broadcast_cols(c, m):
    return np.ascontiguousarray(np.broadcast_to(c, (c.shape[0], m)))


def broadcast_rows(r, n):
    return np.ascontiguousarray(np.broadcast_to(r, (n, r.shape[0])))


def fill(shape, s):
    return np.full(shape, s)


def check_finite(x):
    return bool(np.isfinite(x).all())
