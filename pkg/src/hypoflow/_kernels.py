"""Hot loops, compiled with numba when available.

Set ``HYPOFLOW_NO_NUMBA=1`` before import to force the pure-numpy twins.
Both variants are always importable as ``*_numpy`` / ``*_numba`` so the
benchmark and the tests can compare them directly.
"""
import math
import os

import numpy as np
from scipy.linalg import toeplitz

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("HYPOFLOW_NO_NUMBA", "0") not in ("1", "true", "yes")


# --- Toeplitz quadrature convolution:  out_i = h * sum_j k[i - j + n - 1] g_j

def toeplitz_conv_numpy(kvals, g, h):
    n = g.shape[0]
    T = toeplitz(kvals[n - 1:], kvals[n - 1::-1])
    return h * (T @ g)


def _toeplitz_conv_py(kvals, g, h):
    n = g.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += kvals[i - j + n - 1] * g[j]
        out[i] = h * s
    return out


# --- exact exponential of the lowering-free field term, node by node.
# For every x-node i, apply exp(-s_i * B^T) to the Hermite column, where
# B^T psi_m = sqrt(gamma (m+1)) psi_{m+1} and the top mode is dropped.
# The series terminates because B^T is nilpotent on n_v modes.

def field_exp_numpy(c, s, gamma):
    nx, nv = c.shape
    out = c.copy()
    term = c.copy()
    m = np.arange(nv)
    for k in range(1, nv):
        shifted = np.zeros_like(term)
        shifted[:, 1:] = term[:, :-1] * np.sqrt(gamma * m[1:])[None, :]
        term = shifted * (-s[:, None] / k)
        if not np.any(term):
            break
        out += term
    return out


def _field_exp_py(c, s, gamma):
    nx, nv = c.shape
    out = np.empty_like(c)
    col = np.empty(nv)
    for i in range(nx):
        si = s[i]
        for m in range(nv):
            col[m] = c[i, m]
            out[i, m] = c[i, m]
        for k in range(1, nv):
            for m in range(nv - 1, 0, -1):
                col[m] = col[m - 1] * math.sqrt(gamma * m) * (-si / k)
            col[0] = 0.0
            for m in range(k, nv):
                out[i, m] += col[m]
    return out


# --- orthonormal probabilists' Hermite values  He_m(v)/sqrt(m!)

def hermite_table_numpy(v, nmax):
    v = np.asarray(v, dtype=float)
    H = np.zeros((nmax, v.size))
    H[0] = 1.0
    if nmax > 1:
        H[1] = v
    for m in range(1, nmax - 1):
        H[m + 1] = (v * H[m] - math.sqrt(m) * H[m - 1]) / math.sqrt(m + 1)
    return H


def _hermite_table_py(v, nmax):
    nq = v.shape[0]
    H = np.zeros((nmax, nq))
    for q in range(nq):
        H[0, q] = 1.0
        if nmax > 1:
            H[1, q] = v[q]
        for m in range(1, nmax - 1):
            H[m + 1, q] = (v[q] * H[m, q] - math.sqrt(m) * H[m - 1, q]) / math.sqrt(m + 1)
    return H


if HAVE_NUMBA:
    toeplitz_conv_numba = nb.njit(cache=True)(_toeplitz_conv_py)
    field_exp_numba = nb.njit(cache=True)(_field_exp_py)
    hermite_table_numba = nb.njit(cache=True)(_hermite_table_py)
else:  # pragma: no cover
    toeplitz_conv_numba = toeplitz_conv_numpy
    field_exp_numba = field_exp_numpy
    hermite_table_numba = hermite_table_numpy


def toeplitz_conv(kvals, g, h):
    """Quadrature convolution on the grid.

    ``kvals`` holds the kernel at the 2n-1 lattice offsets -(n-1)h..(n-1)h.
    """
    kvals = np.ascontiguousarray(kvals, dtype=float)
    g = np.ascontiguousarray(g, dtype=float)
    if kvals.shape[0] != 2 * g.shape[0] - 1:
        raise ValueError("kernel must be sampled at 2n-1 offsets")
    if USE_NUMBA:
        return toeplitz_conv_numba(kvals, g, float(h))
    return toeplitz_conv_numpy(kvals, g, h)


def field_exp(c, s, gamma):
    c = np.ascontiguousarray(c, dtype=float)
    s = np.ascontiguousarray(s, dtype=float)
    if USE_NUMBA:
        return field_exp_numba(c, s, float(gamma))
    return field_exp_numpy(c, s, gamma)


def hermite_table(v, nmax):
    v = np.ascontiguousarray(v, dtype=float)
    if USE_NUMBA:
        return hermite_table_numba(v, int(nmax))
    return hermite_table_numpy(v, nmax)
