import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st
from numpy.polynomial.hermite_e import hermegauss

from hypoflow import _kernels as K


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), seed=st.integers(0, 2**31 - 1))
def test_toeplitz_matches_direct_sum(n, seed):
    r = np.random.default_rng(seed)
    kv, g = r.standard_normal(2 * n - 1), r.standard_normal(n)
    direct = np.array([sum(kv[i - j + n - 1] * g[j] for j in range(n)) for i in range(n)]) * 0.3
    for f in (K.toeplitz_conv_numpy, K.toeplitz_conv_numba):
        np.testing.assert_allclose(f(kv, g, 0.3), direct, rtol=1e-12, atol=1e-12)


def test_toeplitz_rejects_wrong_length():
    with pytest.raises(ValueError):
        K.toeplitz_conv(np.ones(4), np.ones(3), 1.0)


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(1, 6), nv=st.integers(2, 12), gamma=st.floats(0.2, 3.0), seed=st.integers(0, 1000))
def test_field_exp_is_matrix_exponential(nx, nv, gamma, seed):
    r = np.random.default_rng(seed)
    c, s = r.standard_normal((nx, nv)), r.standard_normal(nx)
    Bt = np.diag(np.sqrt(gamma * np.arange(1, nv)), -1)
    ref = np.array([sla.expm(-s[i] * Bt) @ c[i] for i in range(nx)])
    for f in (K.field_exp_numpy, K.field_exp_numba):
        np.testing.assert_allclose(f(c, s, gamma), ref, rtol=1e-10, atol=1e-10)


def test_field_exp_leaves_mode_zero():
    c = np.random.default_rng(0).standard_normal((5, 9))
    out = K.field_exp(c, np.full(5, 0.7), 1.3)
    np.testing.assert_array_equal(out[:, 0], c[:, 0])


def test_hermite_table_orthonormal_under_gauss_quadrature():
    v, w = hermegauss(40)
    w = w / np.sqrt(2 * np.pi)
    for f in (K.hermite_table_numpy, K.hermite_table_numba):
        H = f(v, 30)
        np.testing.assert_allclose((H * w) @ H.T, np.eye(30), atol=1e-10)


def test_env_flag_selects_numpy_path():
    code = "from hypoflow import _kernels as k; print(k.USE_NUMBA)"
    env = dict(os.environ, HYPOFLOW_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
    env["HYPOFLOW_NO_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == str(K.HAVE_NUMBA)
