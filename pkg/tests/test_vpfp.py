import math

import numpy as np
import pytest
import scipy.linalg as sla
from scipy import integrate
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hypoflow.emden import make_mollifier
from hypoflow.operators import Discretization, assemble
from hypoflow.semigroup import CrankNicolson
from hypoflow.vpfp import (InterpolationError, entropy, field_from_density, initial_state, linear_mild_solve,
                           make_frame, make_kernel, picard_solve, prepare, rho_by_quadrature, scaled_kernel,
                           smallness_threshold, time_integral, time_march)


@pytest.fixture(scope="module")
def disc():
    return Discretization(n_x=48, n_v=12)


@pytest.fixture(scope="module")
def kernel(disc):
    return make_kernel(make_mollifier(disc, 0.5))


@pytest.fixture(scope="module")
def setup(harmonic, disc):
    return prepare(harmonic, disc, 0.3)


def test_kernel_invariants(kernel):
    assert kernel.norm_inf <= 0.5 + 1e-10
    np.testing.assert_allclose(kernel.phi, -kernel.phi[::-1], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kappa=st.floats(-3, 3))
def test_field_young_bound(disc, kernel, seed, kappa):
    rho = np.random.default_rng(seed).standard_normal(disc.n_x)
    E = field_from_density(rho, kernel, kappa)
    assert np.max(np.abs(E)) <= abs(kappa) * kernel.norm_inf * disc.h * np.abs(rho).sum() * (1 + 1e-12) + 1e-15


def test_field_parity_and_zero_charge(disc, kernel):
    rho = np.exp(-disc.nodes ** 2)
    E = field_from_density(rho, kernel, 0.7)
    np.testing.assert_allclose(E, -E[::-1], atol=1e-14)
    assert np.all(field_from_density(rho, kernel, 0.0) == 0)


def test_rho_matches_gauss_hermite_quadrature(setup, rng):
    u = rng.standard_normal(setup.ops_inf.n)
    np.testing.assert_allclose(rho_by_quadrature(u, setup.frame), setup.frame.rho(u), atol=1e-12)


def test_initial_state_mass(setup):
    u0 = initial_state(setup.frame, beta=0.3, v0=-0.8)
    assert setup.frame.mass(u0) == pytest.approx(1.0)
    c = setup.frame.coeffs(u0)
    assert c[:, 1] @ c[:, 0] < 0  # mean velocity follows v0


def test_zero_field_is_plain_crank_nicolson(setup):
    ops = setup.ops_inf
    u0 = initial_state(setup.frame)
    tr = linear_mild_solve(ops, lambda t: np.zeros(ops.disc.n_x), u0, 1.0, 0.1)
    cn = CrankNicolson(ops.K)
    np.testing.assert_allclose(tr.states[-1], cn.step(u0, 0.05, 20), atol=1e-10)


def test_constant_field_splitting_second_order(small_ops):
    ops = small_ops
    g = ops.disc.gamma
    E = 0.3 * np.tanh(ops.disc.nodes)
    u0 = ops.ground + 0.1 * ops.b_star @ ops.ground
    gen = ops.K + sp.kron(sp.diags(E), ops.B.T) / math.sqrt(g)
    exact = sla.expm(-1.0 * gen.toarray()) @ u0
    errs = [ops.norm(linear_mild_solve(ops, lambda t: E, u0, 1.0, dt).states[-1] - exact) for dt in (0.1, 0.05)]
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_step_growth_bounded_by_field(small_ops):
    E = 0.5 * np.ones(small_ops.disc.n_x)
    u0 = np.random.default_rng(3).standard_normal(small_ops.n)
    dt = 0.05
    tr = linear_mild_solve(small_ops, lambda t: E, u0, 1.0, dt)
    B = small_ops.B.toarray()
    assert np.all(tr.step_growth <= np.exp(dt * 0.5 * np.linalg.norm(B, 2)) + 1e-12)


def test_field_samples_interpolation(small_ops):
    ts = np.array([0.0, 0.1, 0.2])
    vals = np.zeros((3, small_ops.disc.n_x))
    linear_mild_solve(small_ops, (ts, vals), small_ops.ground, 0.2, 0.1)
    with pytest.raises(InterpolationError):
        linear_mild_solve(small_ops, (np.array([0.0, 0.5]), vals[:2]), small_ops.ground, 0.5, 0.1)
    with pytest.raises(ValueError):
        linear_mild_solve(small_ops, (ts, vals), small_ops.ground, 0.25, 0.1)


def test_picard_zero_kappa_one_iteration(harmonic, disc):
    s0 = prepare(harmonic, disc, 0.0)
    u0 = initial_state(s0.frame)
    r = picard_solve(s0.ops_inf, s0.frame, s0.kernel, 0.0, u0, 1.0, 0.1, window=0.5, E_inf=s0.E_inf)
    assert all(log["iterations"] == 1 for log in r.picard_log)
    m = time_march(s0.ops_inf, s0.frame, s0.kernel, 0.0, u0, 1.0, 0.1, E_inf=s0.E_inf)
    assert s0.frame.norm(r.states[-1] - m.states[-1]) <= 1e-12


def test_picard_contracts_and_matches_march(setup):
    u0 = initial_state(setup.frame)
    args = (setup.ops_inf, setup.frame, setup.kernel, 0.3, u0, 2.0, 0.1)
    r = picard_solve(*args, window=0.5, picard_tol=1e-12, E_inf=setup.E_inf)
    m = time_march(*args, E_inf=setup.E_inf)
    assert all(0 <= log["max_ratio"] < 0.5 for log in r.picard_log)
    assert setup.frame.norm(r.states[-1] - m.states[-1]) <= 1e-10


def test_equilibrium_stationary_and_mass(setup):
    fr = setup.frame
    r = time_march(setup.ops_inf, fr, setup.kernel, 0.3, fr.state, 5.0, 0.1, E_inf=setup.E_inf, out_every=10)
    assert np.max(r.decay) < 1e-3
    u0 = initial_state(fr)
    r = time_march(setup.ops_inf, fr, setup.kernel, 0.3, u0, 5.0, 0.1, E_inf=setup.E_inf, out_every=5)
    assert np.max(np.abs(r.mass - 1)) <= 1e-6
    assert np.all(r.field_sup <= r.field_bound * (1 + 1e-9) + 1e-12)
    assert np.all(r.decay >= 0)


def test_entropy_properties(setup, rng):
    fr = setup.frame
    H, cl = entropy(fr.state, fr)
    assert abs(H) <= 1e-8 and cl == 0
    u0 = initial_state(fr)
    H, cl = entropy(u0, fr)
    assert cl <= 1e-8 and H > 0  # truncated Hermite tail dips slightly negative
    assert H <= fr.norm(u0) * fr.norm(u0 - fr.state)
    H, cl = entropy(fr.state + 0.5 * rng.standard_normal(fr.state.size), fr)
    assert cl > 0 and H >= -cl


def test_threshold_monotone_and_positive(setup):
    k1, info = smallness_threshold(setup.report, setup.kernel, 2.0)
    k2, _ = smallness_threshold(setup.report, scaled_kernel(setup.kernel, 2.0), 2.0)
    assert k1 > 0 and k2 < k1
    assert info["C_inf"] == pytest.approx(setup.report.alpha / (2 * k1))
    lam = 0.3
    quad = integrate.quad(lambda s: math.exp(-lam * s) * (1 + s ** -0.5), 0, np.inf)[0]
    assert time_integral(2 * lam, 1.0) == pytest.approx(quad, rel=1e-8)


def test_make_frame_sampled(setup):
    fr = make_frame(setup.ops_inf, kind="sampled")
    assert fr.norm(fr.state) == pytest.approx(1.0)
