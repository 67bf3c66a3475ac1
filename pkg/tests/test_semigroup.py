import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from hypoflow.semigroup import (ConvergenceError, CrankNicolson, DecayCurve, EvolveParams, ExpAction,
                                decide_constants, evolve, fit_slope, lyapunov_sufficient, lyapunov_track,
                                lyapunov_value, opnorm_scan, power_norm, smoothing_bounds)


def smooth_state(ops, seed=0):
    r = np.random.default_rng(seed)
    x = ops.disc.nodes
    c = np.zeros(ops.disc.n_v)
    c[:4] = r.standard_normal(4)
    u = np.kron((1 + r.standard_normal() * x) * np.exp(-x ** 2 / 4), c)
    return u / ops.norm(u)


def test_params_validation():
    with pytest.raises(ValueError):
        EvolveParams("rk4")
    with pytest.raises(ValueError):
        EvolveParams(dt=2.0, t_end=1.0)
    assert EvolveParams(dt=0.1, t_end=1.0).n_steps == 10


def test_decay_curve_validation():
    with pytest.raises(ValueError):
        DecayCurve(np.array([0.0, 0.0]), np.array([1.0, 2.0]))


def test_cn_matches_dense(small_ops):
    u0 = smooth_state(small_ops)
    _, cn = evolve(small_ops, u0, EvolveParams("crank_nicolson", 0.25, 1.0, 1e-7))
    _, de = evolve(small_ops, u0, EvolveParams("dense_expm", 0.25, 1.0))
    assert small_ops.norm(cn[-1] - de[-1]) <= 1e-6


def test_cn_refinement_failure_is_reported(small_ops):
    u0 = np.random.default_rng(0).standard_normal(small_ops.n)
    with pytest.raises(ConvergenceError):
        evolve(small_ops, u0, EvolveParams("crank_nicolson", 1.0, 1.0, 1e-15))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.01, 3.0))
def test_dense_semigroup_contracts(small_ops, seed, t):
    u = np.random.default_rng(seed).standard_normal(small_ops.n)
    E = ExpAction(small_ops, t, "dense_expm")
    assert small_ops.norm(E(u)) <= small_ops.norm(u) * (1 + 1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), dt=st.floats(1e-3, 5.0))
def test_cn_step_contracts(small_ops, seed, dt):
    u = np.random.default_rng(seed).standard_normal(small_ops.n)
    cn = CrankNicolson(small_ops.K)
    assert np.linalg.norm(cn.step(u, dt)) <= np.linalg.norm(u) * (1 + 1e-12)


def test_exp_action_transpose(small_ops, rng):
    E = ExpAction(small_ops, 0.3, "crank_nicolson", substep_tol=1e-6)
    u, w = rng.standard_normal(small_ops.n), rng.standard_normal(small_ops.n)
    assert np.dot(E(u), w) == pytest.approx(np.dot(u, E.T(w)), rel=1e-12)


def test_power_norm_against_svd(rng):
    M = rng.standard_normal((30, 30))
    s, _, ok = power_norm(lambda x: M @ x, lambda y: M.T @ y, 30, rng, iters=500, rtol=1e-12)
    assert ok and s == pytest.approx(np.linalg.norm(M, 2), rel=1e-8)


def test_scan_rejects_bad_input(small_ops):
    with pytest.raises(ValueError):
        opnorm_scan(small_ops, "c_e", [0.1])
    with pytest.raises(ValueError):
        opnorm_scan(small_ops, "b_e", [0.0, 0.1])


def test_velocity_smoothing_matches_ornstein_uhlenbeck(harmonic):
    # For t well inside the resolved range, |b e^{-tK}| follows the OU law (2 e t)^{-1/2}.
    from hypoflow.operators import Discretization, assemble
    ops = assemble(Discretization(n_x=16, n_v=256), harmonic)
    t = np.array([0.01, 0.03])
    c = opnorm_scan(ops, "b_e", t, method="crank_nicolson", substep_tol=1e-4, iters=20)
    np.testing.assert_allclose(c.values, (2 * np.e * t) ** -0.5, rtol=0.05)


def test_fit_slope_exact_power():
    t = np.logspace(-3, -1, 7)
    assert fit_slope(t, 3.0 * t ** -0.5) == pytest.approx(-0.5)


def test_constants_closed_form_harmonic():
    c = decide_constants(C_V=1.0, gamma=1.0)
    assert (c.E, c.D, c.C) == (4.0, 8.0, 660.0)
    assert all(lyapunov_sufficient(c, 1.0, 1.0).values())


@settings(max_examples=40, deadline=None)
@given(C_V=st.floats(0.0, 500.0), gamma=st.floats(0.05, 20.0))
def test_constants_always_sufficient(C_V, gamma):
    c = decide_constants(C_V=C_V, gamma=gamma)
    assert all(lyapunov_sufficient(c, C_V, gamma).values())
    assert c.D > c.E ** 2 / 4


def test_lyapunov_value_at_zero_is_C_norm(small_ops, rng):
    c = decide_constants(small_ops)
    u = rng.standard_normal(small_ops.n)
    assert lyapunov_value(small_ops, u, 0.0, c) == pytest.approx(c.C * small_ops.inner(u, u))


def test_lyapunov_monotone_and_smoothing(small_ops):
    c = decide_constants(small_ops)
    ts = np.linspace(0.02, 1.0, 50)
    for seed in range(5):
        u0 = np.random.default_rng(seed).standard_normal(small_ops.n)
        tr = lyapunov_track(small_ops, u0, c, ts)
        assert tr.relative_increment <= 1e-8
        assert np.all(tr.b_norm <= tr.b_bound) and np.all(tr.a_norm <= tr.a_bound)


def test_lyapunov_grid_validation(small_ops):
    c = decide_constants(small_ops)
    with pytest.raises(ValueError):
        lyapunov_track(small_ops, small_ops.ground, c, [0.1, 0.3])
    with pytest.raises(ValueError):
        smoothing_bounds(type(c)(E=4.0, D=1.0, C=1.0, eta=0.5, eta_prime=0.5), 1.0, 1.0)
