import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypoflow.hypocoercivity import (C_V_prime, DiscretizationError, PerpProjector, abstract_lemma_check,
                                     bisect_alpha, build_auxiliary, choose_delta, fokker_planck_lemma_check,
                                     hypo_report, hypothesis_form, longtime_scan, nonnormal_example, null_ground,
                                     selfadjoint_example, slowest_rate, smoothing_constant, spectral_gap,
                                     verify_core_inequality, witten_factor_gap)
from hypoflow.operators import Discretization, assemble, build_potential


@pytest.fixture(scope="module")
def report(medium_ops):
    return hypo_report(medium_ops)


@pytest.mark.parametrize("gamma", [0.5, 2.0])
def test_harmonic_gap_is_gamma(harmonic, gamma):
    ops = assemble(Discretization(n_x=511, n_v=8, gamma=gamma), harmonic)
    alpha, ground, res = spectral_gap(ops, return_residual=True)
    assert alpha == pytest.approx(gamma, rel=1e-4)
    assert res <= 1e-8 and ops.norm(ground) == pytest.approx(1.0)


def test_gap_sparse_path_agrees_with_dense(harmonic):
    ops = assemble(Discretization(n_x=400, n_v=8), harmonic)  # n = 3200 > dense limit
    ops_d = assemble(Discretization(n_x=300, n_v=8), harmonic)
    a_s, a_d = spectral_gap(ops)[0], spectral_gap(ops_d)[0]
    assert a_s == pytest.approx(1.0, rel=1e-3) and a_d == pytest.approx(1.0, rel=1e-3)


def test_quartic_gap_is_the_position_factor_gap():
    pot = build_potential("quartic_double_well", {"a": 1.0, "b": 1.0}, x_max=5.0)
    ops = assemble(Discretization(n_x=255, n_v=8, x_max=5.0), pot)
    w1, w0 = witten_factor_gap(ops)
    assert abs(w0) < 1e-8
    assert spectral_gap(ops)[0] == pytest.approx(min(w1, 1.0), rel=1e-9)


def test_unresolved_ground_raises():
    pot = build_potential("quadratic", {"omega": 1.0}, x_max=8.0)
    ops = assemble(Discretization(n_x=16, n_v=8), pot)  # h ~ 0.94: ground eigenvalue far from 0
    with pytest.raises(DiscretizationError):
        spectral_gap(ops)


def test_null_ground_is_a_near_kernel_vector(medium_ops):
    g = null_ground(medium_ops)
    assert medium_ops.norm(medium_ops.Lambda2 @ g) < 1e-6
    assert medium_ops.norm(g - medium_ops.ground) < 1e-2


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_perp_projector_idempotent(medium_ops, seed):
    P = PerpProjector(medium_ops.ground, medium_ops.h)
    u = np.random.default_rng(seed).standard_normal(medium_ops.n)
    pu = P(u)
    np.testing.assert_allclose(P(pu), pu, atol=1e-12 * np.linalg.norm(u))
    assert abs(medium_ops.inner(pu, medium_ops.ground)) < 1e-12 * np.linalg.norm(u)


def test_report_bounds(report):
    rep, _ = report
    assert all(rep.bounds_ok().values())
    assert rep.norm_aLb <= 0.5 + 1e-10  # separable bound, sharper than 1
    assert rep.A_const == pytest.approx(12 * rep.C_V_prime)
    assert rep.delta == pytest.approx(math.sqrt(rep.alpha))


def test_C_V_prime_formula():
    assert C_V_prime(0.5, 1.0, 1.0) == pytest.approx(2 + 2.5 ** 2)
    # for delta > 1 the absorption needs 2 delta^2
    assert C_V_prime(0.0, 1.5, 4.0) == pytest.approx(2 * 2.25 + 25.0)
    assert choose_delta(4.0, 1.0) < 1.0


def test_auxiliary_validation(medium_ops):
    with pytest.raises(ValueError):
        build_auxiliary(medium_ops, 2.0)


def test_core_inequality(medium_ops, report):
    rep, aux = report
    r = verify_core_inequality(medium_ops, rep, aux, trials=40)
    assert r["ok"] and r["min_margin"] >= -1e-6


def test_selfadjoint_lemma_exact():
    K, L, alpha, C = selfadjoint_example()
    r = abstract_lemma_check(K, L, alpha, C)
    assert r.passed
    assert r.measured_rate == pytest.approx(alpha, rel=1e-8)
    np.testing.assert_allclose(r.values, np.exp(-alpha * r.times), rtol=1e-8)


def test_nonnormal_lemma():
    K, L, alpha, C = nonnormal_example()
    assert np.linalg.norm(K - K.T) > 1.0
    r = abstract_lemma_check(K, L, alpha, C)
    assert r.passed and r.hypothesis_margin >= 0


def test_lemma_rejects_bad_input():
    K, L, alpha, C = nonnormal_example()
    with pytest.raises(ValueError):
        abstract_lemma_check(-K, L, alpha, C)
    with pytest.raises(ValueError):
        abstract_lemma_check(K, 5 * L / np.linalg.norm(L, 2), alpha, 1.0)
    r = abstract_lemma_check(K, L, 10.0, C)
    assert not r.passed and r.hypothesis_margin < 0


def test_bisect_alpha_on_diagonal():
    Q = np.diag([0.3, 1.0, 2.0])
    assert bisect_alpha(Q) == pytest.approx(0.3, abs=1e-10)
    assert bisect_alpha(-Q) is None
    assert hypothesis_form(Q, np.zeros((3, 3))) == pytest.approx(Q)


def test_fokker_planck_lemma(harmonic):
    ops = assemble(Discretization(n_x=48, n_v=12), harmonic)
    rep, _ = hypo_report(ops)
    r = fokker_planck_lemma_check(ops, rep, times=np.linspace(0, 10, 6), probes=50)
    assert r.passed


def test_longtime_scan_small(harmonic):
    ops = assemble(Discretization(n_x=48, n_v=12), harmonic)
    rep, _ = hypo_report(ops)
    times = np.geomspace(0.05, 5.0, 6)
    res = longtime_scan(ops, rep, times)
    assert res.ok and res.prefactor <= 3.0
    C, ts, vals, worst = smoothing_constant(ops, rep, times)
    assert C == pytest.approx(res.C_b, rel=1e-6)
    assert worst <= 1.0


def test_slowest_rate_overdamped(harmonic):
    ops = assemble(Discretization(n_x=64, n_v=16, gamma=3.0), harmonic)
    assert slowest_rate(ops) == pytest.approx((3 - math.sqrt(5)) / 2, rel=5e-3)
