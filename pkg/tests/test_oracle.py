import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, linalg
from scipy.stats import multivariate_normal

from shelab.errors import DomainError, NumericalError, UnsupportedError
from shelab.lattice import ring_transition, simple_system
from shelab.oracle import (
    GaussianLaw,
    additive_law,
    additive_law_vanloan,
    box_probability,
    gate_status,
    isserlis_moment,
    pam_second_moments,
    pam_second_moments_ode,
    validate_pam_ode,
)
from shelab.sde import constant, drift_matrix, linear, simulate_ensemble
from shelab.noise import sample_covariance_se


def two_site(rho, u0=(1.0, 0.5), kappa=1.0, g01=0.4):
    return simple_system([[0.5, 0.5], [0.5, 0.5]], [[1.0, g01], [g01, 1.0]], rho, list(u0), kappa)


def ring3(rho, gamma=None, u0=(1.0, 0.6, 1.4), kappa=1.0):
    g = np.array([[1.0, 0.3, 0.3], [0.3, 1.0, 0.3], [0.3, 0.3, 1.0]]) if gamma is None else gamma
    return simple_system(ring_transition(3, {1: 0.5, -1: 0.5}), g, rho, list(u0), kappa)


# ---------------------------------------------------------------- additive law

def test_additive_zero_noise_is_deterministic_flow():
    sys = ring3(constant(0.0))
    law = additive_law(sys, [(0.5, 0), (1.0, 2)])
    assert np.all(law.covariance == 0)
    E = linalg.expm(drift_matrix(sys) * 1.0)
    assert law.mean[1] == pytest.approx((E @ sys.u0)[2], rel=1e-13)


def test_additive_single_site_brownian_variance():
    a, g0, t = 0.7, 2.0, 1.3
    sys = simple_system([[1.0]], [[g0]], constant(a), [0.5], kappa=3.0)
    law = additive_law(sys, [(t, 0)])
    assert law.covariance[0, 0] == pytest.approx(a * a * g0 * t, rel=1e-12)
    assert law.mean[0] == pytest.approx(0.5)


def test_additive_matches_van_loan():
    sys = ring3(constant(1.3), kappa=2.0)
    for t in (0.1, 1.0, 2.5):
        law = additive_law(sys, [(t, i) for i in range(3)])
        assert np.allclose(law.covariance, additive_law_vanloan(sys, t), rtol=1e-10, atol=1e-14)


def test_additive_cross_time_covariance():
    # for t ≥ s: Cov(U(t), U(s)) = e^{A(t-s)} Σ(s)
    sys = ring3(constant(1.0))
    law = additive_law(sys, [(0.4, 0), (0.4, 1), (0.4, 2), (1.0, 0), (1.0, 1), (1.0, 2)])
    S = additive_law_vanloan(sys, 0.4)
    E = linalg.expm(drift_matrix(sys) * 0.6)
    assert np.allclose(law.covariance[3:, :3], E @ S, rtol=1e-10)


def test_additive_matches_monte_carlo():
    sys = two_site(constant(0.8))
    law = additive_law(sys, [(1.0, 0), (1.0, 1)])
    ens = simulate_ensemble(sys, 1.0, 0.01, 2718, 100000, record_times=[1.0])
    X = ens.values[:, 0, :]
    cov, se = sample_covariance_se(X)
    # the Euler covariance carries an O(dt) bias that is well below the MC error here
    assert np.all(np.abs(cov - law.covariance) <= 5 * se)
    mse = X.std(axis=0, ddof=1) / math.sqrt(X.shape[0])
    assert np.all(np.abs(X.mean(axis=0) - law.mean) <= 5 * mse)


@given(times=st.lists(st.floats(0.05, 3.0), min_size=1, max_size=4), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_additive_covariance_is_psd(times, seed):
    sys = ring3(constant(1.0))
    rng = np.random.default_rng(seed)
    query = [(t, int(rng.integers(0, 3))) for t in times] + [(times[0], 0)]
    C = additive_law(sys, query).covariance
    assert np.min(np.linalg.eigvalsh(C)) >= -1e-10 * max(np.trace(C), 1e-300)


def test_additive_rejects_multiplicative_noise():
    with pytest.raises(DomainError):
        additive_law(ring3(linear(1.0)), [(1.0, 0)])
    with pytest.raises(DomainError):
        additive_law(ring3(constant(1.0)), [(0.0, 0)])


# ---------------------------------------------------------------- Isserlis

def test_isserlis_examples():
    law = GaussianLaw(((1, 0),), np.array([0.7]), np.array([[2.0]]))
    assert isserlis_moment(law, [2]) == pytest.approx(0.49 + 2.0)
    centred = GaussianLaw(((1, 0),), np.array([0.0]), np.array([[1.5]]))
    assert isserlis_moment(centred, [4]) == pytest.approx(3 * 1.5**2)
    assert isserlis_moment(centred, [3]) == 0.0
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, 6))
    S = X @ X.T
    law4 = GaussianLaw(tuple((1, i) for i in range(4)), np.zeros(4), S)
    expected = S[0, 1] * S[2, 3] + S[0, 2] * S[1, 3] + S[0, 3] * S[1, 2]
    assert isserlis_moment(law4, [1, 1, 1, 1]) == pytest.approx(expected, rel=1e-13)


def test_isserlis_noncentral_closed_forms():
    m, v = 1.3, 0.4
    law = GaussianLaw(((1, 0),), np.array([m]), np.array([[v]]))
    assert isserlis_moment(law, [3]) == pytest.approx(m**3 + 3 * m * v)
    assert isserlis_moment(law, [4]) == pytest.approx(m**4 + 6 * m * m * v + 3 * v * v)
    assert isserlis_moment(law, [0]) == 1.0


def test_isserlis_degree_cap():
    law = GaussianLaw(((1, 0), (1, 1)), np.zeros(2), np.eye(2))
    isserlis_moment(law, [4, 4])
    with pytest.raises(UnsupportedError):
        isserlis_moment(law, [5, 4])
    with pytest.raises(DomainError):
        isserlis_moment(law, [1])


@pytest.mark.parametrize("k", [(1, 1), (2, 1), (2, 2), (3, 1), (0, 4), (3, 3)])
def test_isserlis_matches_2d_quadrature(k):
    m = np.array([0.4, -0.3])
    C = np.array([[1.0, 0.5], [0.5, 0.8]])
    law = GaussianLaw(((1, 0), (1, 1)), m, C)
    pdf = multivariate_normal(m, C).pdf
    R = 12.0
    val = integrate.dblquad(lambda y, x: x ** k[0] * y ** k[1] * pdf([x, y]), m[0] - R, m[0] + R,
                            m[1] - R, m[1] + R, epsabs=1e-12, epsrel=1e-10)[0]
    assert isserlis_moment(law, k) == pytest.approx(val, rel=1e-6, abs=1e-10)


# ---------------------------------------------------------------- box probability

def test_box_probability_matches_scipy_and_bounds():
    m = np.array([0.3, -0.2])
    for c in (-0.9, 0.0, 0.6):
        C = np.array([[1.0, c], [c, 2.0]])
        law = GaussianLaw(((1, 0), (1, 1)), m, C)
        for a in ([0.5, 0.7], [-1.0, 2.0], [3.0, 3.0]):
            assert box_probability(law, a) == pytest.approx(multivariate_normal(m, C).cdf(a), abs=1e-7)
    one = GaussianLaw(((1, 0),), np.array([0.0]), np.array([[1.0]]))
    assert box_probability(one, [0.0]) == pytest.approx(0.5)


def test_box_probability_degenerate_correlation():
    law = GaussianLaw(((1, 0), (1, 1)), np.zeros(2), np.ones((2, 2)))
    assert box_probability(law, [0.0, 1.0]) == pytest.approx(0.5, abs=1e-9)
    assert box_probability(law, [1.0, 0.0]) == pytest.approx(0.5, abs=1e-9)


# ---------------------------------------------------------------- PAM second moments

def test_pam_zero_lambda_is_outer_product_flow():
    sys = ring3(linear(0.0))
    t = 0.8
    E = linalg.expm(drift_matrix(sys) * t)
    m = pam_second_moments(sys, t, gate=False)
    assert np.allclose(m, np.outer(E @ sys.u0, E @ sys.u0), rtol=1e-10)


def test_pam_single_site_closed_form():
    lam, g0, u0, t = 1.2, 0.7, 1.5, 1.0
    sys = simple_system([[1.0]], [[g0]], linear(lam), [u0], kappa=2.0)
    m = pam_second_moments(sys, t, gate=False)
    assert m[0, 0] == pytest.approx(u0**2 * math.exp(lam**2 * g0 * t), rel=1e-10)


def test_pam_two_site_matches_monte_carlo():
    sys = two_site(linear(1.0))
    t = 1.0
    ens = simulate_ensemble(sys, t, 0.002, 4242, 100000, record_times=[t])
    U = ens.values[:, 0, :]
    prod = U[:, :, None] * U[:, None, :]
    est = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(U.shape[0])
    ode = pam_second_moments(sys, t, gate=False)
    assert np.all(np.abs(est - ode) <= 5 * se)


def test_pam_gate_runs_once_and_blocks_failures(monkeypatch):
    sys = ring3(linear(1.0), u0=(1.0, 0.9, 1.1))
    assert gate_status(sys) is None
    m = pam_second_moments(sys, [0.5, 1.0])
    rep = gate_status(sys)
    assert rep is not None and rep.passed and rep.max_abs_z <= 5
    assert m.shape == (2, 3, 3)
    from shelab import oracle
    bad = sys.with_(u0=np.array([1.0, 0.9, 1.2]))
    monkeypatch.setattr(oracle, "validate_pam_ode", lambda s: oracle.GateReport(False, 9.0, 0.5, 10, 0.01))
    with pytest.raises(NumericalError):
        pam_second_moments(bad, 1.0)
    with pytest.raises(NumericalError):
        pam_second_moments(bad, 1.0)


def test_pam_gate_detects_a_wrong_ode(monkeypatch):
    # a deliberately wrong ODE (noise term dropped) must fail the Monte Carlo gate
    from shelab import oracle
    sys = ring3(linear(1.5))
    monkeypatch.setattr(oracle, "_pam_rhs", lambda A, G, lam2: (lambda m: A @ m + m @ A.T))
    rep = validate_pam_ode(sys, n_paths=5000)
    assert not rep.passed


def test_pam_monotone_in_lambda():
    ts = np.linspace(0.1, 2.0, 8)
    prev = None
    for lam in (0.0, 0.5, 1.0, 2.0):
        m = pam_second_moments_ode(ring3(linear(lam)), ts)
        d = np.diagonal(m, axis1=1, axis2=2)
        if prev is not None:
            assert np.all(d >= prev)
        prev = d


@given(bump=st.floats(0.0, 0.5), t=st.floats(0.1, 2.0))
@settings(max_examples=20, deadline=None)
def test_pam_monotone_in_gamma(bump, t):
    g2 = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0]])
    g1 = g2 + bump * (np.ones((3, 3)) - np.eye(3)) * 0.5
    m1 = pam_second_moments_ode(ring3(linear(1.0), gamma=g1), [t])[0]
    m2 = pam_second_moments_ode(ring3(linear(1.0), gamma=g2), [t])[0]
    assert np.all(np.diag(m1) >= np.diag(m2))


def test_pam_ode_instability_and_domain():
    with pytest.raises(NumericalError):
        pam_second_moments_ode(ring3(linear(1.0), kappa=1000.0), [1.0], dt_ode=0.01)
    with pytest.raises(DomainError):
        pam_second_moments(ring3(constant(1.0)), 1.0)
