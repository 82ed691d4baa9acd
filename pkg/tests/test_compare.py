import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from shelab.compare import (
    INDEPENDENT_PATH_OFFSET,
    STATUS_CONSISTENT,
    STATUS_INCONCLUSIVE,
    STATUS_VIOLATION,
    CentralEven,
    CoordinateMap,
    Laplace,
    MaxIndicator,
    MCParams,
    Moment,
    NormPower,
    check_gamma_order,
    check_rho_order,
    compare_scenario_gamma,
    compare_scenario_rho,
    cone_check,
    decide,
    estimate,
    evaluate_functional,
    gate_functional,
    positivity_report,
    resolve_functional,
    slepian,
    verdict_from_samples,
)
from shelab.correlation import Riesz
from shelab.errors import DomainError, PreconditionError
from shelab.heatkernel import InitialDatum
from shelab.lattice import assemble_system, ring_transition, simple_system
from shelab.oracle import additive_law, isserlis_moment, pam_second_moments_ode
from shelab.sde import constant, drift_matrix, linear


def ring(n=3, rho=None, u0=None, gamma=None, kappa=1.0):
    p = ring_transition(n, {1: 0.5, -1: 0.5})
    if gamma is None:
        gamma = np.eye(n) + 0.3 * (np.ones((n, n)) - np.eye(n))
    return simple_system(p, gamma, rho or linear(1.0), np.ones(n) if u0 is None else u0, kappa)


# ---------------------------------------------------------------- functionals

def test_evaluate_functional_examples():
    vals = {(1.0, (0,)): 3.0, (1.0, (1,)): 2.0}
    assert evaluate_functional(Moment([(1.0, 0, 0), (1.0, 1, 0)]), vals) == 1.0
    assert evaluate_functional(Laplace([(1.0, 0, 0.0), (1.0, 1, 0.0)]), vals) == 1.0
    assert evaluate_functional(CentralEven(1.0, 0, 0.0, 1), vals) == 9.0
    assert evaluate_functional(Moment([(1.0, 0, 2), (1.0, 1, 1)]), vals) == 18.0
    assert evaluate_functional(Laplace([(1.0, 0, 0.5)]), vals) == pytest.approx(math.exp(-1.5))
    assert evaluate_functional(NormPower([(1.0, [0, 1], 2.0)]), vals) == pytest.approx(13.0)
    assert evaluate_functional(CoordinateMap([(1.0, 1, {"g": "exp", "lam": 1.0}, 2)]), vals) == \
        pytest.approx(math.exp(-4))
    assert evaluate_functional(MaxIndicator(1.0, [0, 1], 2.5), vals) == 0.0
    assert evaluate_functional(MaxIndicator(1.0, [0, 1], [3.0, 2.0]), vals) == 1.0
    with pytest.raises(DomainError):
        evaluate_functional(Moment([(2.0, 0, 1)]), vals)


def test_functional_validation():
    with pytest.raises(DomainError):
        Moment([(0.0, 0, 1)])
    with pytest.raises(DomainError):
        Laplace([(1.0, 0, -1.0)])
    with pytest.raises(DomainError):
        NormPower([(1.0, [0, 0], 2.0)])
    with pytest.raises(DomainError):
        NormPower([(1.0, [0, 1], 1.5)])
    with pytest.raises(DomainError):
        CentralEven(1.0, 0, -1.0, 1)
    for bad in ({"g": "exp", "lam": 0}, {"g": "inv_power", "c": 0.5}, {"g": "log_ratio", "a": 1, "b": 2},
                {"g": "xlog", "a": 1, "b": 1, "c": 2}, {"g": "power", "d": 0.5}, {"g": "sin"}):
        with pytest.raises(DomainError):
            CoordinateMap([(1.0, 0, bad, 1)])


def test_resolve_j0_is_deterministic_flow():
    sys = ring(3, u0=[1.0, 0.0, 2.0])
    F = resolve_functional(CentralEven(0.7, 1, "J0", 2), sys)
    c = (linalg.expm(drift_matrix(sys) * 0.7) @ sys.u0)[1]
    assert F.terms[0][2] == pytest.approx(c)


def test_functional_times_and_points():
    F = Moment([(0.5, 0, 1), (1.0, 0, 1), (1.0, 1, 2)])
    assert F.multi_time and F.times() == [0.5, 1.0]
    assert F.query_points() == [(0.5, (0,)), (1.0, (0,)), (1.0, (1,))]
    G = Moment([(1.0, 0, 2)])
    assert not G.multi_time


# ---------------------------------------------------------------- cone checks

def test_cone_exp_is_bounded_decreasing():
    rep = cone_check({"g": "exp", "lam": 1.0})
    assert "C2v_b-" in rep.classes and rep.admits("single") and rep.admits("multi")


@pytest.mark.parametrize("c,n", [(1.0, 1), (2.0, 2), (5.0, 1)])
def test_cone_central_even_single_only(c, n):
    rep = cone_check(lambda z: (z - c) ** (2 * n))
    assert rep.convex and not rep.increasing and not rep.decreasing
    assert rep.admits("single") and not rep.admits("multi")


@pytest.mark.parametrize("a,b", [(1, 1), (2, 1), (1, 3)])
def test_cone_xlog_is_polynomial_increasing(a, b):
    rep = cone_check({"g": "xlog", "a": a, "b": b, "c": math.e})
    assert "C2v_p+" in rep.classes


def test_cone_catalog_maps():
    assert "C2v_b-" in cone_check({"g": "inv_power", "c": 2.0}).classes
    assert "C2v_b-" in cone_check({"g": "log_ratio", "a": 2.0, "b": 1.0}).classes
    assert "C2v_p+" in cone_check({"g": "power", "d": 3.0}).classes


def test_cone_rejects_nonconvex_and_superpolynomial():
    assert not cone_check(np.sqrt).convex
    assert not cone_check(lambda z: np.sin(z) + 2).convex
    rep = cone_check(lambda z: np.exp(z / 100))
    assert rep.convex and not rep.polynomial and not rep.admits("single")
    assert rep.admits("multi")  # C2v+ needs neither boundedness nor polynomial growth


def test_cone_multivariate_functionals():
    assert cone_check(NormPower([(1.0, [0, 1], 2.0)])).admits("single")
    assert cone_check(Moment([(0.5, 0, 1), (1.0, 0, 1)])).admits("multi")
    assert cone_check(Laplace([(0.5, 0, 1.0), (1.0, 1, 0.5)])).admits("multi")
    F = CentralEven(1.0, 0, 2.0, 1)
    assert cone_check(F).admits("single")


def test_gate_functional_modes():
    F = CoordinateMap([(0.5, 0, {"g": "power", "d": 2.0}, 1), (1.0, 0, {"g": "power", "d": 2.0}, 1)])
    gate_functional(F)  # multi-time, C2v+
    G = CentralEven(1.0, 0, 2.0, 2)
    gate_functional(G, "single")
    with pytest.raises(PreconditionError):
        gate_functional(G, "multi")
    with pytest.raises(PreconditionError):
        gate_functional(MaxIndicator(1.0, [0], 1.0))


# ---------------------------------------------------------------- verdict machinery

def test_decide_thresholds():
    assert decide(-3.0, 10000) == STATUS_VIOLATION
    assert decide(-2.0, 10000) == STATUS_CONSISTENT
    assert decide(0.5, 100) == STATUS_INCONCLUSIVE
    assert decide(0.5, 5000) == STATUS_CONSISTENT
    assert decide(-2.0, 10000, threshold=1.645) == STATUS_VIOLATION


@given(seed=st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_planted_gap_is_flagged(seed):
    rng = np.random.default_rng(seed)
    n = 4000
    x2 = rng.normal(size=n)
    x1 = x2 - 8.0 / math.sqrt(n) + 0.0 * rng.normal(size=n)
    v = verdict_from_samples(x1, x2, paired=True)
    assert v.status == STATUS_VIOLATION and v.direction == "second"


def test_identical_samples_are_consistent():
    x = np.random.default_rng(0).normal(size=5000)
    v = verdict_from_samples(x, x, paired=True)
    assert v.status == STATUS_CONSISTENT and v.z_score == 0.0
    w = verdict_from_samples(x, x, paired=False)
    assert w.z_score == 0.0


# ---------------------------------------------------------------- estimation

def test_estimate_deterministic_system():
    sys = ring(3, rho=linear(0.0), u0=[1.0, 0.0, 0.0])
    est = estimate(sys, [Moment([(1.0, 0, 1)])], MCParams(50, 0.01, 1))[0]
    assert est.std_error <= 1e-15  # only rounding-level spread
    exact = (linalg.expm(drift_matrix(sys)) @ sys.u0)[0]
    assert est.value == pytest.approx(exact, abs=2e-3)  # Euler O(dt) error


def test_estimate_matches_isserlis():
    sys = ring(3, rho=constant(0.7), u0=[1.0, 0.5, 1.5])
    Fs = [Moment([(1.0, 0, 2)]), Moment([(1.0, 0, 1), (1.0, 1, 1)]), Moment([(1.0, 2, 4)]),
          Moment([(0.5, 1, 2), (1.0, 1, 2)])]
    est = estimate(sys, Fs, MCParams(40000, 0.005, 31))
    for F, e in zip(Fs, est):
        pts = F.query_points()
        law = additive_law(sys, [(t, s) for t, s in pts])
        k = [0] * len(pts)
        for t, s, kk in F.terms:
            k[pts.index((t, s))] += kk
        assert abs(e.value - isserlis_moment(law, k)) <= 5 * e.std_error


def test_estimate_matches_pam_ode():
    sys = ring(3, rho=linear(1.0))
    e = estimate(sys, [Moment([(1.0, 1, 2)])], MCParams(40000, 0.005, 32))[0]
    m = pam_second_moments_ode(sys, [1.0])[0]
    assert abs(e.value - m[1, 1]) <= 5 * e.std_error


def test_estimate_rejects_times_beyond_horizon():
    with pytest.raises(DomainError):
        estimate(ring(), [Moment([(2.0, 0, 1)])], MCParams(10, 0.01, 1, T=1.0))


# ---------------------------------------------------------------- scenarios

def test_rho_scenario_identical_rho():
    sys = ring()
    vs = compare_scenario_rho(sys, linear(1.0), linear(1.0), [Moment([(1.0, 0, 2)])], MCParams(2000, 0.01, 4))
    assert vs[0].status == STATUS_CONSISTENT and vs[0].z_score == 0.0


def test_rho_scenario_pam_and_negative_control():
    sys = ring(3)
    Fs = [Moment([(1.0, i, 2)]) for i in range(3)]
    mc = MCParams(20000, 0.01, 5)
    vs = compare_scenario_rho(sys, linear(2.0), linear(1.0), Fs, mc)
    assert all(v.status == STATUS_CONSISTENT for v in vs)
    m1 = pam_second_moments_ode(sys.with_(rho=linear(2.0)), [1.0])[0]
    m2 = pam_second_moments_ode(sys.with_(rho=linear(1.0)), [1.0])[0]
    assert np.all(np.diag(m1) > np.diag(m2))
    with pytest.raises(PreconditionError):
        compare_scenario_rho(sys, linear(1.0), linear(2.0), Fs, mc)
    # the lighter-tailed pair resolves the reversed gap at every site
    bad = compare_scenario_rho(sys, linear(0.5), linear(1.0), Fs, mc, enforce_order=False)
    assert all(v.status == STATUS_VIOLATION for v in bad)


def test_rho_scenario_gates_functionals():
    with pytest.raises(PreconditionError):
        compare_scenario_rho(ring(), linear(2.0), linear(1.0),
                             [CentralEven(1.0, 0, 1.0, 1)], MCParams(10, 0.01, 1), mode="multi")


def test_rho_order_checks():
    g = np.linspace(0, 10, 101)
    check_rho_order(linear(2.0), linear(1.0), g)
    with pytest.raises(PreconditionError):
        check_rho_order(linear(1.0), linear(-0.5), g)


def test_gamma_scenario_identical_and_bump():
    sys = ring(5, rho=linear(1.0))
    g2 = {0: 1.0, 1: 0.3, -1: 0.3}
    g1 = {0: 1.0, 1: 0.5, -1: 0.5}
    Fs = [Moment([(1.0, 0, 2)]), Moment([(1.0, 2, 2)])]
    mc = MCParams(20000, 0.01, 6)
    same = compare_scenario_gamma(sys, g2, g2, Fs, mc)
    assert all(v.status == STATUS_CONSISTENT and abs(v.z_score) < 4 for v in same)
    vs = compare_scenario_gamma(sys, g1, g2, Fs, mc)
    assert all(v.status == STATUS_CONSISTENT for v in vs)
    with pytest.raises(PreconditionError):
        compare_scenario_gamma(sys, g2, g1, Fs, mc)


def test_gamma_scenario_uses_independent_paths():
    assert INDEPENDENT_PATH_OFFSET >= 2**32


def test_gamma_scenario_she_mode_riesz():
    f1 = Riesz(0.5, 1)
    f2 = Riesz(0.5, 1).scaled(0.6)
    mu = InitialDatum.lebesgue()
    s1 = assemble_system(f1, 0.1, 0.2, None, "yosida", linear(1.0), mu)
    s2 = assemble_system(f2, 0.1, 0.2, None, "yosida", linear(1.0), mu)
    mid = s1.sites[len(s1.sites) // 2]
    Fs = [Moment([(0.2, mid, 2)]), Laplace([(0.2, mid, 1.0)])]
    vs = compare_scenario_gamma(s1, s1.gamma, s2.gamma, Fs, MCParams(4000, 0.01, 7))
    assert all(v.status == STATUS_CONSISTENT for v in vs)


def test_check_gamma_order():
    a = np.eye(2) + 0.5 * (1 - np.eye(2))
    check_gamma_order(a, np.eye(2))
    with pytest.raises(PreconditionError):
        check_gamma_order(np.eye(2), a)
    with pytest.raises(PreconditionError):
        check_gamma_order(np.array([[1.0, 2.0], [2.0, 1.0]]), np.eye(2) * 0.5)


def test_slepian_identical_and_direction():
    sys = ring(3, rho=linear(1.0))
    g = np.eye(3)
    mc = MCParams(20000, 0.01, 8, T=1.0)
    same = slepian(sys, g, g, [0, 1, 2], 1.2, mc)
    assert same.status == STATUS_CONSISTENT and abs(same.z_score) < 4
    full = np.ones((3, 3))
    v = slepian(sys, full, g, [0, 1, 2], 1.2, mc)
    assert v.status == STATUS_CONSISTENT and v.est1 > v.est2
    with pytest.raises(PreconditionError):
        slepian(sys, 2 * full, g, [0, 1], 1.0, mc)


# ---------------------------------------------------------------- positivity

def test_positivity_zero_noise_has_no_negatives():
    sys = ring(3, rho=linear(0.0), u0=[1.0, 0.0, 2.0])
    rep = positivity_report(sys, 1.0, 0.01, 100, 1, halvings=1)
    assert all(lv.fraction == 0 and lv.expected_fraction == 0 for lv in rep.levels)


def test_positivity_pam_decreases():
    sys = ring(3, rho=linear(2.5))
    rep = positivity_report(sys, 1.0, 0.01, 2000, 3, halvings=2)
    assert rep.default_fraction < 1e-3
    assert rep.decreasing


def test_positivity_zero_site_stays_nearly_nonnegative():
    sys = ring(3, rho=linear(1.0), u0=[1.0, 0.0, 1.0])
    mins = []
    for dt in (0.02, 0.01, 0.005):
        rep = positivity_report(sys, 1.0, dt, 2000, 4, halvings=0)
        mins.append(rep.levels[0].min_value)
    assert all(m >= -1e-2 for m in mins)


def test_positivity_preconditions():
    with pytest.raises(PreconditionError):
        positivity_report(ring(rho=constant(1.0)), 1.0, 0.01, 10, 1)
    with pytest.raises(PreconditionError):
        positivity_report(ring(u0=[1.0, -0.1, 1.0]), 1.0, 0.01, 10, 1)
