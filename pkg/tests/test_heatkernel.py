import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from shelab.errors import DomainError
from shelab.heatkernel import (
    InitialDatum,
    check_rough_admissible,
    gaussian_tail_constant,
    heat_kernel,
    homogeneous_solution,
    tent_cutoff,
    truncate_initial,
)


def test_heat_kernel_examples():
    assert heat_kernel(1.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-14)
    assert heat_kernel(2.0, [0.0, 0.0]) == pytest.approx(1 / (4 * math.pi), rel=1e-14)
    # exp(-1/2)/sqrt(2 pi) to 7 digits
    assert heat_kernel(1.0, 1.0) == pytest.approx(0.2419707, abs=5e-8)


def test_heat_kernel_rejects_nonpositive_time():
    with pytest.raises(DomainError):
        heat_kernel(0.0, 0.0)
    with pytest.raises(DomainError):
        heat_kernel(-1.0, [1.0])


@pytest.mark.parametrize("t", [0.01, 0.3, 1.0, 7.0])
def test_heat_kernel_mass_one(t):
    r = 8 * math.sqrt(t)
    x = np.linspace(-r, r, 20001)
    mass = integrate.simpson(heat_kernel(t, x[:, None]), x=x)
    assert abs(mass - 1) < 1e-6


def test_heat_kernel_mass_one_2d():
    t = 0.5
    r = 8 * math.sqrt(t)
    x = np.linspace(-r, r, 801)
    X, Y = np.meshgrid(x, x, indexing="ij")
    vals = heat_kernel(t, np.stack([X, Y], axis=-1))
    mass = integrate.simpson(integrate.simpson(vals, x=x, axis=1), x=x)
    assert abs(mass - 1) < 1e-6


@given(t=st.floats(0.05, 2.0), s=st.floats(0.05, 2.0), x=st.floats(-2.0, 2.0))
@settings(max_examples=30, deadline=None)
def test_semigroup_property(t, s, x):
    y = np.linspace(-12, 12, 6001)
    conv = integrate.simpson(heat_kernel(t, (x - y)[:, None]) * heat_kernel(s, y[:, None]), x=y)
    assert conv == pytest.approx(heat_kernel(t + s, x), rel=1e-6, abs=1e-10)


def test_homogeneous_solution_examples():
    leb = InitialDatum.lebesgue()
    for t, x in [(0.1, 0.0), (3.0, 5.0)]:
        assert homogeneous_solution(leb, t, x) == pytest.approx(1.0)
    dirac = InitialDatum.dirac(1)
    assert homogeneous_solution(dirac, 0.7, 0.3) == pytest.approx(heat_kernel(0.7, 0.3), rel=1e-14)
    two = InitialDatum.point_masses([0.0, 1.0], [1.0, 1.0])
    assert homogeneous_solution(two, 1.0, 0.0) == pytest.approx(0.6409130, abs=5e-8)


def test_homogeneous_solution_density_quadrature():
    # indicator of [-1, 1]: J0(t, x) = Φ((1-x)/√t) - Φ((-1-x)/√t)
    from scipy.special import ndtr
    mu = InitialDatum.from_density("indicator", 1, value=1.0, radius=1.0)
    for t, x in [(0.2, 0.0), (1.0, 0.5), (0.5, 3.0)]:
        exact = ndtr((1 - x) / math.sqrt(t)) - ndtr((-1 - x) / math.sqrt(t))
        assert homogeneous_solution(mu, t, x) == pytest.approx(exact, abs=1e-9)


def test_homogeneous_solution_rejects_nonpositive_time():
    with pytest.raises(DomainError):
        homogeneous_solution(InitialDatum.lebesgue(), 0.0, 0.0)


@given(m1=st.lists(st.floats(0.0, 3.0), min_size=3, max_size=3),
       extra=st.lists(st.floats(0.0, 2.0), min_size=3, max_size=3),
       x=st.floats(-3, 3), t=st.floats(0.05, 3.0))
@settings(max_examples=50, deadline=None)
def test_homogeneous_solution_monotone_in_mu(m1, extra, x, t):
    locs = [-1.0, 0.2, 1.5]
    m1 = np.asarray(m1) + 0.01
    m2 = m1 + np.asarray(extra)
    j1 = homogeneous_solution(InitialDatum.point_masses(locs, m1), t, x)
    j2 = homogeneous_solution(InitialDatum.point_masses(locs, m2), t, x)
    assert j1 <= j2 + 1e-15


def test_tent_cutoff_shape():
    eps = 0.5
    r = np.array([0.0, 1.0, 1 / eps, 1 + 1 / eps, 5.0])
    vals = tent_cutoff(r[:, None], eps)
    assert vals[0] == 1.0 and vals[1] == 1.0
    assert np.all(np.diff(vals) <= 0)
    assert vals[-1] == 0.0


def test_truncate_initial_dirac():
    mu = truncate_initial(InitialDatum.dirac(1), 0.5)
    x = np.linspace(-3, 3, 13)
    assert np.allclose(mu.density_at(x[:, None]), heat_kernel(0.5, x[:, None]), rtol=1e-13)


def test_truncate_initial_lebesgue_at_origin():
    from scipy.special import ndtr
    mu = truncate_initial(InitialDatum.lebesgue(), 0.5)
    v = float(mu.density_at(np.array([[0.0]]))[0])
    lower = ndtr(2 / math.sqrt(0.5)) - ndtr(-2 / math.sqrt(0.5))
    assert lower <= v <= 1.0


@pytest.mark.parametrize("mu", [InitialDatum.lebesgue(), InitialDatum.dirac(1),
                                InitialDatum.point_masses([-0.5, 0.7], [2.0, 1.0])])
@pytest.mark.parametrize("eps", [0.2, 0.5])
def test_truncate_initial_gaussian_tails(mu, eps):
    trunc = truncate_initial(mu, eps)
    C = gaussian_tail_constant(mu, eps, 2 * eps)
    x = np.concatenate([np.linspace(-10 / eps, 10 / eps, 401), [10 / eps, -10 / eps]])
    vals = trunc.density_at(x[:, None])
    dom = C * heat_kernel(2 * eps, x[:, None])
    assert np.all(vals >= 0)
    assert np.all(vals <= dom * (1 + 1e-12) + 1e-300)


def test_truncate_initial_rejects_bad_epsilon():
    for eps in (0.0, 1.0, 1.5):
        with pytest.raises(DomainError):
            truncate_initial(InitialDatum.lebesgue(), eps)


def test_rough_admissibility():
    assert check_rough_admissible(InitialDatum.lebesgue(), [0.1, 1.0]).admissible
    assert check_rough_admissible(InitialDatum.point_masses([0, 3, 9], [1, 2, 3]), [0.01]).admissible
    grow = InitialDatum.from_density("exp_square", 1, rate=1.0)
    rep = check_rough_admissible(grow, [0.5, 1.0, 2.0])
    assert not rep.admissible
    assert rep.failing_a == [0.5, 1.0]
    assert rep.integrals[2.0] == pytest.approx(math.sqrt(math.pi))


def test_rough_admissibility_lebesgue_value():
    rep = check_rough_admissible(InitialDatum.lebesgue(d=2, value=3.0), [0.5])
    assert rep.integrals[0.5] == pytest.approx(3.0 * math.pi / 0.5)
