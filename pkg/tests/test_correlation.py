import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from shelab.correlation import (
    CauchyLike,
    Constant,
    GaussianBump,
    LatticeAtoms,
    MomentBoundParams,
    Mollifier,
    Riesz,
    WhiteNoise,
    dalang_upsilon,
    h_sequence,
    h_series,
    h_table,
    kernel_k,
    moment_upper_bound,
    mollify_correlation,
    phi2,
    smoothed_value,
    spectral_of,
    strengthened_dalang,
    theta,
)
from shelab.errors import DomainError, UnsupportedError
from shelab.heatkernel import InitialDatum


# ---------------------------------------------------------------- spectral

def test_white_noise_spectral_is_one():
    fhat = spectral_of(WhiteNoise(1))
    assert np.allclose(fhat.evaluate(np.linspace(-50, 50, 11)), 1.0)


def test_gaussian_spectral_closed_form_matches_fft():
    fhat = spectral_of(GaussianBump(1.0, 1))
    xi = np.linspace(-6, 6, 25)
    closed = math.sqrt(math.pi) * np.exp(-xi**2 / 4)
    assert np.allclose(fhat.evaluate(xi), closed, rtol=1e-13)
    # numerical Fourier transform on a fine grid
    L, n = 40.0, 2**14
    x = (np.arange(n) - n // 2) * (L / n)
    f = np.exp(-x**2)
    F = np.fft.fftshift(np.fft.fft(np.fft.ifftshift(f))) * (L / n)
    freq = np.fft.fftshift(np.fft.fftfreq(n, d=L / n)) * 2 * np.pi
    mask = np.abs(freq) < 6
    assert np.allclose(F.real[mask], math.sqrt(math.pi) * np.exp(-freq[mask] ** 2 / 4), atol=1e-12)


def test_scaled_unit_atom_has_constant_density():
    delta = 0.3
    fhat = spectral_of(LatticeAtoms({0: 1.0}).scaled(delta))
    assert np.allclose(fhat.evaluate(np.linspace(-20, 20, 9)), delta)


def test_tabulated_spectral_unsupported():
    tab = mollify_correlation(WhiteNoise(1), 0.5, np.linspace(-3, 3, 61))
    with pytest.raises(UnsupportedError):
        spectral_of(tab)


# ---------------------------------------------------------------- Dalang

@pytest.mark.parametrize("beta", [0.5, 1.0, 4.0])
def test_dalang_white_noise_closed_form(beta):
    res = dalang_upsilon(WhiteNoise(1), beta)
    assert res.finite
    assert res.value == pytest.approx(1 / (2 * math.sqrt(beta)), rel=1e-6)


def test_dalang_riesz_and_divergence():
    res = dalang_upsilon(Riesz(0.5, 1), 1.0)
    assert res.finite and res.value > 0
    assert not dalang_upsilon(WhiteNoise(2), 1.0).finite
    assert dalang_upsilon(Riesz(1.5, 2), 1.0).finite  # exponent < 2


def test_dalang_riesz_physical_route():
    # Υ(β) = ½∫ e^{-βs/2} k(s) ds, independent of the spectral normalization
    f = Riesz(0.5, 1)
    phys = 0.5 * integrate.quad(lambda s: math.exp(-s / 2) * kernel_k(f, s), 0, np.inf, limit=200)[0]
    assert dalang_upsilon(f, 1.0).value == pytest.approx(phys, rel=1e-6)


def test_dalang_rejects_nonpositive_beta():
    with pytest.raises(DomainError):
        dalang_upsilon(WhiteNoise(1), 0.0)


def test_strengthened_dalang_examples():
    assert not strengthened_dalang(WhiteNoise(1), 1.0).finite
    assert strengthened_dalang(GaussianBump(1.0, 1), 1.0).finite
    assert strengthened_dalang(Riesz(0.5, 1), 0.2).finite
    assert not strengthened_dalang(Riesz(0.5, 1), 0.9).finite


# ---------------------------------------------------------------- k(t)

def test_kernel_k_white_and_constant():
    for t in (0.1, 1.0, 3.0):
        assert kernel_k(WhiteNoise(1), t) == pytest.approx((2 * math.pi * t) ** -0.5, rel=1e-13)
        assert kernel_k(Constant(2.5), t) == pytest.approx(2.5)


@pytest.mark.parametrize("f", [GaussianBump(1.0, 1), GaussianBump(0.3, 2), CauchyLike(2.0, 1),
                               Riesz(0.5, 1), Riesz(1.2, 2), Mollifier(0.4, 1), WhiteNoise(1)])
@pytest.mark.parametrize("t", [0.2, 1.0])
def test_kernel_k_routes_agree(f, t):
    phys = kernel_k(f, t, route="physical")
    spec = kernel_k(f, t, route="spectral")
    assert phys == pytest.approx(spec, rel=1e-6)


def test_kernel_k_gaussian_closed_form():
    s, t = 0.7, 0.4
    assert kernel_k(GaussianBump(s, 1), t) == pytest.approx((1 + 2 * t / s) ** -0.5, rel=1e-10)


@pytest.mark.parametrize("eps", [0.1, 0.5])
def test_mollified_kernel_is_dominated(eps):
    f = WhiteNoise(1)
    fe = Mollifier(eps, 1)
    for t in np.geomspace(0.01, 5, 12):
        assert kernel_k(fe, t) <= kernel_k(f, t) * (1 + 1e-12)


# ---------------------------------------------------------------- h_n, H

def test_h_sequence_white_noise():
    for t in (0.25, 1.0, 4.0):
        h = h_sequence(WhiteNoise(1), 3, t)
        assert h[0] == 1.0
        assert h[1] == pytest.approx(math.sqrt(2 * t / math.pi), abs=1e-4)
    assert h_sequence(WhiteNoise(1), 1, 1.0)[1] == pytest.approx(0.7978846, abs=1e-6)


def test_h_sequence_constant_k():
    h = h_sequence(Constant(2.0), 5, 1.0)
    exact = [2.0**n / math.factorial(n) for n in range(6)]
    assert np.allclose(h, exact, atol=1e-4)


def test_h_sequence_needs_steps():
    with pytest.raises(DomainError):
        h_sequence(WhiteNoise(1), 2, 1.0, steps=8)


@pytest.mark.parametrize("f", [WhiteNoise(1), GaussianBump(1.0, 1), Riesz(0.5, 1), Constant(1.5)])
def test_h_nonnegative_and_nondecreasing(f):
    _, tab = h_table(f, 4, 2.0, steps=256)
    assert np.all(tab >= -1e-14)
    assert np.all(np.diff(tab, axis=1) >= -1e-12)


def test_h_series_examples():
    assert h_series(WhiteNoise(1), 0.0, 1.0).value == 1.0
    for g, c, t in [(0.5, 2.0, 1.0), (1.0, 1.0, 2.0)]:
        assert h_series(Constant(c), g, t, with_rate=False).value == pytest.approx(math.exp(g * c * t), abs=1e-4)


def test_h_series_white_noise_refinement():
    res = h_series(WhiteNoise(1), 1.0, 1.0)
    brute = np.sum(h_sequence(WhiteNoise(1), 63, 1.0, steps=4096))
    assert res.value == pytest.approx(brute, abs=1e-4)
    # exponential-rate estimate: Υ(2β) = 1/(2√(2β)) = 1/2  ⇒ β = 1/2
    assert res.growth_rate == pytest.approx(0.5, rel=1e-8)


# ---------------------------------------------------------------- moment bound

def test_moment_bound_trivial_cases():
    leb = InitialDatum.lebesgue()
    b = moment_upper_bound(MomentBoundParams(lip_rho=0.0, vip=0.7), WhiteNoise(1), leb, 0.5, 0.0)
    assert b.bound == pytest.approx(0.7 + math.sqrt(2))
    b = moment_upper_bound(MomentBoundParams(lip_rho=1.0, vip=0.0), WhiteNoise(1), leb, 0.1, 0.0)
    H = h_series(WhiteNoise(1), 64.0, 0.1, with_rate=False).value
    assert b.bound == pytest.approx(math.sqrt(2 * H))


def test_moment_bound_monotone_in_t_and_p():
    leb = InitialDatum.lebesgue()
    ts, ps = [0.01, 0.025, 0.05], [2, 3, 4]
    grid = np.array([[moment_upper_bound(MomentBoundParams(1.0, 0.0, p), WhiteNoise(1), leb, t, 0.0,
                                         steps=512).bound for t in ts] for p in ps])
    assert np.all(np.isfinite(grid))
    assert np.all(np.diff(grid, axis=0) > 0) and np.all(np.diff(grid, axis=1) > 0)


def test_moment_bound_alpha_branch():
    b = moment_upper_bound(MomentBoundParams(1.0, 0.0, 2, alpha=0.2), Riesz(0.5, 1),
                           InitialDatum.lebesgue(), 0.05, 0.0, steps=256)
    assert b.alpha_bound is not None and b.alpha_non_sharp and b.alpha_constant == 1.0
    with pytest.raises(DomainError):
        moment_upper_bound(MomentBoundParams(1.0, 0.0, 2, alpha=1.0), WhiteNoise(1),
                           InitialDatum.lebesgue(), 0.05, 0.0, steps=64)


def test_moment_bound_params_validation():
    with pytest.raises(DomainError):
        MomentBoundParams(1.0, 0.0, p=1)
    with pytest.raises(DomainError):
        MomentBoundParams(1.0, 0.0, p=2, alpha=1.5)
    assert MomentBoundParams(0.5, 0.0, p=3).gamma_p == pytest.approx(32 * 3 * 0.25)


# ---------------------------------------------------------------- mollifier

def test_theta_values():
    assert theta(0.0) == pytest.approx(16 / 3)
    assert theta(4.0) == pytest.approx(0.0, abs=1e-15)
    assert theta(-4.0) == pytest.approx(0.0, abs=1e-15)
    assert integrate.quad(lambda x: float(theta(x)), -4, 4, points=[-2, 0, 2])[0] == pytest.approx(16.0)


def test_phi2_is_a_probability_density_and_self_convolution():
    assert integrate.quad(lambda x: float(phi2(np.array([x]))), -4, 4, points=[-2, 0, 2])[0] == pytest.approx(1.0)
    # φ₂ = φ * φ with φ(x) = (2 - |x|)_+ / 4
    phi = lambda y: max(2 - abs(y), 0.0) / 4
    for x in (0.0, 0.7, 2.5):
        conv = integrate.quad(lambda y: phi(y) * phi(x - y), -2, 2, points=[x - 2, 0, x, x + 2][1:3])[0]
        assert float(phi2(np.array([x]))) == pytest.approx(conv, abs=1e-10)


def test_mollified_white_noise_at_origin():
    f11 = mollify_correlation(WhiteNoise(1), 1.0, np.linspace(-5, 5, 101))
    # φ₂(0) = θ(0)/16 with the probability-normalized mollifier
    assert float(f11.evaluate(np.array([0.0]))) == pytest.approx(1 / 3)


@pytest.mark.parametrize("f", [WhiteNoise(1), GaussianBump(0.5, 1), LatticeAtoms({0: 1.0, 1: 0.5, -1: 0.5}),
                               CauchyLike(1.0, 1)])
def test_mollified_properties(f):
    eps = 0.25
    axis = np.linspace(-3, 3, 241)
    fe = mollify_correlation(f, eps, axis)
    h = axis[1] - axis[0]
    vals = fe.evaluate(axis)
    assert np.allclose(vals, vals[::-1])
    mid = axis.size // 2
    deriv0 = (vals[mid + 1] - vals[mid - 1]) / (2 * h)
    assert abs(deriv0) < 1e-6
    second = np.diff(vals, 2) / h**2
    assert np.all(np.isfinite(second)) and np.max(np.abs(second)) < 1e3


def test_mollify_rejects_coarse_grid():
    with pytest.raises(DomainError):
        mollify_correlation(WhiteNoise(1), 0.1, np.linspace(-1, 1, 11))


def test_mollified_constant_is_unchanged():
    fe = mollify_correlation(Constant(2.0), 0.3, np.linspace(-2, 2, 41))
    assert np.allclose(fe.evaluate(np.linspace(-2, 2, 7)), 2.0)


# ---------------------------------------------------------------- catalog invariants

CATALOG = [GaussianBump(1.0, 1), CauchyLike(0.5, 1), Riesz(0.5, 1), Constant(1.0), GaussianBump(0.5, 2),
           Mollifier(0.3, 1), Riesz(1.0, 2)]


@pytest.mark.parametrize("f", CATALOG, ids=lambda f: f.describe())
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 64))
@settings(max_examples=15, deadline=None)
def test_gram_matrices_are_psd(f, seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, size=(n, f.d))
    if f.kind == "riesz":
        # distinct points only: the Riesz kernel is singular on the diagonal
        pts = pts + 1e-3 * np.arange(n)[:, None]
    G = smoothed_value(f, 0.05, pts[:, None, :] - pts[None, :, :]) if f.kind == "riesz" else f.gram(pts)
    G = 0.5 * (G + G.T)
    assert np.min(np.linalg.eigvalsh(G)) >= -1e-8 * np.trace(G)


@pytest.mark.parametrize("f", CATALOG, ids=lambda f: f.describe())
def test_correlations_are_symmetric_and_nonnegative(f):
    rng = np.random.default_rng(1)
    x = rng.uniform(-4, 4, size=(50, f.d)) + 1e-3
    a, b = f.evaluate(x), f.evaluate(-x)
    assert np.allclose(a, b) and np.all(a >= 0)


def test_smoothed_value_limits():
    # G(2ε) * f → f(0) at the origin for bounded continuous f
    f = GaussianBump(1.0, 1)
    vals = [float(smoothed_value(f, 2 * e, np.array([0.0]))) for e in (0.1, 0.01, 0.001)]
    assert abs(vals[-1] - 1) < abs(vals[0] - 1)
    assert vals[-1] == pytest.approx(1.0, abs=5e-3)
