"""Exact and semi-exact references.

* :func:`additive_law` – with ρ ≡ a the lattice system is linear with
  additive noise, hence Gaussian: mean ``e^{At}u0`` and covariance
  ``a² ∫_0^{t∧s} e^{A(t−r)} Γ e^{Aᵀ(s−r)} dr``.
* :func:`isserlis_moment` – mixed moments of a (non-centred) Gaussian vector by
  enumerating partial pairings.
* :func:`pam_second_moments` – for ρ(u) = λu, Itô's product rule gives
  ``d(U_iU_j) = U_i dU_j + U_j dU_i + λ² Γ_ij U_iU_j dt``, so
  ``m_ij = E[U_iU_j]`` solves the linear ODE ``m' = Am + mAᵀ + λ² Γ∘m``.
  Because this ODE is derived rather than quoted, each system is checked once
  against Monte Carlo before its moments are handed out.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg, special

from .errors import DomainError, NumericalError, UnsupportedError
from .lattice import LatticeSystem
from .sde import drift_matrix, simulate_ensemble

ISSERLIS_MAX_DEGREE = 8


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    """Joint Gaussian law of the values at ``points`` = [(t, site_index), ...]."""

    points: tuple
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        c = np.asarray(self.covariance, dtype=float)
        if c.shape != (m.size, m.size) or len(self.points) != m.size:
            raise DomainError("mean, covariance and points are inconsistent")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", 0.5 * (c + c.T))

    def marginal(self, idx) -> "GaussianLaw":
        idx = list(idx)
        return GaussianLaw(tuple(self.points[i] for i in idx), self.mean[idx], self.covariance[np.ix_(idx, idx)])


def _effective_gamma(sys: LatticeSystem) -> np.ndarray:
    act = sys.active.astype(float)
    return sys.gamma * np.outer(act, act)


def _lyapunov_integral(A: np.ndarray, G: np.ndarray, s: float, panels: int, order: int = 10) -> np.ndarray:
    """∫_0^s e^{Av} G e^{Aᵀv} dv by composite Gauss–Legendre."""
    if s == 0:
        return np.zeros_like(G)
    x, w = np.polynomial.legendre.leggauss(order)
    h = s / panels
    out = np.zeros_like(G)
    E_h = linalg.expm(A * h)
    E_nodes = [linalg.expm(A * (0.5 * h * (xi + 1))) for xi in x]
    E_left = np.eye(A.shape[0])
    for _ in range(panels):
        for xi, wi, En in zip(x, w, E_nodes):
            E = E_left @ En
            out += 0.5 * h * wi * (E @ G @ E.T)
        E_left = E_left @ E_h
    return 0.5 * (out + out.T)


def additive_law(sys: LatticeSystem, query, panels: int = 64, rtol: float = 1e-10) -> GaussianLaw:
    """Gaussian law of the additive-noise system (ρ ≡ a) at ``query`` points.

    ``query`` is a list of ``(t, site)`` with site an index or a site tuple.
    The covariance block for ``t ≥ s`` is ``e^{A(t−s)} Σ(s)`` with
    ``Σ(s) = a² ∫_0^s e^{Av} Γ e^{Aᵀv} dv``; each Σ is computed at two
    resolutions and must agree to ``rtol``.
    """
    rho = sys.rho
    if not rho.is_constant:
        raise DomainError("additive_law needs a constant diffusion coefficient")
    a = float(rho.params["a"])
    pts = []
    for t, s in query:
        if not t > 0:
            raise DomainError("query times must be positive")
        idx = s if isinstance(s, (int, np.integer)) else sys.site_index(s)
        pts.append((float(t), int(idx)))
    A = drift_matrix(sys)
    G = a * a * _effective_gamma(sys)
    times = sorted({t for t, _ in pts})
    sig = {}
    for t in times:
        fine = _lyapunov_integral(A, G, t, panels)
        coarse = _lyapunov_integral(A, G, t, panels // 2)
        err = np.max(np.abs(fine - coarse))
        if err > rtol * max(np.max(np.abs(fine)), 1e-300) and err > 1e-15:
            raise NumericalError(f"Lyapunov quadrature unresolved at t={t} (panel difference {err:.3g})", residual=err)
        sig[t] = fine
    means = {t: linalg.expm(A * t) @ sys.u0 for t in times}
    n = len(pts)
    mean = np.array([means[t][i] for t, i in pts])
    cov = np.empty((n, n))
    for p, (t, i) in enumerate(pts):
        for q, (s, j) in enumerate(pts):
            if t >= s:
                block = linalg.expm(A * (t - s)) @ sig[s]
                cov[p, q] = block[i, j]
            else:
                block = sig[t] @ linalg.expm(A * (s - t)).T
                cov[p, q] = block[i, j]
    return GaussianLaw(tuple(pts), mean, cov)


def additive_law_vanloan(sys: LatticeSystem, t: float) -> np.ndarray:
    """Σ(t) from Van Loan's block-exponential formula (independent check)."""
    a = float(sys.rho.params["a"])
    A = drift_matrix(sys)
    G = a * a * _effective_gamma(sys)
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A
    M[:n, n:] = G
    M[n:, n:] = A.T
    E = linalg.expm(M * t)
    F = E[n:, n:].T
    return F @ E[:n, n:]


def _pairing_sum(idx: list, mean: np.ndarray, cov: np.ndarray) -> float:
    if not idx:
        return 1.0
    a, rest = idx[0], idx[1:]
    total = mean[a] * _pairing_sum(rest, mean, cov) if mean[a] != 0 else 0.0
    for k, b in enumerate(rest):
        c = cov[a, b]
        if c != 0:
            total += c * _pairing_sum(rest[:k] + rest[k + 1:], mean, cov)
    return total


def isserlis_moment(law: GaussianLaw, multi_index) -> float:
    """E[∏_k X_k^{m_k}] by summing over partial pairings (pairs give
    covariances, unpaired factors give means)."""
    m = [int(v) for v in multi_index]
    if len(m) != law.mean.size or any(v < 0 for v in m):
        raise DomainError("multi-index must give a nonnegative exponent per query point")
    if sum(m) > ISSERLIS_MAX_DEGREE:
        raise UnsupportedError(f"total degree {sum(m)} exceeds the cap {ISSERLIS_MAX_DEGREE}")
    idx = [k for k, v in enumerate(m) for _ in range(v)]
    return float(_pairing_sum(idx, law.mean, law.covariance))


def box_probability(law: GaussianLaw, upper) -> float:
    """P(X_k <= a_k for all k) for a one- or two-dimensional Gaussian law.

    The two-dimensional integral of the density is reduced exactly to
    ``∫ φ(x) Φ((a₂ − m₂|x)/s₂|₁) dx`` over ``x <= a₁`` and evaluated by
    adaptive quadrature (absolute tolerance 1e-12).
    """
    a = np.asarray(upper, dtype=float).reshape(-1)
    m, C = law.mean, law.covariance
    if a.size != m.size or m.size not in (1, 2):
        raise DomainError("box_probability supports one or two coordinates")
    if m.size == 1:
        return float(special.ndtr((a[0] - m[0]) / math.sqrt(C[0, 0])))
    s1 = math.sqrt(C[0, 0])
    beta = C[0, 1] / C[0, 0]
    cvar = C[1, 1] - beta * C[0, 1]
    if cvar <= 1e-14 * C[1, 1]:
        # degenerate: X₂ is an affine function of X₁
        def inner(x):
            return float(m[1] + beta * (x - m[0]) <= a[1])
    else:
        sc = math.sqrt(cvar)

        def inner(x):
            return float(special.ndtr((a[1] - m[1] - beta * (x - m[0])) / sc))
    dens = lambda x: math.exp(-0.5 * ((x - m[0]) / s1) ** 2) / (s1 * math.sqrt(2 * math.pi))
    lo = m[0] - 40 * s1
    if a[0] <= lo:
        return 0.0
    val, err = integrate.quad(lambda x: dens(x) * inner(x), lo, a[0], epsabs=1e-12, epsrel=1e-10, limit=400,
                              points=[m[0]] if lo < m[0] < a[0] else None)
    if err > 1e-9:
        raise NumericalError(f"box probability quadrature unresolved (error {err:.3g})", residual=err)
    return float(val)


# --------------------------------------------------------------------------
# PAM second moments
# --------------------------------------------------------------------------

_VALIDATED: dict[str, "GateReport"] = {}


def _fingerprint(sys: LatticeSystem) -> str:
    h = hashlib.sha256()
    for arr in (sys.p, sys.gamma, sys.u0, sys.active.astype(np.int8)):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.float64(sys.kappa).tobytes())
    h.update(np.float64(sys.rho.params["lam"]).tobytes())
    return h.hexdigest()


def _pam_rhs(A: np.ndarray, G: np.ndarray, lam2: float):
    return lambda m: A @ m + m @ A.T + lam2 * G * m


def pam_second_moments_ode(sys: LatticeSystem, times, dt_ode: float = 1e-3) -> np.ndarray:
    """RK4 solution of ``m' = Am + mAᵀ + λ²Γ∘m`` from ``u0 u0ᵀ`` (no gate).

    Returns an array of shape (len(times), n, n).
    """
    if sys.rho.kind != "linear":
        raise DomainError("pam_second_moments needs rho(u) = lam*u")
    lam = sys.rho.params["lam"]
    A = drift_matrix(sys)
    G = _effective_gamma(sys)
    rhs = _pam_rhs(A, G, lam * lam)
    # spectral radius bound of the linear map m ↦ rhs(m)
    bound = 2 * np.max(np.sum(np.abs(A), axis=1)) + lam * lam * np.max(np.abs(G))
    if bound * dt_ode > 2.5:
        raise NumericalError(f"dt_ode = {dt_ode:g} is unstable for RK4 (|L| dt ~ {bound * dt_ode:.3g})",
                             residual=bound * dt_ode)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise DomainError("times must be nonnegative")
    order = np.argsort(times)
    out = np.empty((times.size, sys.n, sys.n))
    m = np.outer(sys.u0, sys.u0)
    t = 0.0
    for k in order:
        target = times[k]
        steps = int(math.ceil((target - t) / dt_ode - 1e-12))
        if steps > 0:
            h = (target - t) / steps
            for _ in range(steps):
                k1 = rhs(m)
                k2 = rhs(m + 0.5 * h * k1)
                k3 = rhs(m + 0.5 * h * k2)
                k4 = rhs(m + h * k3)
                m = m + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = target
        out[k] = 0.5 * (m + m.T)
    return out


@dataclass
class GateReport:
    passed: bool
    max_abs_z: float
    t: float
    n_paths: int
    dt: float


def validate_pam_ode(sys: LatticeSystem, t: float = 0.5, n_paths: int = 20000, seed: int = 20240607,
                     z_max: float = 5.0, dt: float | None = None) -> GateReport:
    """Monte Carlo check of the second-moment ODE for ``sys`` at time ``t``:
    every E[U_iU_j] must agree with the ODE within ``z_max`` standard errors."""
    if dt is None:
        n = max(100, int(math.ceil(t / min(0.1 / sys.kappa, 0.002))))
        dt = t / n
    ens = simulate_ensemble(sys, t, dt, seed, n_paths, record_times=[t])
    U = ens.values[:, 0, :]
    prod = U[:, :, None] * U[:, None, :]
    est = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n_paths)
    ode = pam_second_moments_ode(sys, [t])[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (est - ode) / se, np.where(np.abs(est - ode) < 1e-12, 0.0, np.inf))
    zmax = float(np.max(np.abs(z)))
    return GateReport(zmax <= z_max, zmax, t, n_paths, dt)


def pam_second_moments(sys: LatticeSystem, t, dt_ode: float = 1e-3, gate: bool = True) -> np.ndarray:
    """``m_ij(t) = E[U(t,i)U(t,j)]`` for the linear (PAM) system.

    On first use for a given system (fingerprint of p, Γ, κ, λ, u0, active
    set) the ODE is validated against Monte Carlo; a failed validation raises
    :class:`NumericalError` and the system stays blocked.  ``t`` may be a
    scalar (returns n×n) or a sequence (returns len(t)×n×n).
    """
    if sys.rho.kind != "linear":
        raise DomainError("pam_second_moments needs rho(u) = lam*u")
    if gate:
        fp = _fingerprint(sys)
        rep = _VALIDATED.get(fp)
        if rep is None:
            rep = validate_pam_ode(sys)
            _VALIDATED[fp] = rep
        if not rep.passed:
            raise NumericalError(f"PAM moment ODE failed its Monte Carlo gate (max |z| = {rep.max_abs_z:.2f})",
                                 residual=rep.max_abs_z)
    scalar = np.ndim(t) == 0
    out = pam_second_moments_ode(sys, [t] if scalar else t, dt_ode)
    return out[0] if scalar else out


def gate_status(sys: LatticeSystem) -> GateReport | None:
    """Cached gate report for ``sys`` (None if not yet validated)."""
    return _VALIDATED.get(_fingerprint(sys))
