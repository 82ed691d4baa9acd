"""Spatial discretization: the Gaussian transition kernel on the δ-lattice,
lattice-noise covariances, and assembly of interacting-diffusion systems.

On the δ-lattice the kernel

.. math:: P^{\\varepsilon,\\delta}_{ij} = \\prod_{k=1}^d
   \\big[\\Phi((j_k-i_k+\\tfrac12)\\delta/\\sqrt\\varepsilon) -
         \\Phi((j_k-i_k-\\tfrac12)\\delta/\\sqrt\\varepsilon)\\big]

is the heat-kernel mass of the δ-cube around ``jδ`` seen from ``iδ``.  Finite
systems live on the box ``{-B..B}ᵈ`` with periodic identification, which
keeps the truncated kernel row-stochastic *and* symmetric (Λ = 1); the
kernel is truncated at offsets ``|m_k| <= radius`` and renormalized.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .correlation import CorrelationFunction, _quad, smoothed_value, spectral_of
from .errors import DomainError, NumericalError
from .heatkernel import InitialDatum, homogeneous_solution
from .noise import CovarianceMatrix, assemble_covariance, psd_repair


class TruncationError(NumericalError):
    """Kernel truncation lost more mass than allowed; ``residual`` is the lost mass."""


def _cube_mass_1d(m, scale: float) -> np.ndarray:
    """Φ((m+½)s) - Φ((m-½)s), computed on the tail side for accuracy."""
    m = np.abs(np.asarray(m, dtype=float))
    a = (m - 0.5) * scale / math.sqrt(2)
    b = (m + 0.5) * scale / math.sqrt(2)
    return np.where(m == 0, special.erf(b), 0.5 * (special.erfc(a) - special.erfc(b)))


def transition_kernel(epsilon: float, delta: float, i, j, d: int | None = None) -> float:
    """:math:`P^{\\varepsilon,\\delta}_{ij}` for lattice sites ``i``, ``j`` (integer tuples)."""
    if not (epsilon > 0 and delta > 0):
        raise DomainError("epsilon and delta must be positive")
    i = np.atleast_1d(np.asarray(i, dtype=int))
    j = np.atleast_1d(np.asarray(j, dtype=int))
    if d is not None and (i.size != d or j.size != d):
        raise DomainError(f"sites must have {d} coordinates")
    return float(np.prod(_cube_mass_1d(j - i, delta / math.sqrt(epsilon))))


def box_sites(half_width: int, d: int) -> list[tuple]:
    """Sites of ``{-B..B}ᵈ`` in lexicographic order."""
    r = range(-half_width, half_width + 1)
    return [tuple(s) for s in itertools.product(r, repeat=d)]


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic matrix over ``indices`` with its truncation record."""

    indices: tuple
    entries: np.ndarray
    lost_mass: float = 0.0
    lam: float = 1.0

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.shape != (len(self.indices),) * 2:
            raise DomainError("transition matrix must be square over its indices")
        if np.any(e < 0):
            raise DomainError("transition probabilities must be nonnegative")
        if not np.allclose(e.sum(axis=1), 1.0, rtol=0, atol=1e-10):
            raise DomainError("rows of a transition matrix must sum to 1")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "lam", float(e.sum(axis=0).max()))

    @classmethod
    def from_array(cls, entries, indices=None) -> "TransitionMatrix":
        e = np.asarray(entries, dtype=float)
        idx = tuple((k,) for k in range(e.shape[0])) if indices is None else tuple(indices)
        return cls(idx, e)


def check_lambda(p, bound: float | None = None) -> float:
    """Λ = max_j Σ_i p_ij (largest column sum).

    Raises
    ------
    DomainError
        If ``bound`` is given and Λ exceeds it.
    """
    e = p.entries if isinstance(p, TransitionMatrix) else np.asarray(p, dtype=float)
    lam = float(np.max(e.sum(axis=0)))
    if bound is not None and lam > bound:
        raise DomainError(f"Lambda = {lam:g} exceeds the configured bound {bound:g}")
    return lam


def kernel_offsets(epsilon: float, delta: float, radius: int, d: int) -> tuple[list[tuple], np.ndarray, float]:
    """Offsets ``|m_k| <= radius``, their kernel masses, and the truncated mass."""
    m = np.arange(-radius, radius + 1)
    w1 = _cube_mass_1d(m, delta / math.sqrt(epsilon))
    offs = [tuple(o) for o in itertools.product(m.tolist(), repeat=d)]
    w = np.array([np.prod([w1[k + radius] for k in o]) for o in offs])
    lost = 1.0 - float(w1.sum()) ** d
    return offs, w, max(lost, 0.0)


def build_transition(epsilon: float, delta: float, radius: int, d: int = 1, box: int | None = None,
                     max_lost: float = 1e-8) -> TransitionMatrix:
    """Transition matrix over the periodic box ``{-B..B}ᵈ`` (``B = box`` or ``radius``).

    The kernel is truncated at ``|m_k| <= radius`` and renormalized (every
    row loses the same mass, so the result is symmetric with Λ = 1).

    Raises
    ------
    TruncationError
        If the truncated mass exceeds ``max_lost``.
    """
    if not (epsilon > 0 and delta > 0):
        raise DomainError("epsilon and delta must be positive")
    if radius < 0:
        raise DomainError("radius must be nonnegative")
    B = radius if box is None else int(box)
    if B < radius:
        raise DomainError("box half-width must be at least the kernel radius")
    offs, w, lost = kernel_offsets(epsilon, delta, radius, d)
    if lost > max_lost:
        raise TruncationError(f"kernel radius {radius} loses mass {lost:.3g} > {max_lost:g}", residual=lost)
    w = w / w.sum()
    sites = box_sites(B, d)
    n = len(sites)
    N = 2 * B + 1
    index = {s: k for k, s in enumerate(sites)}
    P = np.zeros((n, n))
    for a, s in enumerate(sites):
        for o, wv in zip(offs, w):
            t = tuple(((si + oi + B) % N) - B for si, oi in zip(s, o))
            P[a, index[t]] += wv
    return TransitionMatrix(tuple(sites), P, lost)


def discrete_generator(epsilon: float, delta: float, phi, x, radius: int | None = None) -> np.ndarray:
    """:math:`\\varepsilon^{-1}\\sum_m P^{\\varepsilon,\\delta}_{0m}(\\varphi(x+m\\delta)-\\varphi(x))` in d=1.

    This is the lattice drift acting on a smooth test function; it tends to
    ``φ''(x)/2`` as ``ε, δ → 0`` with ``δ² ≪ ε``.
    """
    if radius is None:
        radius = int(math.ceil(12 * math.sqrt(epsilon) / delta)) + 1
    m = np.arange(-radius, radius + 1)
    w = _cube_mass_1d(m, delta / math.sqrt(epsilon))
    x = np.asarray(x, dtype=float)
    vals = phi(x[..., None] + m * delta) - phi(x)[..., None]
    return (vals @ w) / epsilon


def lattice_covariance(f: CorrelationFunction, epsilon: float, delta: float, offsets) -> dict:
    """:math:`\\gamma^{\\varepsilon,\\delta}(m) = (G(2\\varepsilon) * f)(m\\delta)` for each offset.

    This is the covariance of the lattice noises obtained by testing the
    space-time noise against ``G(ε, iδ - ·)``.
    """
    if not (epsilon > 0 and delta > 0):
        raise DomainError("epsilon and delta must be positive")
    keys = [tuple(int(v) for v in np.atleast_1d(o)) for o in offsets]
    pts = np.array(keys, dtype=float).reshape(len(keys), f.d) * delta
    vals = smoothed_value(f, 2 * epsilon, pts)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("lattice covariance is not finite", residual=math.inf)
    return {k: float(v) for k, v in zip(keys, np.atleast_1d(vals))}


def lattice_covariance_spectral(f: CorrelationFunction, epsilon: float, delta: float, offset: int,
                                form: str = "corrected") -> float:
    """Fourier-side evaluation of the lattice covariance in d=1.

    ``form="corrected"``: (2π)⁻¹∫ exp(-ε|ξ|²) cos(mδξ) f̂(ξ) dξ, which equals
    :func:`lattice_covariance`.  ``form="printed"``: ∫ exp(-2ε|ξ|²) cos(mδξ)
    f̂(ξ) dξ without the (2π)⁻¹ factor, kept only to quantify that variant.
    """
    if f.d != 1:
        raise DomainError("spectral route implemented for d=1")
    fhat = spectral_of(f)
    md = float(offset) * delta
    if form == "corrected":
        a, pref = epsilon, 1.0 / (2 * math.pi)
    elif form == "printed":
        a, pref = 2 * epsilon, 1.0
    else:
        raise DomainError("form must be 'corrected' or 'printed'")
    if fhat.kind == "atomic":
        return pref * sum(w * math.exp(-a * float(fr @ fr)) * math.cos(md * float(fr[0])) for fr, w in fhat.atoms)
    lim = 40.0 / math.sqrt(a)
    g = lambda xi: float(fhat.evaluate(np.array([xi]))) * math.exp(-a * xi * xi) * math.cos(md * xi)
    val = _quad(g, 0.0, lim, limit=2000, epsabs=1e-13, epsrel=1e-11)[0]
    return pref * 2 * val


# --------------------------------------------------------------------------
# systems
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatticeSystem:
    """A finite interacting-diffusion system

    ``dU_i = κ Σ_j p_ij (U_j − U_i) dt + ρ(U_i) dM_i``,   ``E[M_i(t) M_j(s)] = (t∧s) Γ_ij``.

    ``active`` marks the sites that evolve; inactive sites stay at ``u0``.
    ``positions`` are physical coordinates (``iδ``) when the system comes
    from :func:`assemble_system`.
    """

    sites: tuple
    kappa: float
    p: np.ndarray
    gamma: np.ndarray
    rho: object
    u0: np.ndarray
    active: np.ndarray | None = None
    positions: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.sites)
        p = np.array(self.p.entries if isinstance(self.p, TransitionMatrix) else self.p, dtype=float)
        g = np.array(self.gamma.matrix if isinstance(self.gamma, CovarianceMatrix) else self.gamma, dtype=float)
        u0 = np.array(self.u0, dtype=float).reshape(-1)
        if p.shape != (n, n) or g.shape != (n, n) or u0.shape != (n,):
            raise DomainError("p, gamma and u0 must match the site list")
        if not self.kappa > 0:
            raise DomainError("kappa must be positive")
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-10, rtol=0):
            raise DomainError("p must be a probability transition matrix")
        if not np.allclose(g, g.T, atol=1e-12, rtol=0):
            raise DomainError("gamma must be symmetric")
        if np.linalg.eigvalsh(g).min() < -1e-8 * max(np.trace(g), 1e-300):
            raise DomainError("gamma must be positive semidefinite")
        if not np.all(np.isfinite(u0)):
            raise DomainError("u0 must be finite")
        act = np.ones(n, bool) if self.active is None else np.array(self.active, dtype=bool).reshape(n)
        for name, arr in (("p", p), ("gamma", g), ("u0", u0), ("active", act)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.positions is not None:
            pos = np.array(self.positions, dtype=float).reshape(n, -1)
            pos.setflags(write=False)
            object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "sites", tuple(tuple(int(v) for v in np.atleast_1d(s)) for s in self.sites))

    @property
    def n(self) -> int:
        return len(self.sites)

    def site_index(self, site) -> int:
        key = tuple(int(v) for v in np.atleast_1d(site))
        try:
            return self.sites.index(key)
        except ValueError:
            raise DomainError(f"site {key} is not part of the system") from None

    def with_(self, **changes) -> "LatticeSystem":
        """Copy with some fields replaced."""
        kw = dict(sites=self.sites, kappa=self.kappa, p=self.p, gamma=self.gamma, rho=self.rho,
                  u0=self.u0, active=self.active, positions=self.positions, meta=dict(self.meta))
        kw.update(changes)
        return LatticeSystem(**kw)

    # ------------------------------------------------------------ text form
    def to_text(self) -> str:
        """Structured text (JSON) with dense row-major matrices."""
        doc = {
            "format": "shelab-lattice-system/1",
            "sites": [list(s) for s in self.sites],
            "kappa": self.kappa,
            "p": self.p.tolist(),
            "gamma": self.gamma.tolist(),
            "rho": self.rho.to_dict(),
            "u0": self.u0.tolist(),
            "active": self.active.astype(int).tolist(),
            "positions": None if self.positions is None else self.positions.tolist(),
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, default=float)

    @classmethod
    def from_text(cls, text: str) -> "LatticeSystem":
        from .sde import DiffusionCoefficient

        doc = json.loads(text)
        if doc.get("format") != "shelab-lattice-system/1":
            raise DomainError("unrecognized lattice system format")
        return cls(
            sites=tuple(tuple(s) for s in doc["sites"]), kappa=doc["kappa"], p=np.array(doc["p"]),
            gamma=np.array(doc["gamma"]), rho=DiffusionCoefficient.from_dict(doc["rho"]), u0=np.array(doc["u0"]),
            active=np.array(doc["active"], bool), positions=None if doc["positions"] is None else np.array(doc["positions"]),
            meta=doc.get("meta", {}),
        )


def default_radius(epsilon: float, delta: float, max_lost: float = 1e-8) -> int:
    """Smallest kernel radius whose 1-d truncated mass is below ``max_lost / d``-safe level."""
    s = delta / math.sqrt(epsilon)
    r = 0
    while 2 * 0.5 * special.erfc((r + 0.5) * s / math.sqrt(2)) > max_lost / 3:
        r += 1
    return r


def assemble_system(f: CorrelationFunction, epsilon: float, delta: float, radius: int | None, kappa_mode,
                    rho, mu: InitialDatum, box: int | None = None, psd_tol: float = 1e-8) -> LatticeSystem:
    """Lattice approximation of the SPDE driven by noise with correlation ``f``.

    Parameters
    ----------
    radius : int or None
        Kernel truncation radius in lattice units (default: truncated mass below 1e-8).
    kappa_mode : "yosida" or float
        ``"yosida"`` gives κ = 1/ε; a number is used as κ directly.
    box : int, optional
        Half-width of the periodic site box (defaults to ``radius``).

    The initial data are ``u0(i) = J₀(ε, iδ)`` and the noise covariance is
    ``Γ_ij = γ^{ε,δ}(i − j)``, PSD-repaired.
    """
    if f.d != mu.d:
        raise DomainError("correlation and initial datum dimensions differ")
    d = f.d
    if radius is None:
        radius = default_radius(epsilon, delta)
    P = build_transition(epsilon, delta, radius, d, box=box)
    sites = P.indices
    B = max(abs(v) for s in sites for v in s)
    if kappa_mode == "yosida":
        kappa = 1.0 / epsilon
    else:
        kappa = float(kappa_mode)
        if not kappa > 0:
            raise DomainError("explicit kappa must be positive")
    offs = box_sites(2 * B, d)
    gam = lattice_covariance(f, epsilon, delta, offs)
    cov = psd_repair(assemble_covariance(gam, sites), tol=psd_tol)
    pos = np.array(sites, dtype=float) * delta
    u0 = np.array([homogeneous_solution(mu, epsilon, x) for x in pos])
    meta = {"epsilon": epsilon, "delta": delta, "radius": radius, "box": B, "correlation": f.describe(),
            "lost_mass": P.lost_mass, "repair": cov.repair_log}
    return LatticeSystem(sites, kappa, P, cov, rho, u0, positions=pos, meta=meta)


def simple_system(p, gamma, rho, u0, kappa: float = 1.0, sites=None) -> LatticeSystem:
    """System from explicit matrices (sites default to 0..n-1)."""
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    sites = tuple((k,) for k in range(n)) if sites is None else sites
    return LatticeSystem(sites, kappa, p, np.asarray(gamma, dtype=float), rho, np.asarray(u0, dtype=float))


def ring_transition(n: int, weights: dict) -> np.ndarray:
    """Symmetric circulant transition matrix on ``n`` sites from offset weights."""
    P = np.zeros((n, n))
    for o, w in weights.items():
        for i in range(n):
            P[i, (i + int(o)) % n] += w
    s = P.sum(axis=1, keepdims=True)
    return P / s


def ell2_mass(sys: LatticeSystem) -> float:
    """Σ u0(i)² on the site box."""
    return float(np.sum(sys.u0**2))
