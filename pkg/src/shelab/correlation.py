"""Spatial correlation functions, spectral measures, Dalang's condition and
the moment-bound machinery :math:`k`, :math:`h_n`, :math:`H(t;\\gamma)`.

Fourier convention
------------------
:math:`\\hat f(\\xi) = \\int e^{-i\\xi\\cdot x} f(x)\\,dx`, and every spectral
integral carries the factor :math:`(2\\pi)^{-d}`, so that e.g.
:math:`k(t) = (2\\pi)^{-d}\\int \\hat f(\\xi) e^{-t|\\xi|^2/2} d\\xi`.  White noise
(``f = δ₀``) has :math:`\\hat f \\equiv 1`.

Catalog
-------
==============  ==========================================  =======================
kind            f                                            parameters
==============  ==========================================  =======================
``white``       δ₀                                           —
``riesz``       C/C_std · |x|^{-a}                           ``exponent`` a ∈ (0, d), ``constant``
``gaussian``    exp(-|x|²/s)                                 ``scale`` s
``cauchy``      1/(1 + s|x|²)                                ``scale`` s
``constant``    c                                            ``value`` c
``atoms``       Σ_m w_m δ_{m h}                              ``weights`` {offset: w}, ``spacing`` h
``mollifier``   w · (φ₂)_ε, φ₂ = φ*φ                         ``epsilon``, ``weight``
``tabulated``   linear interpolation on a tensor grid        ``axis``, ``values``
==============  ==========================================  =======================

The mollifier is :math:`\\phi(x) = 4^{-d}\\prod_i (2-|x_i|)_+`, and its
self-convolution is :math:`\\phi_2(x) = 16^{-d}\\prod_i\\theta(x_i)`, with the
piecewise cubic θ from :func:`theta` (θ integrates to 16).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special
from scipy.interpolate import RegularGridInterpolator

from .errors import DomainError, NumericalError, UnsupportedError
from .heatkernel import InitialDatum, heat_kernel, heat_kernel_1d, homogeneous_solution

KINDS = ("white", "riesz", "gaussian", "cauchy", "constant", "atoms", "mollifier", "tabulated")
_QUAD_OPTS = dict(epsabs=1e-13, epsrel=1e-11, limit=500)


def _quad(*args, **kwargs):
    """``scipy.integrate.quad`` without IntegrationWarning chatter; callers
    that need a guarantee inspect the returned error estimate."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(*args, **kwargs)


class InconclusiveError(NumericalError):
    """Quadrature failed and the tail behaviour does not settle convergence."""


# --------------------------------------------------------------------------
# mollifier
# --------------------------------------------------------------------------

def theta(x) -> np.ndarray:
    """Piecewise cubic (2-|·|)_+ * (2-|·|)_+, supported on [-4, 4], θ(0) = 16/3."""
    a = np.abs(np.asarray(x, dtype=float))
    inner = 0.5 * (a - 4.0) * a * a + 16.0 / 3.0
    outer = (4.0 - a) ** 3 / 6.0
    return np.where(a <= 2.0, inner, np.where(a <= 4.0, outer, 0.0))


def theta_prime(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    return np.where(a <= 2.0, 0.5 * x * (3 * a - 8), np.where(a <= 4.0, -0.5 * np.sign(x) * (4 - a) ** 2, 0.0))


def phi(x) -> np.ndarray:
    """Tent mollifier φ(x) = 4^{-d} Π (2 - |x_i|)_+ on points of shape (..., d)."""
    x = np.asarray(x, dtype=float)
    return np.prod(np.clip(2.0 - np.abs(x), 0.0, None), axis=-1) / 4.0 ** x.shape[-1]


def phi2(x) -> np.ndarray:
    """Self-convolution φ*φ = 16^{-d} Π θ(x_i) on points of shape (..., d)."""
    x = np.asarray(x, dtype=float)
    return np.prod(theta(x), axis=-1) / 16.0 ** x.shape[-1]


def phi2_scaled(x, epsilon: float) -> np.ndarray:
    """(φ₂)_ε(x) = ε^{-d} φ₂(x/ε)."""
    x = np.asarray(x, dtype=float)
    return phi2(x / epsilon) / epsilon ** x.shape[-1]


def _phi2_1d_smoothed(var: float, x: np.ndarray, eps: float) -> np.ndarray:
    """(G(var) * (θ_ε/16))(x) in one dimension, by piecewise quadrature."""
    out = np.empty(np.shape(x))
    brk = [-4 * eps, -2 * eps, 0.0, 2 * eps, 4 * eps]
    for n, xv in np.ndenumerate(np.asarray(x, dtype=float)):
        total = 0.0
        for lo, hi in zip(brk[:-1], brk[1:]):
            total += _quad(
                lambda y: theta(y / eps) / (16 * eps) * math.exp(-(xv - y) ** 2 / (2 * var)),
                lo, hi, **_QUAD_OPTS,
            )[0]
        out[n] = total / math.sqrt(2 * math.pi * var)
    return out


# --------------------------------------------------------------------------
# catalog
# --------------------------------------------------------------------------

def riesz_constant(d: int, a: float) -> float:
    """Standard constant with FT(|x|^{-a}) = c_{d,a} |ξ|^{a-d}."""
    return math.pi ** (d / 2) * 2.0 ** (d - a) * math.gamma((d - a) / 2) / math.gamma(a / 2)


def _riesz_moment(d: int, a: float) -> float:
    """E|Z|^{-a} for a standard normal Z in R^d."""
    return 2.0 ** (-a / 2) * math.gamma((d - a) / 2) / math.gamma(d / 2)


def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def _offsets_array(weights: dict, d: int) -> tuple[np.ndarray, np.ndarray]:
    keys = list(weights)
    offs = np.array([np.atleast_1d(k) for k in keys], dtype=float).reshape(len(keys), d)
    w = np.array([weights[k] for k in keys], dtype=float)
    return offs, w


@dataclass(frozen=True, eq=False)
class CorrelationFunction:
    """Catalogued spatial correlation function (see the module docstring)."""

    kind: str
    d: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown correlation kind {self.kind!r}")
        if self.d < 1:
            raise DomainError("dimension must be >= 1")
        p = self.params
        if self.kind == "riesz" and not (0 < p["exponent"] < self.d):
            raise DomainError("Riesz exponent must lie in (0, d)")
        if self.kind in ("gaussian", "cauchy") and not p["scale"] > 0:
            raise DomainError("scale must be positive")
        if self.kind == "constant" and p["value"] < 0:
            raise DomainError("constant correlation must be nonnegative")
        if self.kind == "atoms" and any(w < 0 for w in p["weights"].values()):
            raise DomainError("atom weights must be nonnegative")
        if self.kind == "mollifier" and not p["epsilon"] > 0:
            raise DomainError("epsilon must be positive")

    # ------------------------------------------------------------------ ids
    def describe(self) -> str:
        items = ", ".join(f"{k}={v}" for k, v in self.params.items() if k not in ("values",))
        return f"{self.kind}(d={self.d}{', ' if items else ''}{items})"

    @property
    def is_measure(self) -> bool:
        """True when f is a measure without a pointwise density (white, atoms)."""
        return self.kind in ("white", "atoms")

    def scaled(self, c: float) -> "CorrelationFunction":
        """Return c·f."""
        if c < 0:
            raise DomainError("scaling factor must be nonnegative")
        p = dict(self.params)
        k = self.kind
        if k == "white":
            return CorrelationFunction("atoms", self.d, {"weights": {(0,) * self.d: c}, "spacing": 1.0})
        if k == "constant":
            p["value"] = c * p["value"]
        elif k == "atoms":
            p["weights"] = {o: c * w for o, w in p["weights"].items()}
        elif k == "tabulated":
            p["values"] = c * np.asarray(p["values"])
        else:
            p["weight"] = c * p.get("weight", 1.0)
        return CorrelationFunction(k, self.d, p)

    @property
    def weight(self) -> float:
        return float(self.params.get("weight", 1.0))

    # ------------------------------------------------------------ evaluation
    def evaluate(self, x) -> np.ndarray:
        """Pointwise values at points of shape (..., d).

        For ``atoms`` this is the weight function on the lattice ``hℤᵈ``
        (zero off the lattice); white noise has no pointwise values.
        """
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        p = self.params
        r2 = np.sum(x * x, axis=-1)
        k = self.kind
        if k == "white":
            raise UnsupportedError("white noise has no pointwise values")
        if k == "riesz":
            a = p["exponent"]
            scale = p.get("constant", riesz_constant(self.d, a)) / riesz_constant(self.d, a)
            with np.errstate(divide="ignore"):
                return self.weight * scale * r2 ** (-a / 2)
        if k == "gaussian":
            return self.weight * np.exp(-r2 / p["scale"])
        if k == "cauchy":
            return self.weight / (1.0 + p["scale"] * r2)
        if k == "constant":
            return np.full(r2.shape, float(p["value"]))
        if k == "atoms":
            h = float(p.get("spacing", 1.0))
            offs, w = _offsets_array(p["weights"], self.d)
            q = x / h
            qi = np.rint(q)
            out = np.zeros(r2.shape)
            on = np.all(np.abs(q - qi) < 1e-9, axis=-1)
            for o, wv in zip(offs, w):
                out = out + np.where(on & np.all(qi == o, axis=-1), wv, 0.0)
            return out
        if k == "mollifier":
            return self.weight * phi2_scaled(x, p["epsilon"])
        if k == "tabulated":
            return self._table(x)
        raise UnsupportedError(k)  # pragma: no cover

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x)

    def _table(self, x: np.ndarray) -> np.ndarray:
        axis = np.asarray(self.params["axis"], dtype=float)
        vals = np.asarray(self.params["values"], dtype=float)
        if self.d == 1:
            return np.interp(x[..., 0], axis, vals, left=0.0, right=0.0)
        interp = RegularGridInterpolator((axis,) * self.d, vals, bounds_error=False, fill_value=0.0)
        return interp(x.reshape(-1, self.d)).reshape(x.shape[:-1])

    def gram(self, points) -> np.ndarray:
        """Gram matrix [f(x_i - x_j)] on points of shape (n, d)."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.d)
        return self.evaluate(pts[:, None, :] - pts[None, :, :])

    # ---------------------------------------------------------------- tails
    def sup_abs(self) -> float:
        """sup |f| (``inf`` if unbounded/singular)."""
        k, p = self.kind, self.params
        if k in ("white", "riesz", "atoms"):
            return math.inf
        if k in ("gaussian", "cauchy"):
            return self.weight
        if k == "constant":
            return float(p["value"])
        if k == "mollifier":
            return self.weight * (16.0 / 3.0 / 16.0 / p["epsilon"]) ** self.d
        return float(np.max(np.abs(p["values"])))

    def support_radius(self) -> float:
        """Half-width of a box containing the support of f."""
        k, p = self.kind, self.params
        if k == "white":
            return 0.0
        if k == "atoms":
            offs, _ = _offsets_array(p["weights"], self.d)
            return float(np.max(np.abs(offs)) * p.get("spacing", 1.0))
        if k == "mollifier":
            return 4.0 * p["epsilon"]
        if k == "tabulated":
            ax = np.asarray(p["axis"], dtype=float)
            return float(max(abs(ax[0]), abs(ax[-1])))
        return math.inf


def WhiteNoise(d: int = 1) -> CorrelationFunction:
    return CorrelationFunction("white", d)


def Riesz(exponent: float, d: int = 1, constant: float | None = None) -> CorrelationFunction:
    p = {"exponent": float(exponent)}
    if constant is not None:
        p["constant"] = float(constant)
    return CorrelationFunction("riesz", d, p)


def GaussianBump(scale: float, d: int = 1) -> CorrelationFunction:
    return CorrelationFunction("gaussian", d, {"scale": float(scale)})


def CauchyLike(scale: float, d: int = 1) -> CorrelationFunction:
    return CorrelationFunction("cauchy", d, {"scale": float(scale)})


def Constant(value: float, d: int = 1) -> CorrelationFunction:
    return CorrelationFunction("constant", d, {"value": float(value)})


def LatticeAtoms(weights: dict, d: int = 1, spacing: float = 1.0) -> CorrelationFunction:
    norm = {tuple(np.atleast_1d(k).astype(int).tolist()): float(v) for k, v in weights.items()}
    return CorrelationFunction("atoms", d, {"weights": norm, "spacing": float(spacing)})


def Mollifier(epsilon: float, d: int = 1, weight: float = 1.0) -> CorrelationFunction:
    """The mollified white noise w·(φ₂)_ε."""
    return CorrelationFunction("mollifier", d, {"epsilon": float(epsilon), "weight": float(weight)})


def Tabulated(axis, values, d: int = 1) -> CorrelationFunction:
    axis = np.asarray(axis, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (axis.size,) * d:
        raise DomainError("tabulated values must have shape (len(axis),)*d")
    if np.any(values < -1e-14):
        raise DomainError("tabulated correlation values must be nonnegative")
    values = np.clip(values, 0.0, None)
    values.setflags(write=False)
    return CorrelationFunction("tabulated", d, {"axis": axis, "values": values})


# --------------------------------------------------------------------------
# spectral measures
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    """Spectral measure of a catalogued correlation function.

    ``kind`` is ``"density"`` (with ``evaluate`` on frequencies of shape
    (..., d), and ``radial`` profile r ↦ f̂ when f̂ is radial) or ``"atomic"``
    (``atoms`` = list of (frequency, weight)).  ``tail_exponent`` q records a
    catalogued decay f̂(ξ) ~ |ξ|^{-q} (``inf`` for faster-than-polynomial
    decay).  ``convention`` documents the normalization.
    """

    kind: str
    d: int
    source: CorrelationFunction
    evaluator: Callable | None = None
    radial: Callable | None = None
    tail_exponent: float | None = None
    atoms: tuple = ()
    convention: str = "fhat(xi)=int exp(-i xi.x) f(x) dx; spectral integrals carry (2pi)^-d"

    def evaluate(self, xi) -> np.ndarray:
        if self.kind != "density":
            raise UnsupportedError("atomic spectral measures have no density")
        xi = np.asarray(xi, dtype=float)
        if self.d == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
            xi = xi[..., None]
        return self.evaluator(xi)


def spectral_of(f: CorrelationFunction) -> SpectralMeasure:
    """Spectral measure f̂ of ``f`` in the module's Fourier convention."""
    d, p, k = f.d, f.params, f.kind

    def radial_density(profile, q):
        return SpectralMeasure(
            "density", d, f,
            evaluator=lambda xi: profile(np.sqrt(np.sum(xi * xi, axis=-1))),
            radial=profile, tail_exponent=q,
        )

    if k == "white":
        return radial_density(lambda r: np.ones_like(np.asarray(r, dtype=float)), 0.0)
    if k == "riesz":
        a = p["exponent"]
        c = p.get("constant", riesz_constant(d, a)) * f.weight
        with np.errstate(divide="ignore"):
            return radial_density(lambda r: c * np.asarray(r, dtype=float) ** (a - d), d - a)
    if k == "gaussian":
        s, w = p["scale"], f.weight
        return radial_density(lambda r: w * (math.pi * s) ** (d / 2) * np.exp(-s * np.asarray(r) ** 2 / 4), math.inf)
    if k == "cauchy":
        if d != 1:
            raise UnsupportedError("Cauchy-like spectral density is catalogued for d=1 only")
        s, w = p["scale"], f.weight
        return radial_density(lambda r: w * math.pi / math.sqrt(s) * np.exp(-np.abs(r) / math.sqrt(s)), math.inf)
    if k == "constant":
        return SpectralMeasure("atomic", d, f, atoms=((np.zeros(d), p["value"] * (2 * math.pi) ** d),))
    if k == "atoms":
        h = p.get("spacing", 1.0)
        offs, w = _offsets_array(p["weights"], d)

        def trig(xi):
            phase = np.tensordot(xi, offs.T * h, axes=([-1], [0]))
            return np.cos(phase) @ w

        return SpectralMeasure("density", d, f, evaluator=trig, tail_exponent=0.0)
    if k == "mollifier":
        eps, w = p["epsilon"], f.weight

        def sinc4(xi):
            return w * np.prod(np.sinc(eps * xi / math.pi) ** 4, axis=-1)

        return SpectralMeasure("density", d, f, evaluator=sinc4, tail_exponent=4.0)
    raise UnsupportedError(f"no spectral transform catalogued for {k!r}")


# --------------------------------------------------------------------------
# Dalang's condition
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DalangResult:
    """``status`` is ``"finite"`` or ``"divergent"``."""

    status: str
    value: float
    diagnostic: str = ""

    @property
    def finite(self) -> bool:
        return self.status == "finite"


def _green(beta: float, r: np.ndarray, d: int) -> np.ndarray:
    """Kernel of (β - Δ)^{-1} on R^d for d ≤ 3 (infinite at r = 0 when d ≥ 2)."""
    sb = math.sqrt(beta)
    r = np.asarray(r, dtype=float)
    if d == 1:
        return np.exp(-sb * r) / (2 * sb)
    with np.errstate(divide="ignore"):
        if d == 2:
            return np.where(r > 0, special.k0(sb * np.maximum(r, 1e-300)) / (2 * math.pi), np.inf)
        if d == 3:
            return np.where(r > 0, np.exp(-sb * r) / (4 * math.pi * np.maximum(r, 1e-300)), np.inf)
    raise UnsupportedError("resolvent kernel implemented for d <= 3")


def _radial_spectral_integral(profile, weight_fn, d: int) -> float:
    """(2π)^{-d} |S^{d-1}| ∫_0^∞ r^{d-1} f̂(r) w(r) dr by adaptive quadrature."""
    g = lambda r: r ** (d - 1) * float(profile(r)) * weight_fn(r)
    pieces = []
    for lo, hi in ((0.0, 1.0), (1.0, 10.0), (10.0, math.inf)):
        val, err = _quad(g, lo, hi, **_QUAD_OPTS)
        if not math.isfinite(val) or err > 1e-6 * max(abs(val), 1e-12) + 1e-12:
            raise InconclusiveError(f"spectral quadrature on [{lo}, {hi}] failed (err {err:.3g})", residual=err)
        pieces.append(val)
    return _sphere_area(d) / (2 * math.pi) ** d * sum(pieces)


def _laplace_of_k(f: CorrelationFunction, weight: Callable[[float], float]) -> float:
    """∫_0^∞ weight(s) k(s) ds, for physical-route evaluation of spectral integrals."""
    g = lambda s: weight(s) * kernel_k(f, s)
    total = 0.0
    for lo, hi in ((0.0, 1.0), (1.0, math.inf)):
        val, err = _quad(g, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=300)
        if not math.isfinite(val) or err > 1e-6 * max(abs(val), 1e-12) + 1e-12:
            raise InconclusiveError(f"physical-route quadrature failed (err {err:.3g})", residual=err)
        total += val
    return total


def dalang_upsilon(f: CorrelationFunction | SpectralMeasure, beta: float) -> DalangResult:
    """Evaluate :math:`\\Upsilon(\\beta) = (2\\pi)^{-d}\\int \\hat f(d\\xi)/(\\beta+|\\xi|^2)`.

    Divergence is decided from the catalogued tail exponent q of f̂ (the
    integral converges iff q + 2 > d); finite values come from adaptive
    quadrature, using the radial profile of f̂ where available, exact atom
    sums for atomic measures, and otherwise the physical-space identity
    :math:`\\Upsilon(\\beta) = \\tfrac12\\int_0^\\infty e^{-\\beta s/2} k(s) ds`.
    """
    if not beta > 0:
        raise DomainError("beta must be positive")
    f, fhat = _pair(f)
    d = f.d
    if fhat is not None and fhat.kind == "atomic":
        val = sum(w / (beta + float(np.dot(fr, fr))) for fr, w in fhat.atoms) / (2 * math.pi) ** d
        return DalangResult("finite", val, "atomic sum")
    q = fhat.tail_exponent if fhat is not None else None
    if q is not None and q + 2 <= d:
        return DalangResult("divergent", math.inf, f"spectral tail ~|xi|^-{q:g}: integrand ~ r^{d - 3 - q:g} not integrable in d={d}")
    if f.kind == "atoms":
        offs, w = _offsets_array(f.params["weights"], d)
        r = np.linalg.norm(offs * f.params.get("spacing", 1.0), axis=1)
        g = _green(beta, r, d)
        if np.any(np.isinf(g) & (w > 0)):
            return DalangResult("divergent", math.inf, f"atom at the origin in d={d}")
        return DalangResult("finite", float(np.sum(w * np.where(w > 0, g, 0.0))), "resolvent sum over atoms")
    if fhat is not None and fhat.radial is not None:
        val = _radial_spectral_integral(fhat.radial, lambda r: 1.0 / (beta + r * r), d)
        return DalangResult("finite", val, "radial spectral quadrature")
    # physical route: 1/(β+|ξ|²) = ∫_0^∞ e^{-βs}e^{-s|ξ|²} ds, and (2π)^{-d}∫f̂ e^{-s|ξ|²} = k(2s)
    val = 0.5 * _laplace_of_k(f, lambda s: math.exp(-beta * s / 2))
    return DalangResult("finite", val, "physical-route quadrature")


def strengthened_dalang(f: CorrelationFunction | SpectralMeasure, alpha: float) -> DalangResult:
    """Evaluate :math:`(2\\pi)^{-d}\\int \\hat f(d\\xi)\\,(1+|\\xi|^2)^{\\alpha-1}`.

    Converges iff q + 2(1-α) > d for a tail exponent q.
    """
    if not (0 < alpha <= 1):
        raise DomainError("alpha must lie in (0, 1]")
    f, fhat = _pair(f)
    d = f.d
    e = 1.0 - alpha
    if fhat is not None and fhat.kind == "atomic":
        val = sum(w * (1 + float(np.dot(fr, fr))) ** (-e) for fr, w in fhat.atoms) / (2 * math.pi) ** d
        return DalangResult("finite", val, "atomic sum")
    q = fhat.tail_exponent if fhat is not None else None
    if q is not None and q + 2 * e <= d:
        return DalangResult("divergent", math.inf, f"spectral tail ~|xi|^-{q:g} against (1+|xi|^2)^-{e:g} in d={d}")
    if fhat is not None and fhat.radial is not None:
        val = _radial_spectral_integral(fhat.radial, lambda r: (1.0 + r * r) ** (-e), d)
        return DalangResult("finite", val, "radial spectral quadrature")
    if alpha == 1.0:
        # (2π)^{-d} ∫ f̂ = f(0) for continuous f
        if f.is_measure:
            raise InconclusiveError("f has no value at the origin")
        return DalangResult("finite", float(f.evaluate(np.zeros(d))), "f(0)")
    # (1+r²)^{-e} = Γ(e)^{-1} ∫ s^{e-1} e^{-s} e^{-s r²} ds
    g = lambda s: s ** (e - 1) * math.exp(-s) * kernel_k(f, 2 * s)
    val = sum(_quad(g, lo, hi, limit=300)[0] for lo, hi in ((0, 1), (1, math.inf))) / math.gamma(e)
    return DalangResult("finite", val, "physical-route quadrature")


def _pair(f) -> tuple[CorrelationFunction, SpectralMeasure | None]:
    if isinstance(f, SpectralMeasure):
        return f.source, f
    try:
        return f, spectral_of(f)
    except UnsupportedError:
        return f, None


# --------------------------------------------------------------------------
# k(t), h_n, H
# --------------------------------------------------------------------------

def _kernel_k_physical(f: CorrelationFunction, t: float) -> float:
    d, p, k = f.d, f.params, f.kind
    if k == "white":
        return (2 * math.pi * t) ** (-d / 2)
    if k == "constant":
        return float(p["value"])
    if k == "gaussian":
        return f.weight * (1 + 2 * t / p["scale"]) ** (-d / 2)
    if k == "riesz":
        a = p["exponent"]
        scale = p.get("constant", riesz_constant(d, a)) / riesz_constant(d, a)
        return f.weight * scale * t ** (-a / 2) * _riesz_moment(d, a)
    if k == "atoms":
        offs, w = _offsets_array(p["weights"], d)
        return float(np.sum(w * heat_kernel(t, offs * p.get("spacing", 1.0), d=d)))
    if k == "mollifier":
        eps = p["epsilon"]
        one = _phi2_1d_smoothed(t, np.array([0.0]), eps)[0]
        return f.weight * one**d
    if k == "cauchy":
        s = p["scale"]
        g = lambda r: r ** (d - 1) / (1 + s * r * r) * math.exp(-r * r / (2 * t))
        val = _quad(g, 0, math.inf, **_QUAD_OPTS)[0]
        return f.weight * _sphere_area(d) * (2 * math.pi * t) ** (-d / 2) * val
    if k == "tabulated":
        return float(smoothed_value(f, t, np.zeros(d)))
    raise UnsupportedError(k)  # pragma: no cover


def _kernel_k_spectral(f: CorrelationFunction, t: float) -> float:
    fhat = spectral_of(f)
    d = f.d
    if fhat.kind == "atomic":
        return sum(w * math.exp(-t * float(np.dot(fr, fr)) / 2) for fr, w in fhat.atoms) / (2 * math.pi) ** d
    if fhat.radial is not None:
        return _radial_spectral_integral(fhat.radial, lambda r: math.exp(-t * r * r / 2), d)
    if d == 1:
        g = lambda xi: float(fhat.evaluate(np.array([xi]))) * math.exp(-t * xi * xi / 2)
        lim = 40.0 / math.sqrt(t)
        val = _quad(g, 0.0, lim, limit=2000, epsabs=1e-13, epsrel=1e-11)[0]
        return 2 * val / (2 * math.pi)
    raise UnsupportedError("spectral route needs a radial profile or d=1")


def kernel_k(f: CorrelationFunction, t: float, route: str = "auto") -> float:
    """:math:`k(t) = \\int f(z) G(t, z) dz`.

    ``route`` is ``"physical"`` (closed forms / physical quadrature),
    ``"spectral"`` (:math:`(2\\pi)^{-d}\\int\\hat f e^{-t|\\xi|^2/2}`) or ``"auto"``
    (physical).
    """
    if not t > 0:
        raise DomainError("k(t) needs t > 0")
    if route in ("auto", "physical"):
        val = _kernel_k_physical(f, t)
    elif route == "spectral":
        val = _kernel_k_spectral(f, t)
    else:
        raise DomainError(f"unknown route {route!r}")
    if not math.isfinite(val):
        raise NumericalError(f"k({t}) is not finite", residual=math.inf)
    return float(val)


def _k_primitives(f: CorrelationFunction):
    """Closed-form K1(v) = ∫_0^v k, K2(v) = ∫_0^v s k(s) ds when catalogued."""
    d, p = f.d, f.params
    if f.kind == "white" and d == 1:
        c = 1 / math.sqrt(2 * math.pi)
        return (lambda v: c * 2 * np.sqrt(v)), (lambda v: c * (2 / 3) * v**1.5)
    if f.kind == "constant":
        c = float(p["value"])
        return (lambda v: c * v), (lambda v: c * v * v / 2)
    if f.kind == "riesz" and p["exponent"] < 2:
        a = p["exponent"]
        c = kernel_k(f, 1.0)
        e = 1 - a / 2
        return (lambda v: c * v**e / e), (lambda v: c * v ** (e + 1) / (e + 1))
    if f.kind == "white" and d >= 2:
        raise NumericalError("k(s) = (2πs)^{-d/2} is not integrable at 0 for d >= 2", residual=math.inf)
    return None


def _panel_moments(f: CorrelationFunction, t: float, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """A_j = ∫ k, B_j = ∫ v k(v) dv over panels [jΔ, (j+1)Δ]."""
    nodes = np.linspace(0.0, t, steps + 1)
    prim = _k_primitives(f)
    if prim is not None:
        K1, K2 = prim
        k1, k2 = K1(nodes), K2(nodes)
        return np.diff(k1), np.diff(k2)
    A = np.empty(steps)
    B = np.empty(steps)
    for j in range(steps):
        lo, hi = nodes[j], nodes[j + 1]
        A[j], ea = _quad(lambda v: kernel_k(f, v), lo, hi, limit=200)
        B[j] = _quad(lambda v: v * kernel_k(f, v), lo, hi, limit=200)[0]
        if not math.isfinite(A[j]):
            raise NumericalError(f"k is not integrable on [{lo}, {hi}]", residual=ea)
    return A, B


class _HRecursion:
    """Product-integration engine for h_n on a uniform grid over [0, t].

    h_{n-1} is interpolated linearly between nodes and integrated exactly
    against k on each panel (so integrable singularities of k at 0 are
    handled exactly by the panel moments).
    """

    def __init__(self, f: CorrelationFunction, t: float, steps: int):
        if steps < 16:
            raise DomainError("h_sequence needs at least 16 steps")
        if not t > 0:
            raise DomainError("t must be positive")
        self.t, self.steps = t, steps
        dt = t / steps
        A, B = _panel_moments(f, t, steps)
        j = np.arange(steps)
        self.w_hi = ((j + 1) * dt * A - B) / dt  # weight on h[i - j]
        self.w_lo = (B - j * dt * A) / dt  # weight on h[i - j - 1]

    def step(self, h: np.ndarray) -> np.ndarray:
        n = self.steps
        c_hi = np.convolve(h, self.w_hi)[: n + 1]
        c_hi[:n] -= self.w_hi * h[0]  # drop the j = i term (it lies outside [0, t_i])
        c_lo = np.convolve(h, self.w_lo)[:n]
        out = np.zeros(n + 1)
        out[1:] = c_hi[1:] + c_lo
        return out


def h_table(f: CorrelationFunction, n_max: int, t: float, steps: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Grid and table of h_0..h_{n_max} on the uniform grid over [0, t]."""
    rec = _HRecursion(f, t, steps)
    rows = [np.ones(steps + 1)]
    for _ in range(n_max):
        rows.append(rec.step(rows[-1]))
    return np.linspace(0, t, steps + 1), np.array(rows)


def h_sequence(f: CorrelationFunction, n_max: int, t: float, steps: int = 2048) -> np.ndarray:
    """:math:`h_0(t), \\dots, h_{n_{max}}(t)` with :math:`h_0 = 1` and
    :math:`h_n(t) = \\int_0^t h_{n-1}(s) k(t-s) ds`."""
    if n_max < 0:
        raise DomainError("n_max must be >= 0")
    return h_table(f, n_max, t, steps)[1][:, -1]


@dataclass
class HSeriesResult:
    value: float
    n_terms: int
    last_term: float
    growth_rate: float | None  # inf{β: Υ(2β) < 1/(2γ)}
    terms: np.ndarray

    def __float__(self) -> float:
        return self.value


def exponential_growth_rate(f: CorrelationFunction, gamma: float) -> float:
    """:math:`\\inf\\{\\beta>0 : \\Upsilon(2\\beta) < 1/(2\\gamma)\\}` (an upper bound on
    the exponential growth rate of H(t;γ))."""
    if gamma <= 0:
        return 0.0
    target = 1.0 / (2 * gamma)
    ups = lambda b: dalang_upsilon(f, 2 * b).value
    lo, hi = 1e-12, 1.0
    if ups(lo) < target:
        return 0.0
    while ups(hi) >= target:
        hi *= 4.0
        if hi > 1e12:
            raise NumericalError("growth-rate bracket search failed")
    return float(optimize.brentq(lambda b: ups(b) - target, lo, hi, xtol=1e-14, rtol=1e-12))


def h_series(f: CorrelationFunction, gamma: float, t: float, tol: float = 1e-12,
             steps: int = 2048, n_cap: int = 5000, with_rate: bool = True) -> HSeriesResult:
    """Partial sum of :math:`H(t;\\gamma) = \\sum_n \\gamma^n h_n(t)`, stopping once
    a term falls below ``tol`` times the running sum."""
    if gamma < 0:
        raise DomainError("gamma must be nonnegative")
    terms = [1.0]
    if gamma > 0:
        rec = _HRecursion(f, t, steps)
        h = np.ones(steps + 1)
        total = 1.0
        for n in range(1, n_cap + 1):
            h = gamma * rec.step(h)  # h now holds γⁿ hₙ (the recursion is linear)
            term = float(h[-1])
            terms.append(term)
            total += term
            if not math.isfinite(total):
                raise NumericalError("H(t; gamma) overflowed", residual=math.inf)
            if term < tol * total and n >= 2:
                break
        else:
            raise NumericalError(f"terms of H(t; gamma) not decaying after {n_cap} terms (last {terms[-1]:.3g})",
                                 residual=terms[-1])
    rate = None
    if with_rate:
        try:
            rate = exponential_growth_rate(f, gamma)
        except (NumericalError, UnsupportedError):
            rate = None
    arr = np.array(terms)
    return HSeriesResult(float(np.sum(arr)), len(terms), float(arr[-1]), rate, arr)


# --------------------------------------------------------------------------
# moment bound
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MomentBoundParams:
    """``lip_rho`` = Lipschitz constant of ρ, ``vip`` = |ρ(0)|/Lip_ρ,
    ``p`` ≥ 2 the moment order, ``alpha`` the optional strengthened exponent."""

    lip_rho: float
    vip: float = 0.0
    p: int = 2
    alpha: float | None = None

    def __post_init__(self):
        if self.p < 2:
            raise DomainError("p must be >= 2")
        if self.lip_rho < 0 or self.vip < 0:
            raise DomainError("lip_rho and vip must be nonnegative")
        if self.alpha is not None and not (0 < self.alpha <= 1):
            raise DomainError("alpha must lie in (0, 1]")

    @property
    def gamma_p(self) -> float:
        return 32.0 * self.p * self.lip_rho**2


@dataclass
class MomentBound:
    bound: float
    H: float
    J0: float
    gamma_p: float
    alpha_bound: float | None = None
    alpha_constant: float | None = None
    alpha_non_sharp: bool = True

    def __float__(self) -> float:
        return self.bound


def moment_upper_bound(params: MomentBoundParams, f: CorrelationFunction, mu: InitialDatum, t: float, x,
                       alpha_constant: float = 1.0, steps: int = 2048) -> MomentBound:
    """Upper bound on :math:`\\|u(t,x)\\|_p`:
    :math:`[\\varrho + \\sqrt2 J_0(t,x)]\\, H(t;\\gamma_p)^{1/2}`, with
    :math:`\\gamma_p = 32 p\\,\\mathrm{Lip}_\\rho^2`.

    When ``params.alpha`` is set the exponential-form bound
    :math:`C[\\varrho + J_0]\\exp(C\\,\\mathrm{Lip}^{2/\\alpha} p^{1/\\alpha} t)` is also
    returned, with the (non-explicit) constant ``alpha_constant``.
    """
    J0 = homogeneous_solution(mu, t, x)
    g = params.gamma_p
    H = 1.0 if g == 0 else h_series(f, g, t, steps=steps, with_rate=False).value
    bound = (params.vip + math.sqrt(2) * J0) * math.sqrt(H)
    out = MomentBound(bound, H, J0, g)
    if params.alpha is not None:
        res = strengthened_dalang(f, params.alpha)
        if not res.finite:
            raise DomainError("strengthened Dalang condition fails for this alpha")
        a, C = params.alpha, alpha_constant
        out.alpha_bound = C * (params.vip + J0) * math.exp(C * params.lip_rho ** (2 / a) * params.p ** (1 / a) * t)
        out.alpha_constant = C
    return out


# --------------------------------------------------------------------------
# smoothing and mollification
# --------------------------------------------------------------------------

def smoothed_value(f: CorrelationFunction, var: float, x) -> np.ndarray:
    """:math:`(G(\\text{var}) * f)(x)` at points of shape (..., d).

    Closed forms for white, constant, Gaussian, atoms and Riesz (via Kummer's
    function); quadrature otherwise.
    """
    if not var > 0:
        raise DomainError("variance must be positive")
    d, p, k = f.d, f.params, f.kind
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if k == "white":
        return heat_kernel(var, x, d=d) * np.ones(x.shape[:-1])
    if k == "constant":
        return np.full(x.shape[:-1], float(p["value"]))
    if k == "gaussian":
        s = p["scale"]
        return f.weight * (math.pi * s) ** (d / 2) * heat_kernel(var + s / 2, x, d=d) * np.ones(x.shape[:-1])
    if k == "atoms":
        offs, w = _offsets_array(p["weights"], d)
        diff = x[..., None, :] - offs * p.get("spacing", 1.0)
        return np.sum(w * heat_kernel(var, diff, d=d), axis=-1)
    if k == "riesz":
        a = p["exponent"]
        scale = f.weight * p.get("constant", riesz_constant(d, a)) / riesz_constant(d, a)
        r2 = np.sum(x * x, axis=-1)
        return scale * var ** (-a / 2) * _riesz_moment(d, a) * special.hyp1f1(a / 2, d / 2, -r2 / (2 * var))
    if k == "mollifier":
        eps = p["epsilon"]
        vals = np.ones(x.shape[:-1])
        for i in range(d):
            vals = vals * _phi2_1d_smoothed(var, x[..., i], eps)
        return f.weight * vals
    # quadrature: cauchy, tabulated
    flat = x.reshape(-1, d)
    out = np.empty(flat.shape[0])
    R = f.support_radius()
    for n, xp in enumerate(flat):
        if d == 1:
            lo, hi = (-R, R) if math.isfinite(R) else (-math.inf, math.inf)
            pts = None
            if math.isfinite(R):
                ax = np.asarray(p["axis"]) if k == "tabulated" else None
                brk = [xp[0]] if -R < xp[0] < R else []
                if ax is not None and ax.size < 60:
                    brk += list(ax[1:-1])
                pts = sorted(set(brk)) or None
                out[n] = _quad(lambda y: float(f.evaluate(np.array([y]))) * heat_kernel_1d(var, xp[0] - y),
                                        lo, hi, points=pts, limit=500, epsabs=1e-12, epsrel=1e-10)[0]
            else:
                out[n] = _quad(lambda y: float(f.evaluate(np.array([y]))) * heat_kernel_1d(var, xp[0] - y),
                                        lo, hi, limit=500, epsabs=1e-12, epsrel=1e-10)[0]
        else:
            half = min(R, 12 * math.sqrt(var) + float(np.max(np.abs(xp))))
            out[n] = integrate.nquad(lambda *y: float(f.evaluate(np.array(y))) * heat_kernel(var, xp - np.array(y), d=d),
                                     [(-half, half)] * d, opts={"epsabs": 1e-10, "epsrel": 1e-8})[0]
    return out.reshape(x.shape[:-1])


def _mollified_1d(f: CorrelationFunction, eps: float, xs: np.ndarray) -> np.ndarray:
    """((φ₂)_ε * f)(x) for a 1-d correlation f, at scalar points xs."""
    out = np.empty(xs.shape)
    brk = np.array([-4.0, -2.0, 0.0, 2.0, 4.0]) * eps
    for n, xv in np.ndenumerate(xs):
        # ∫ φ₂ε(y) f(x - y) dy, split at the mollifier knots and at y = x
        cuts = sorted(set(brk.tolist() + ([xv] if -4 * eps < xv < 4 * eps else [])))
        total = 0.0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            total += _quad(lambda y: float(phi2_scaled(np.array([y]), eps)) *
                                    float(f.evaluate(np.array([xv - y]))), lo, hi, limit=200,
                                    epsabs=1e-13, epsrel=1e-10)[0]
        out[n] = total
    return out


def mollify_correlation(f: CorrelationFunction, epsilon: float, grid) -> CorrelationFunction:
    """Tabulate :math:`f^{\\varepsilon,\\varepsilon} = (\\phi_2)_\\varepsilon * f` on a grid.

    ``grid`` is a uniform, symmetric 1-d axis; in d > 1 the table lives on the
    tensor product of the axis.  Atoms and white noise use exact finite sums
    of the mollifier, constants are preserved, separable Gaussians are
    mollified factor by factor, and the remaining 1-d densities by quadrature.

    Raises
    ------
    DomainError
        If the grid spacing exceeds ε/2 (the support of (φ₂)_ε has width 8ε),
        or the grid is not uniform and symmetric.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    axis = np.asarray(grid, dtype=float)
    if axis.ndim != 1 or axis.size < 3:
        raise DomainError("grid must be a 1-d axis with at least 3 points")
    dx = np.diff(axis)
    if not np.allclose(dx, dx[0], rtol=1e-9, atol=0) or not np.allclose(axis, -axis[::-1], atol=1e-12 * np.max(np.abs(axis))):
        raise DomainError("grid must be uniform and symmetric about 0")
    if dx[0] > epsilon / 2:
        raise DomainError(f"grid spacing {dx[0]:g} cannot resolve the mollifier support 8*eps = {8 * epsilon:g} "
                          f"(need spacing <= eps/2)")
    d, p, k = f.d, f.params, f.kind
    mesh = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1) if d > 1 else axis[:, None]
    if k == "white":
        vals = phi2_scaled(mesh, epsilon)
    elif k == "constant":
        vals = np.full(mesh.shape[:-1], float(p["value"]))
    elif k == "atoms":
        offs, w = _offsets_array(p["weights"], d)
        h = p.get("spacing", 1.0)
        vals = sum(wv * phi2_scaled(mesh - o * h, epsilon) for o, wv in zip(offs, w))
    elif k == "mollifier":
        # (φ₂)_ε * (φ₂)_η is not catalogued; tabulate by 1-d quadrature per factor
        if d != 1:
            raise UnsupportedError("mollifying a mollifier is supported in d=1 only")
        vals = _mollified_1d(f, epsilon, axis)
    elif k == "gaussian":
        one = _mollified_1d(GaussianBump(p["scale"], 1), epsilon, axis)
        grids = np.meshgrid(*([one] * d), indexing="ij") if d > 1 else [one]
        vals = f.weight * np.prod(np.stack(grids, axis=0), axis=0)
    elif d == 1:
        vals = _mollified_1d(f, epsilon, axis)
    else:
        raise UnsupportedError(f"mollification of {k!r} in d={d} is not supported")
    vals = np.asarray(vals, dtype=float).reshape((axis.size,) * d)
    flipped = np.flip(vals, axis=tuple(range(d)))
    asym = float(np.max(np.abs(vals - flipped)))
    if asym > 1e-9 * max(float(np.max(np.abs(vals))), 1e-300):
        raise NumericalError(f"mollified correlation is not symmetric (defect {asym:.3g})", residual=asym)
    vals = 0.5 * (vals + flipped)
    return Tabulated(axis, vals, d)
