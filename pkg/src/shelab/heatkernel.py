"""Heat kernel, homogeneous solutions for rough initial data, and the
initial-data regularization used by the lattice approximation.

The heat kernel is

.. math::  G(t, x) = (2\\pi t)^{-d/2} \\exp(-|x|^2 / 2t),

and the homogeneous solution of the heat equation started from a
nonnegative measure :math:`\\mu` is :math:`J_0(t,x) = (\\mu * G(t,\\cdot))(x)`.
Initial data are either finite sums of point masses or densities drawn
from a small catalog of analytic forms (plus a tabulated 1-d grid).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .errors import DomainError, NumericalError, UnsupportedError

#: largest spatial dimension accepted by default (quadrature cost grows fast)
MAX_DIM = 3
#: default absolute tolerance of the adaptive quadratures in this module
QUAD_ATOL = 1e-9

DENSITY_KINDS = ("constant", "gaussian", "indicator", "exp_square", "tabulated", "truncated")


def as_point(x, d: int | None = None) -> np.ndarray:
    """Return ``x`` as a float vector of length ``d`` (scalars allowed for d=1)."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise DomainError("a space point must be a flat sequence of coordinates")
    if d is not None and arr.size != d:
        raise DomainError(f"expected a point in dimension {d}, got {arr.size} coordinates")
    return arr


def _check_dim(d: int, max_dim: int | None = None) -> None:
    cap = MAX_DIM if max_dim is None else max_dim
    if not (1 <= d <= cap):
        raise DomainError(f"dimension must be in 1..{cap}, got {d}")


def heat_kernel(t: float, x, d: int | None = None) -> float | np.ndarray:
    """Evaluate the heat kernel :math:`G(t, x)`.

    Parameters
    ----------
    t : float
        Time, strictly positive.
    x : array_like
        A point (length-``d`` vector) or an array of points of shape ``(..., d)``.
        A scalar is a point in d=1.
    d : int, optional
        Spatial dimension.  Inferred from the last axis of ``x`` when omitted.

    Returns
    -------
    float or ndarray
        Kernel values, with the trailing coordinate axis removed.
    """
    if not t > 0:
        raise DomainError(f"heat kernel needs t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if d is None:
        d = x.shape[-1]
    elif x.shape[-1] != d:
        if d == 1:
            x = x[..., None]
        else:
            raise DomainError(f"points must have {d} coordinates")
    r2 = np.sum(x * x, axis=-1)
    val = (2.0 * math.pi * t) ** (-d / 2.0) * np.exp(-r2 / (2.0 * t))
    return float(val) if np.ndim(val) == 0 else val


def heat_kernel_1d(t: float, x) -> np.ndarray:
    """Vectorized one-dimensional heat kernel on an array of scalars."""
    x = np.asarray(x, dtype=float)
    return np.exp(-x * x / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)


def tent_cutoff(x, epsilon: float) -> np.ndarray:
    """Radial tent cutoff: 1 on ``|x| <= 1/eps``, linear down to 0 at ``1 + 1/eps``.

    ``x`` has shape ``(..., d)``.
    """
    r = np.sqrt(np.sum(np.asarray(x, dtype=float) ** 2, axis=-1))
    return np.clip(1.0 + 1.0 / epsilon - r, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Density:
    """Catalogued nonnegative density.

    ``kind`` is one of

    ``constant``    ``value``: g ≡ value
    ``gaussian``    ``mass``, ``center``, ``var``: mass times the N(center, var I) density
    ``indicator``   ``value``, ``radius``: value on the closed ball of given radius
    ``exp_square``  ``rate``: g(x) = exp(rate |x|²) (growth test case, not admissible for small a)
    ``tabulated``   ``grid``, ``values``: d=1, linear interpolation, zero outside the grid
    ``truncated``   ``base`` (InitialDatum), ``epsilon``: ((base ψ_ε) * G(ε))(x)
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DENSITY_KINDS:
            raise DomainError(f"unknown density kind {self.kind!r}")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        p = self.params
        shape = x.shape[:-1]
        if self.kind == "constant":
            return np.full(shape, float(p["value"]))
        if self.kind == "gaussian":
            c = np.asarray(p.get("center", np.zeros(x.shape[-1])), dtype=float)
            return float(p.get("mass", 1.0)) * heat_kernel(float(p["var"]), x - c, d=x.shape[-1]) * np.ones(shape)
        if self.kind == "indicator":
            r2 = np.sum(x * x, axis=-1)
            return np.where(r2 <= float(p["radius"]) ** 2, float(p["value"]), 0.0)
        if self.kind == "exp_square":
            return np.exp(float(p["rate"]) * np.sum(x * x, axis=-1))
        if self.kind == "tabulated":
            grid = np.asarray(p["grid"], dtype=float)
            vals = np.asarray(p["values"], dtype=float)
            return np.interp(x[..., 0], grid, vals, left=0.0, right=0.0)
        if self.kind == "truncated":
            return _truncated_density(p["base"], float(p["epsilon"]), x)
        raise UnsupportedError(self.kind)  # pragma: no cover

    def sup(self) -> float:
        """Upper bound on the density (``inf`` when unbounded)."""
        p = self.params
        if self.kind in ("constant", "indicator"):
            return float(p["value"])
        if self.kind == "gaussian":
            d = np.size(p.get("center", [0.0]))
            return float(p.get("mass", 1.0)) * (2.0 * math.pi * float(p["var"])) ** (-d / 2.0)
        if self.kind == "tabulated":
            return float(np.max(p["values"]))
        if self.kind == "truncated":
            base: InitialDatum = p["base"]
            eps = float(p["epsilon"])
            return base.ball_mass(1.0 + 1.0 / eps) * (2.0 * math.pi * eps) ** (-base.d / 2.0)
        return math.inf

    def growth_rate(self) -> float:
        """Catalogued Gaussian growth exponent c with g(x) <= C exp(c|x|²)."""
        if self.kind == "exp_square":
            return max(float(self.params["rate"]), 0.0)
        return 0.0

    def support_radius(self) -> float:
        """Radius of a ball containing the support (``inf`` if not compact)."""
        p = self.params
        if self.kind == "indicator":
            return float(p["radius"])
        if self.kind == "tabulated":
            g = np.asarray(p["grid"], dtype=float)
            return float(max(abs(g[0]), abs(g[-1])))
        return math.inf


@dataclass(frozen=True, eq=False)
class InitialDatum:
    """Nonnegative initial measure: a catalogued density, a finite sum of
    point masses, or zero.

    Use the constructors :meth:`lebesgue`, :meth:`dirac`, :meth:`point_masses`,
    :meth:`from_density` and :meth:`zero` rather than the raw fields.
    """

    kind: str  # "density" | "points" | "zero"
    d: int
    density: Density | None = None
    locations: np.ndarray | None = None
    masses: np.ndarray | None = None

    def __post_init__(self):
        _check_dim(self.d)
        if self.kind == "points":
            locs = np.asarray(self.locations, dtype=float).reshape(-1, self.d)
            m = np.asarray(self.masses, dtype=float).reshape(-1)
            if locs.shape[0] != m.size:
                raise DomainError("point-mass locations and masses differ in length")
            if np.any(m < 0) or not np.any(m > 0):
                raise DomainError("point masses must be nonnegative with at least one positive")
            object.__setattr__(self, "locations", locs)
            object.__setattr__(self, "masses", m)
        elif self.kind == "density":
            if self.density is None:
                raise DomainError("density datum needs a Density")
        elif self.kind != "zero":
            raise DomainError(f"unknown initial datum kind {self.kind!r}")

    # constructors -----------------------------------------------------------
    @classmethod
    def lebesgue(cls, d: int = 1, value: float = 1.0) -> "InitialDatum":
        if not value > 0:
            raise DomainError("Lebesgue density must be positive")
        return cls("density", d, density=Density("constant", {"value": float(value)}))

    @classmethod
    def dirac(cls, d: int = 1, at=None, mass: float = 1.0) -> "InitialDatum":
        at = np.zeros(d) if at is None else as_point(at, d)
        return cls("points", d, locations=at[None, :], masses=np.array([mass]))

    @classmethod
    def point_masses(cls, locations, masses, d: int | None = None) -> "InitialDatum":
        locs = np.asarray(locations, dtype=float)
        if locs.ndim <= 1:
            locs = locs.reshape(-1, 1) if d in (None, 1) else locs.reshape(-1, d)
        d = locs.shape[1] if d is None else d
        return cls("points", d, locations=locs, masses=np.asarray(masses, dtype=float))

    @classmethod
    def from_density(cls, kind: str, d: int = 1, **params) -> "InitialDatum":
        return cls("density", d, density=Density(kind, params))

    @classmethod
    def zero(cls, d: int = 1) -> "InitialDatum":
        return cls("zero", d)

    # evaluation -------------------------------------------------------------
    def density_at(self, x) -> np.ndarray:
        """Density values at points of shape ``(..., d)`` (density kind only)."""
        if self.kind != "density":
            raise UnsupportedError("only density data can be evaluated pointwise")
        return self.density.evaluate(np.asarray(x, dtype=float))

    def ball_mass(self, radius: float) -> float:
        """Mass of the closed ball of given radius about the origin."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "points":
            r = np.linalg.norm(self.locations, axis=1)
            return float(np.sum(self.masses[r <= radius]))
        dens = self.density
        if dens.kind == "constant":
            vol = math.pi ** (self.d / 2) / math.gamma(self.d / 2 + 1) * radius**self.d
            return float(dens.params["value"]) * vol
        return _ball_integral(lambda y: dens.evaluate(y), self.d, radius)


def _truncated_density(base: InitialDatum, eps: float, x: np.ndarray) -> np.ndarray:
    """((base ψ_ε) * G(ε))(x) at points ``x`` of shape (..., d)."""
    x = np.asarray(x, dtype=float)
    if base.kind == "zero":
        return np.zeros(x.shape[:-1])
    if base.kind == "points":
        w = base.masses * tent_cutoff(base.locations, eps)
        diff = x[..., None, :] - base.locations
        return np.sum(w * heat_kernel(eps, diff, d=base.d), axis=-1)
    R = 1.0 + 1.0 / eps
    flat = x.reshape(-1, base.d)
    out = np.empty(flat.shape[0])
    for n, xp in enumerate(flat):
        out[n] = _ball_integral(
            lambda y, xp=xp: base.density.evaluate(y) * tent_cutoff(y, eps) * heat_kernel(eps, xp - y, d=base.d),
            base.d,
            R,
            center_hint=xp,
        )
    return out.reshape(x.shape[:-1])


# --------------------------------------------------------------------------
# quadrature helpers
# --------------------------------------------------------------------------

def _quad_nd(fn: Callable[[np.ndarray], float], lows, highs, points=None, atol=QUAD_ATOL) -> float:
    """Adaptive quadrature of ``fn`` (taking a length-d vector) over a box."""
    d = len(lows)
    if d == 1:
        val, err = integrate.quad(
            lambda s: float(fn(np.array([s]))), lows[0], highs[0],
            epsabs=atol, epsrel=1e-10, limit=400, points=points,
        )
    else:
        opts = {"epsabs": atol, "epsrel": 1e-9, "limit": 200}
        val, err = integrate.nquad(
            lambda *s: float(fn(np.array(s[::-1]))), [(lows[k], highs[k]) for k in reversed(range(d))],
            opts=[opts] * d,
        )
    if not np.isfinite(val) or err > max(10 * atol, 1e-7 * abs(val)):
        raise NumericalError(f"quadrature did not reach tolerance (estimate {val}, error {err})", residual=err)
    return float(val)


def _ball_integral(fn, d: int, radius: float, center_hint=None, atol=QUAD_ATOL) -> float:
    """Integrate a vectorized ``fn`` over the ball ``|y| <= radius``.

    In d > 1 the iterated limits follow the ball, so the integrand sees no
    discontinuity at the boundary.
    """
    if d == 1:
        pts = [0.0]
        if center_hint is not None and abs(center_hint[0]) < radius:
            pts.append(float(center_hint[0]))
        return _quad_nd(lambda y: fn(y[None, :])[0], [-radius], [radius], points=pts, atol=atol)
    r2 = radius * radius

    def rng(*outer):
        rem = r2 - sum(v * v for v in outer)
        h = math.sqrt(max(rem, 0.0))
        return (-h, h)

    # nquad passes (x_0, ..., x_{d-1}) with x_0 innermost
    ranges = [rng] * (d - 1) + [(-radius, radius)]
    opts = {"epsabs": atol, "epsrel": 1e-9, "limit": 200}
    val, err = integrate.nquad(lambda *y: float(fn(np.array(y)[None, :])[0]), ranges, opts=[opts] * d)
    if not np.isfinite(val) or err > max(10 * atol, 1e-7 * abs(val)):
        raise NumericalError(f"ball quadrature did not reach tolerance (estimate {val}, error {err})", residual=err)
    return float(val)


# --------------------------------------------------------------------------
# homogeneous solution
# --------------------------------------------------------------------------

def homogeneous_solution(mu: InitialDatum, t: float, x, atol: float = QUAD_ATOL) -> float:
    """Evaluate :math:`J_0(t, x) = (\\mu * G(t, \\cdot))(x)`.

    Point masses give an exact finite sum; catalogued densities use a closed
    form where one exists (constant, Gaussian, truncated point masses) and
    adaptive quadrature otherwise.

    Raises
    ------
    DomainError
        If ``t <= 0``.
    NumericalError
        If the quadrature misses ``atol``, or the convolution diverges.
    """
    if not t > 0:
        raise DomainError(f"homogeneous solution needs t > 0, got {t}")
    x = as_point(x, mu.d)
    d = mu.d
    if mu.kind == "zero":
        return 0.0
    if mu.kind == "points":
        return float(np.sum(mu.masses * heat_kernel(t, x - mu.locations, d=d)))
    dens = mu.density
    p = dens.params
    if dens.kind == "constant":
        return float(p["value"])
    if dens.kind == "gaussian":
        c = np.asarray(p.get("center", np.zeros(d)), dtype=float)
        return float(p.get("mass", 1.0)) * heat_kernel(float(p["var"]) + t, x - c, d=d)
    if dens.kind == "truncated":
        base: InitialDatum = p["base"]
        eps = float(p["epsilon"])
        # semigroup identity: (ψμ * G(ε)) * G(t) = ψμ * G(t + ε)
        if base.kind == "zero":
            return 0.0
        if base.kind == "points":
            w = base.masses * tent_cutoff(base.locations, eps)
            return float(np.sum(w * heat_kernel(t + eps, x - base.locations, d=d)))
        return _ball_integral(
            lambda y: base.density.evaluate(y) * tent_cutoff(y, eps) * heat_kernel(t + eps, x - y, d=d),
            d, 1.0 + 1.0 / eps, center_hint=x, atol=atol,
        )
    if dens.kind == "exp_square" and float(p["rate"]) >= 1.0 / (2.0 * t):
        raise NumericalError("convolution of exp(a|x|^2) with G(t) diverges for a >= 1/(2t)", residual=math.inf)
    R = dens.support_radius()
    if dens.kind == "indicator":
        return _ball_integral(lambda y: dens.evaluate(y) * heat_kernel(t, x - y, d=d), d, R, center_hint=x, atol=atol)
    if math.isfinite(R):
        lows, highs = [-R] * d, [R] * d
    else:
        # effective radius of the Gaussian factor; the growth term is folded in
        c = dens.growth_rate()
        var = t / (1.0 - 2.0 * c * t)
        half = 14.0 * math.sqrt(var) + (abs(x).max() if c > 0 else 0.0)
        centre = x / (1.0 - 2.0 * c * t)
        lows, highs = list(centre - half), list(centre + half)
    pts = None
    if d == 1:
        pts = sorted({float(x[0])} | ({-R, R} if math.isfinite(R) else set()))
        pts = [q for q in pts if lows[0] < q < highs[0]] or None
    if d == 1 and dens.kind == "tabulated":
        grid = np.asarray(p["grid"], dtype=float)
        lows, highs = [grid[0]], [grid[-1]]
        pts = None
    return _quad_nd(
        lambda y: float(dens.evaluate(y[None, :])[0]) * heat_kernel(t, x - y, d=d),
        lows, highs, points=pts, atol=atol,
    )


# --------------------------------------------------------------------------
# regularization of the initial data
# --------------------------------------------------------------------------

def truncate_initial(mu: InitialDatum, epsilon: float) -> InitialDatum:
    """Regularize ``mu`` by cutting it off with the tent ψ_ε and smoothing
    with :math:`G(\\varepsilon)`.

    The returned density :math:`((\\mu\\psi_\\varepsilon) * G(\\varepsilon))(x)`
    is bounded, smooth and has Gaussian tails (see :func:`gaussian_tail_constant`).
    """
    if not (0.0 < epsilon < 1.0):
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    return InitialDatum("density", mu.d, density=Density("truncated", {"base": mu, "epsilon": float(epsilon)}))


def gaussian_tail_constant(mu: InitialDatum, epsilon: float, delta: float) -> float:
    """Constant C with ``truncate_initial(mu, eps)(x) <= C G(delta, x)`` for all x.

    Completing the square in the heat kernel gives, for ``|y| <= R := 1 + 1/eps``,
    ``G(eps, x - y) <= (delta/eps)^{d/2} exp(R²/(2(delta - eps))) G(delta, x)``,
    so ``C = (delta/eps)^{d/2} exp(R²/(2(delta-eps))) mu(B(0, R))``.
    """
    if not delta > epsilon:
        raise DomainError("the dominating Gaussian needs delta > epsilon")
    R = 1.0 + 1.0 / epsilon
    return (delta / epsilon) ** (mu.d / 2) * math.exp(R * R / (2 * (delta - epsilon))) * mu.ball_mass(R)


# --------------------------------------------------------------------------
# rough admissibility
# --------------------------------------------------------------------------

@dataclass
class AdmissibilityReport:
    """Result of :func:`check_rough_admissible`."""

    admissible: bool
    integrals: dict  # a -> value (inf when divergent)
    failing_a: list
    method: str

    def __bool__(self) -> bool:
        return self.admissible


def check_rough_admissible(mu: InitialDatum, a_values, divergence_threshold: float = 1e12) -> AdmissibilityReport:
    """Check :math:`\\int e^{-a|x|^2} \\mu(dx) < \\infty` for each supplied ``a``.

    Point masses give finite sums.  Densities with a catalogued Gaussian
    growth exponent ``c`` diverge exactly when ``a <= c``; otherwise the
    integral is computed on a box and a rigorous tail bound from the density's
    supremum is added.  Values above ``divergence_threshold`` count as divergent.
    """
    a_values = [float(a) for a in a_values]
    if not a_values:
        raise DomainError("a_values must be nonempty")
    if any(a <= 0 for a in a_values):
        raise DomainError("a values must be positive")
    d = mu.d
    out: dict[float, float] = {}
    failing = []
    if mu.kind == "zero":
        return AdmissibilityReport(True, {a: 0.0 for a in a_values}, [], "zero")
    if mu.kind == "points":
        for a in a_values:
            out[a] = float(np.sum(mu.masses * np.exp(-a * np.sum(mu.locations**2, axis=1))))
        return AdmissibilityReport(True, out, [], "finite sum")
    dens = mu.density
    c = dens.growth_rate()
    method = "catalogued growth + quadrature"
    for a in a_values:
        if a <= c:
            out[a] = math.inf
            failing.append(a)
            continue
        if dens.kind == "constant":
            val = float(dens.params["value"]) * (math.pi / a) ** (d / 2)
        elif dens.kind == "exp_square":
            val = (math.pi / (a - c)) ** (d / 2)
        else:
            R = min(dens.support_radius(), 8.0 / math.sqrt(a))
            inner = _ball_integral(lambda y: dens.evaluate(y) * np.exp(-a * np.sum(y * y, axis=-1)), d, R)
            # ∫_{|x|>R} e^{-a|x|²} dx = (π/a)^{d/2} Q(d/2, aR²)
            tail = 0.0
            if R < dens.support_radius():
                tail = dens.sup() * (math.pi / a) ** (d / 2) * special.gammaincc(d / 2, a * R * R)
            val = inner + tail
        out[a] = val
        if not val < divergence_threshold:
            failing.append(a)
    return AdmissibilityReport(not failing, out, failing, method)
