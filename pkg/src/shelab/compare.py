"""Functionals, cone membership, Monte Carlo estimation and comparison verdicts.

A :class:`Functional` maps the values of a solution at finitely many
space-time query points ``(t, site)`` to a nonnegative number.  The catalog
covers moments, Laplace functionals, even central moments, coordinate maps
``∏ g_ℓ(u(t_ℓ, x_ℓ))^{k_ℓ}``, powers of Euclidean norms over distinct sites
and joint non-exceedance indicators.

Comparison statements are checked statistically:

* in the diffusion coefficient (ρ₁ ≥ ρ₂ ≥ 0) both systems share one noise
  (common random numbers) and paired differences are tested one-sided;
* in the noise covariance (γ₁ ≥ γ₂) the ensembles are independent and a
  two-sample test is used;
* Slepian-type probability comparisons use binomial standard errors.

Before a functional is used, :func:`cone_check` classifies it numerically:
single-time comparisons accept ``C²ᵛ`` with polynomially growing gradient,
multi-time comparisons only the monotone classes ``C²ᵛ₊`` and ``C²ᵛ_{b,−}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DomainError, PreconditionError, UnsupportedError
from .lattice import LatticeSystem
from .noise import assemble_covariance, psd_repair
from .sde import DiffusionCoefficient, drift_matrix, simulate_ensemble

Z_THRESHOLD = 2.576
INCONCLUSIVE_FLOOR = 1000
#: offset separating the path ids of independent ensembles
INDEPENDENT_PATH_OFFSET = 2 ** 40
MAX_GROWTH_DEGREE = 16.0

STATUS_CONSISTENT = "Consistent"
STATUS_VIOLATION = "Violation"
STATUS_INCONCLUSIVE = "Inconclusive"


# --------------------------------------------------------------------------
# functionals
# --------------------------------------------------------------------------

def _site_key(site) -> tuple:
    return tuple(int(v) for v in np.atleast_1d(site))


def _time_key(t) -> float:
    t = float(t)
    if not t > 0:
        raise DomainError("functional times must be strictly positive")
    return round(t, 12)


G_CATALOG = ("exp", "inv_power", "log_ratio", "xlog", "power")


def _check_g(desc: dict) -> dict:
    d = dict(desc)
    name = d.get("g")
    if name == "exp":
        if not d.get("lam", 0) > 0:
            raise DomainError("exp(-lam z) needs lam > 0")
    elif name == "inv_power":
        if not d.get("c", 0) >= 1:
            raise DomainError("(1+z)^(-c) needs c >= 1")
    elif name == "log_ratio":
        if not (d.get("a", 0) > d.get("b", 0) > 0):
            raise DomainError("log((z+a)/(z+b)) needs a > b > 0")
    elif name == "xlog":
        if not (d.get("a", 0) >= 1 and d.get("b", 0) >= 1 and d.get("c", 0) >= math.e):
            raise DomainError("z^b log^a(c+z) needs a, b >= 1 and c >= e")
    elif name == "power":
        if not d.get("d", 0) >= 1:
            raise DomainError("z^d needs d >= 1")
    else:
        raise DomainError(f"unknown coordinate map {name!r}; catalog: {', '.join(G_CATALOG)}")
    return {k: (float(v) if k != "g" else v) for k, v in d.items()}


def _apply_g(desc: dict, z):
    name = desc["g"]
    if name == "exp":
        return np.exp(-desc["lam"] * z)
    if name == "inv_power":
        return (1.0 + z) ** (-desc["c"])
    if name == "log_ratio":
        return np.log((z + desc["a"]) / (z + desc["b"]))
    if name == "xlog":
        return z ** desc["b"] * np.log(desc["c"] + z) ** desc["a"]
    return z ** desc["d"]


@dataclass(frozen=True)
class Functional:
    """A catalog functional.  Use the constructors below rather than this class.

    ``terms`` layout per kind:

    * ``moment``: ((t, site, k), ...)
    * ``laplace``: ((t, site, lam), ...)
    * ``central_even``: ((t, site, c, n),) with ``c`` a number or ``"J0"``
    * ``coordinate``: ((t, site, g_descriptor, k), ...)
    * ``norm_power``: ((t, (site, ...), alpha), ...)
    * ``max_indicator``: ((t, (site, ...), (a, ...)),)
    """

    kind: str
    terms: tuple
    fid: str = ""

    def query_points(self) -> list:
        pts: list = []
        for term in self.terms:
            t = term[0]
            sites = term[1] if self.kind in ("norm_power", "max_indicator") else (term[1],)
            for s in sites:
                key = (t, s)
                if key not in pts:
                    pts.append(key)
        return pts

    def times(self) -> list:
        return sorted({p[0] for p in self.query_points()})

    @property
    def multi_time(self) -> bool:
        return len(self.times()) > 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "terms": _jsonify(self.terms), "fid": self.fid}


def _jsonify(obj):
    if isinstance(obj, tuple):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    return obj


def Moment(terms, fid: str | None = None) -> Functional:
    """∏ u(t_ℓ, x_ℓ)^{k_ℓ}."""
    out = []
    for t, s, k in terms:
        if int(k) != k or k < 0:
            raise DomainError("moment exponents must be nonnegative integers")
        out.append((_time_key(t), _site_key(s), int(k)))
    return Functional("moment", tuple(out), fid or "moment:" + ",".join(f"{t:g}@{s}^{k}" for t, s, k in out))


def Laplace(terms, fid: str | None = None) -> Functional:
    """exp(−Σ λ_ℓ u(t_ℓ, x_ℓ))."""
    out = []
    for t, s, lam in terms:
        if not lam >= 0:
            raise DomainError("Laplace parameters must be >= 0")
        out.append((_time_key(t), _site_key(s), float(lam)))
    return Functional("laplace", tuple(out), fid or "laplace:" + ",".join(f"{t:g}@{s}*{l:g}" for t, s, l in out))


def CentralEven(t, site, c, n: int, fid: str | None = None) -> Functional:
    """(u(t,x) − c)^{2n}; ``c="J0"`` means the deterministic mean flow at (t, x)."""
    if int(n) != n or n < 1:
        raise DomainError("n must be an integer >= 1")
    if c != "J0" and not float(c) >= 0:
        raise DomainError("c must be >= 0 or 'J0'")
    c = c if c == "J0" else float(c)
    term = (_time_key(t), _site_key(site), c, int(n))
    return Functional("central_even", (term,), fid or f"central_even:{term[0]:g}@{term[1]},c={c},n={n}")


def CoordinateMap(terms, fid: str | None = None) -> Functional:
    """∏ g_ℓ(u(t_ℓ, x_ℓ))^{k_ℓ} with g_ℓ from the coordinate-map catalog."""
    out = []
    for t, s, g, k in terms:
        if int(k) != k or k < 1:
            raise DomainError("coordinate-map exponents must be integers >= 1")
        out.append((_time_key(t), _site_key(s), _check_g(g), int(k)))
    name = ",".join(f"{t:g}@{s}:{g['g']}^{k}" for t, s, g, k in out)
    return Functional("coordinate", tuple(out), fid or "coordinate:" + name)


def NormPower(terms, fid: str | None = None) -> Functional:
    """∏_ℓ (Σ_j u(t_ℓ, x_j^ℓ)²)^{α_ℓ/2}; the sites of each group must be distinct."""
    out = []
    for t, group, alpha in terms:
        sites = tuple(_site_key(s) for s in group)
        if len(set(sites)) != len(sites) or not sites:
            raise DomainError("NormPower needs distinct sites within each group")
        if not alpha >= 2:
            raise DomainError("NormPower needs alpha >= 2")
        out.append((_time_key(t), sites, float(alpha)))
    return Functional("norm_power", tuple(out), fid or "norm_power:" + ",".join(f"{t:g}@{len(g)}^{a:g}"
                                                                                      for t, g, a in out))


def MaxIndicator(t, sites, thresholds, fid: str | None = None) -> Functional:
    """1{u(t, x_k) ≤ a_k for all k}; a scalar threshold gives {max_k u(t, x_k) ≤ a}."""
    sites = tuple(_site_key(s) for s in sites)
    a = np.broadcast_to(np.asarray(thresholds, dtype=float), (len(sites),))
    term = (_time_key(t), sites, tuple(float(v) for v in a))
    return Functional("max_indicator", (term,), fid or f"max_indicator:{term[0]:g}@{len(sites)}")


def resolve_functional(F: Functional, sys: LatticeSystem) -> Functional:
    """Replace symbolic parameters (``c = "J0"``) by their values for ``sys``.

    ``J0`` on the lattice is the deterministic flow ``(e^{At} u0)(x)``: the
    lattice analogue of the heat flow of the initial datum, and the mean of
    the solution when ρ is linear.
    """
    if F.kind != "central_even" or F.terms[0][2] != "J0":
        return F
    t, s, _, n = F.terms[0]
    c = float((linalg.expm(drift_matrix(sys) * t) @ sys.u0)[sys.site_index(s)])
    return Functional(F.kind, ((t, s, c, n),), F.fid)


def evaluate_functional(F: Functional, values):
    """Evaluate ``F`` given ``values[(t, site)]`` (scalars or per-path arrays)."""
    def v(t, s):
        try:
            return np.asarray(values[(t, s)], dtype=float)
        except KeyError:
            raise DomainError(f"query point (t={t}, site={s}) missing from the values") from None

    if F.kind == "moment":
        out = 1.0
        for t, s, k in F.terms:
            if k:
                out = out * v(t, s) ** k
        return out
    if F.kind == "laplace":
        return np.exp(-sum(lam * v(t, s) for t, s, lam in F.terms))
    if F.kind == "central_even":
        t, s, c, n = F.terms[0]
        if c == "J0":
            raise DomainError("resolve_functional must replace c='J0' before evaluation")
        return (v(t, s) - c) ** (2 * n)
    if F.kind == "coordinate":
        out = 1.0
        for t, s, g, k in F.terms:
            out = out * _apply_g(g, v(t, s)) ** k
        return out
    if F.kind == "norm_power":
        out = 1.0
        for t, group, alpha in F.terms:
            out = out * sum(v(t, s) ** 2 for s in group) ** (alpha / 2)
        return out
    if F.kind == "max_indicator":
        t, group, a = F.terms[0]
        ok = True
        for s, ak in zip(group, a):
            ok = ok & (v(t, s) <= ak)
        return np.asarray(ok, dtype=float)
    raise UnsupportedError(f"unknown functional kind {F.kind!r}")


# --------------------------------------------------------------------------
# cone membership
# --------------------------------------------------------------------------

@dataclass
class ConeReport:
    """Numerical membership in the C²ᵛ family.

    ``classes`` lists every class the function passed, with names ``C2v``,
    ``C2v+``, ``C2v-``, ``C2v_b``, ``C2v_b+``, ``C2v_b-``, ``C2v_p``,
    ``C2v_p+``, ``C2v_p-``.
    """

    dim: int
    nonnegative: bool
    convex: bool
    increasing: bool
    decreasing: bool
    bounded: bool
    polynomial: bool
    growth_exponent: float
    min_second_difference: float
    classes: frozenset = field(default_factory=frozenset)

    def admits(self, mode: str) -> bool:
        """``mode="single"``: C²ᵛ with polynomial growth; ``"multi"``: C²ᵛ₊ or C²ᵛ_{b,−}."""
        if mode == "single":
            return "C2v_p" in self.classes
        if mode == "multi":
            return "C2v+" in self.classes or "C2v_b-" in self.classes
        raise DomainError("mode must be 'single' or 'multi'")


def _as_callable(target):
    """(callable on arrays of shape (N, m), m)."""
    if isinstance(target, Functional):
        if any(isinstance(term[2], str) for term in target.terms if target.kind == "central_even"):
            raise DomainError("resolve c='J0' (resolve_functional) before the cone check")
        pts = target.query_points()

        def f(z):
            return np.asarray(evaluate_functional(target, {p: z[:, k] for k, p in enumerate(pts)}), dtype=float) \
                * np.ones(z.shape[0])
        return f, len(pts)
    if isinstance(target, dict):
        desc = _check_g(target)
        return (lambda z: _apply_g(desc, z[:, 0])), 1
    if callable(target):
        return (lambda z: np.asarray(target(z[:, 0]), dtype=float)), 1
    raise DomainError("cone_check needs a Functional, a g-descriptor or a callable of one variable")


def _ray_slope(r: np.ndarray, y: np.ndarray) -> float:
    """Log-log slope of 1 + |y| against r over the last decade of ``r``."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ly = np.log1p(np.abs(y))
    if not np.all(np.isfinite(ly)):
        return math.inf
    sel = r >= r[-1] / 10
    return float(np.polyfit(np.log(r[sel]), ly[sel], 1)[0])


def cone_check(target, zmax: float = 50.0, h: float = 1e-2, n_samples: int = 4000, r_max: float = 1e4,
               tol: float = 1e-8) -> ConeReport:
    """Classify ``target`` (a Functional, a coordinate-map descriptor or a
    callable of one variable) on the sample box ``[0, zmax]^m``.

    Second differences over all axis-aligned rectangles of side ``h``
    (including the pure ``i = j`` case) must be ≥ ``−tol·scale``; first
    differences decide the monotone classes; boundedness and polynomial
    growth are read off log-log slopes of ``|f|`` and ``|∇f|`` along rays up
    to radius ``r_max`` (polynomial means slope ≤ 16).
    """
    f, m = _as_callable(target)
    if m == 1:
        z = np.arange(0.0, zmax - 2 * h + 1e-12, h)[:, None]
    else:
        rng = np.random.default_rng(0)
        z = rng.uniform(0.0, zmax - 2 * h, size=(n_samples, m))
        z = np.vstack([z, np.zeros((1, m)), np.eye(m) * (zmax / 2)])
    with np.errstate(over="ignore", invalid="ignore"):
        f0 = f(z)
        fi = [f(z + h * np.eye(m)[i]) for i in range(m)]
        min_sd = math.inf
        convex = True
        for i in range(m):
            for j in range(i, m):
                fij = f(z + h * (np.eye(m)[i] + np.eye(m)[j]))
                sd = fij - fi[i] - fi[j] + f0
                scale = np.maximum(1.0, np.max(np.abs([fij, fi[i], fi[j], f0]), axis=0))
                rel = sd / scale
                min_sd = min(min_sd, float(np.min(rel)))
                if np.any(~np.isfinite(sd)) or np.any(rel < -tol):
                    convex = False
        nonneg = bool(np.all(f0 >= -tol * np.maximum(1.0, np.abs(f0))))
        first = np.stack([fi[i] - f0 for i in range(m)])
        fscale = np.maximum(1.0, np.abs(f0))
        increasing = bool(np.all(first >= -tol * fscale))
        decreasing = bool(np.all(first <= tol * fscale))

        r = np.geomspace(1.0, r_max, 41)
        dirs = [np.ones(m) / math.sqrt(m)] + ([np.eye(m)[i] for i in range(m)] if m > 1 else [])
        growth = -math.inf
        bounded = True
        for v in dirs:
            pts = r[:, None] * v[None, :]
            fv = f(pts)
            eta = 1e-6 * np.maximum(1.0, r)
            grad = np.sqrt(sum(((f(pts + eta[:, None] * np.eye(m)[i]) - fv) / eta) ** 2 for i in range(m)))
            gslope = _ray_slope(r, grad)
            fslope = _ray_slope(r, fv)
            growth = max(growth, gslope)
            if not (fslope <= 1e-3 and gslope <= 1e-3):
                bounded = False
    polynomial = bool(growth <= MAX_GROWTH_DEGREE)
    classes = set()
    if nonneg and convex:
        base = {"": True, "_b": bounded, "_p": polynomial or bounded}
        for tag, ok in base.items():
            if not ok:
                continue
            classes.add("C2v" + tag)
            if increasing:
                classes.add("C2v" + tag + "+")
            if decreasing:
                classes.add("C2v" + tag + "-")
    return ConeReport(m, nonneg, convex, increasing, decreasing, bounded, polynomial, growth, min_sd,
                      frozenset(classes))


def gate_functional(F: Functional, mode: str | None = None, **cone_kw) -> ConeReport:
    """Cone-check ``F`` and refuse it unless it is admissible for ``mode``
    (default: ``"multi"`` when ``F`` involves several times)."""
    if F.kind == "max_indicator":
        raise PreconditionError(f"{F.fid}: indicator events are compared by slepian(), not by moment comparison")
    mode = mode or ("multi" if F.multi_time else "single")
    rep = cone_check(F, **cone_kw)
    if not rep.admits(mode):
        need = "C2v+ or C2v_b-" if mode == "multi" else "C2v_p"
        raise PreconditionError(f"{F.fid}: not admissible in {mode}-time mode (needs {need}; "
                                f"passed {sorted(rep.classes) or 'none'})")
    return rep


# --------------------------------------------------------------------------
# estimation and verdicts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MCParams:
    """Monte Carlo settings; ``T`` defaults to the latest functional time."""

    n_paths: int
    dt: float
    seed: int
    T: float | None = None
    threads: int | None = None
    path_offset: int = 0
    stability_fraction: float | None = 0.1

    def __post_init__(self):
        if int(self.n_paths) < 1:
            raise DomainError("n_paths must be >= 1")
        if not self.dt > 0:
            raise DomainError("dt must be positive")


@dataclass(frozen=True)
class MomentEstimate:
    value: float
    std_error: float
    n_paths: int
    seed: int
    functional_id: str = ""


@dataclass(frozen=True)
class ComparisonVerdict:
    status: str
    z_score: float
    direction: str
    functional_id: str
    est1: float = math.nan
    se1: float = math.nan
    est2: float = math.nan
    se2: float = math.nan

    def row(self) -> tuple:
        return (self.functional_id, self.est1, self.se1, self.est2, self.se2, self.z_score, self.status)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), math.inf
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _z(gap: float, se: float) -> float:
    if se > 0:
        return gap / se
    return 0.0 if gap == 0 else math.copysign(math.inf, gap)


def decide(z: float, n: int, threshold: float = Z_THRESHOLD, floor: int = INCONCLUSIVE_FLOOR) -> str:
    """Verdict for a one-sided test of "first ≥ second" with statistic ``z``."""
    if z < -threshold:
        return STATUS_VIOLATION
    if abs(z) < 1 and n < floor:
        return STATUS_INCONCLUSIVE
    return STATUS_CONSISTENT


def _direction(a: float, b: float) -> str:
    return "first" if a > b else ("second" if b > a else "tie")


def verdict_from_samples(x1, x2, paired: bool, functional_id: str = "", threshold: float = Z_THRESHOLD,
                         floor: int = INCONCLUSIVE_FLOOR) -> ComparisonVerdict:
    """One-sided test of E x1 ≥ E x2 on paired or independent samples."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    m1, s1 = _mean_se(x1)
    m2, s2 = _mean_se(x2)
    if paired:
        if x1.shape != x2.shape:
            raise DomainError("paired samples need equal shapes")
        md, sd = _mean_se(x1 - x2)
        z = _z(md, sd)
        n = x1.size
    else:
        z = _z(m1 - m2, math.hypot(s1, s2))
        n = min(x1.size, x2.size)
    return ComparisonVerdict(decide(z, n, threshold, floor), z, _direction(m1, m2), functional_id, m1, s1, m2, s2)


def _samples(sys: LatticeSystem, functionals, mc: MCParams, path_offset: int) -> list:
    times = sorted({t for F in functionals for t in F.times()})
    T = mc.T if mc.T is not None else max(times)
    if times and max(times) > T * (1 + 1e-12):
        raise DomainError("functional times exceed the simulation horizon T")
    ens = simulate_ensemble(sys, T, mc.dt, mc.seed, int(mc.n_paths), record_times=times, path_offset=path_offset,
                            threads=mc.threads, stability_fraction=mc.stability_fraction)
    out = []
    for F in functionals:
        F = resolve_functional(F, sys)
        values = {}
        for t, s in F.query_points():
            k = int(np.flatnonzero(np.abs(ens.times - t) <= 1e-9 * max(1.0, t))[0])
            values[(t, s)] = ens.values[:, k, sys.site_index(s)]
        out.append(np.broadcast_to(np.asarray(evaluate_functional(F, values), dtype=float), (ens.n_paths,)))
    return out


def estimate(sys: LatticeSystem, functionals, mc: MCParams) -> list[MomentEstimate]:
    """Sample mean and standard error of each functional over one ensemble."""
    functionals = list(functionals)
    res = []
    for F, x in zip(functionals, _samples(sys, functionals, mc, mc.path_offset)):
        m, se = _mean_se(x)
        res.append(MomentEstimate(m, se, int(mc.n_paths), mc.seed, F.fid))
    return res


def _rho_grid(sys: LatticeSystem) -> np.ndarray:
    top = max(10.0, 10.0 * float(np.max(np.abs(sys.u0))))
    return np.linspace(0.0, top, 2001)


def check_rho_order(rho1: DiffusionCoefficient, rho2: DiffusionCoefficient, grid) -> None:
    """Require ρ₁ ≥ ρ₂ ≥ 0 on ``grid``."""
    r1, r2 = rho1(grid), rho2(grid)
    slack = 1e-12 * np.maximum(1.0, np.abs(r1))
    if np.any(r2 < -slack):
        raise PreconditionError("rho2 takes negative values on the sample grid")
    if np.any(r1 < r2 - slack):
        k = int(np.argmax(r2 - r1))
        raise PreconditionError(f"rho1 < rho2 at z = {grid[k]:g} ({r1[k]:g} < {r2[k]:g})")


def compare_scenario_rho(sys: LatticeSystem, rho1: DiffusionCoefficient, rho2: DiffusionCoefficient, functionals,
                         mc: MCParams, threshold: float = Z_THRESHOLD, floor: int = INCONCLUSIVE_FLOOR,
                         enforce_order: bool = True, mode: str | None = None) -> list[ComparisonVerdict]:
    """Test E F(u₁) ≥ E F(u₂) for systems differing only in ρ, on common noise.

    ``enforce_order=False`` skips the ρ-ordering precondition (used for
    negative controls); the cone gating is always applied.
    """
    functionals = list(functionals)
    s1, s2 = sys.with_(rho=rho1), sys.with_(rho=rho2)
    for F in functionals:
        gate_functional(resolve_functional(F, sys), mode)
    if enforce_order:
        check_rho_order(rho1, rho2, _rho_grid(sys))
    x1 = _samples(s1, functionals, mc, mc.path_offset)
    x2 = _samples(s2, functionals, mc, mc.path_offset)
    return [verdict_from_samples(a, b, True, F.fid, threshold, floor) for F, a, b in zip(functionals, x1, x2)]


def _gamma_matrix(sys: LatticeSystem, gamma) -> np.ndarray:
    if isinstance(gamma, np.ndarray) or (isinstance(gamma, (list, tuple)) and np.ndim(gamma) == 2):
        g = np.asarray(gamma, dtype=float)
        if g.shape != (sys.n, sys.n):
            raise DomainError("gamma matrix does not match the system size")
        return g
    return assemble_covariance(gamma, sys.sites).matrix


def check_gamma_order(g1: np.ndarray, g2: np.ndarray, psd_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Require Γ₁ ≥ Γ₂ entrywise and both (repairably) PSD; returns the repaired pair."""
    if np.any(g1 < g2 - 1e-12 * max(1.0, float(np.max(np.abs(g1))))):
        raise PreconditionError("gamma1 >= gamma2 fails for some offset")
    try:
        return psd_repair(g1, psd_tol).matrix, psd_repair(g2, psd_tol).matrix
    except Exception as exc:  # NumericalError from psd_repair
        raise PreconditionError(f"covariance not PSD: {exc}") from exc


def compare_scenario_gamma(sys: LatticeSystem, gamma1, gamma2, functionals, mc: MCParams,
                           threshold: float = Z_THRESHOLD, floor: int = INCONCLUSIVE_FLOOR,
                           enforce_order: bool = True, mode: str | None = None) -> list[ComparisonVerdict]:
    """Test E F(u₁) ≥ E F(u₂) for systems differing only in the noise
    covariance; the two ensembles are independent (disjoint path ids)."""
    functionals = list(functionals)
    g1, g2 = _gamma_matrix(sys, gamma1), _gamma_matrix(sys, gamma2)
    for F in functionals:
        gate_functional(resolve_functional(F, sys), mode)
    if enforce_order:
        g1, g2 = check_gamma_order(g1, g2)
    s1, s2 = sys.with_(gamma=g1), sys.with_(gamma=g2)
    x1 = _samples(s1, functionals, mc, mc.path_offset)
    x2 = _samples(s2, functionals, mc, mc.path_offset + INDEPENDENT_PATH_OFFSET)
    return [verdict_from_samples(a, b, False, F.fid, threshold, floor) for F, a, b in zip(functionals, x1, x2)]


def slepian(sys: LatticeSystem, gamma1, gamma2, sites, thresholds, mc: MCParams, t: float | None = None,
            threshold: float = Z_THRESHOLD, floor: int = INCONCLUSIVE_FLOOR) -> ComparisonVerdict:
    """Test P₁{u(t, x_k) ≤ a_k ∀k} ≥ P₂{…} for Γ₁ ≥ Γ₂ with equal diagonals.

    A scalar threshold gives the event {max_k u(t, x_k) ≤ a}.  Standard
    errors are binomial, √(p(1−p)/n), on independent ensembles.
    """
    g1, g2 = _gamma_matrix(sys, gamma1), _gamma_matrix(sys, gamma2)
    if np.max(np.abs(np.diag(g1) - np.diag(g2))) >= 1e-10:
        raise PreconditionError("Slepian comparison needs gamma1(0) = gamma2(0)")
    g1, g2 = check_gamma_order(g1, g2)
    t = t if t is not None else (mc.T if mc.T is not None else None)
    if t is None:
        raise DomainError("slepian needs an evaluation time (t or mc.T)")
    F = MaxIndicator(t, sites, thresholds)
    x1 = _samples(sys.with_(gamma=g1), [F], mc, mc.path_offset)[0]
    x2 = _samples(sys.with_(gamma=g2), [F], mc, mc.path_offset + INDEPENDENT_PATH_OFFSET)[0]
    n = x1.size
    p1, p2 = float(x1.mean()), float(x2.mean())
    se1, se2 = math.sqrt(p1 * (1 - p1) / n), math.sqrt(p2 * (1 - p2) / n)
    z = _z(p1 - p2, math.hypot(se1, se2))
    return ComparisonVerdict(decide(z, n, threshold, floor), z, _direction(p1, p2), F.fid, p1, se1, p2, se2)


# --------------------------------------------------------------------------
# positivity
# --------------------------------------------------------------------------

@dataclass
class PositivityLevel:
    dt: float
    fraction: float
    expected_fraction: float
    min_value: float
    n_entries: int


@dataclass
class PositivityReport:
    """Negative entries per dt level (raw count and conditional expectation).

    ``decreasing`` requires the conditional expected fraction to decrease
    strictly and the raw fraction not to increase along the refinement.
    """

    levels: list
    decreasing: bool

    @property
    def default_fraction(self) -> float:
        return self.levels[0].fraction


def positivity_report(sys: LatticeSystem, T: float, dt: float, n_paths: int, seed: int, halvings: int = 2,
                      threads: int | None = None) -> PositivityReport:
    """Unclamped Euler runs at ``dt, dt/2, …`` recording negative entries."""
    if not sys.rho.vanishes_at_zero:
        raise PreconditionError("positivity needs rho(0) = 0")
    if np.any(sys.u0 < 0):
        raise PreconditionError("positivity needs u0 >= 0")
    levels = []
    for k in range(halvings + 1):
        h = dt / 2 ** k
        ens = simulate_ensemble(sys, T, h, seed, n_paths, record_times=[T], threads=threads)
        e = ens.excursions
        levels.append(PositivityLevel(h, e.fraction, e.expected_fraction, e.min_value, e.total))
    dec = all(b.expected_fraction < a.expected_fraction and b.fraction <= a.fraction
              for a, b in zip(levels, levels[1:]))
    return PositivityReport(levels, dec)
