"""Command-line driver: ``shelab <experiment> --config FILE [--seed N] [--out DIR]``.

Experiments: ``simulate``, ``compare-rho``, ``compare-gamma``, ``slepian``,
``oracle``, ``dalang``, ``convergence``.

Configuration files are flat ``section.key = value`` lines; values are JSON
literals (bare words are read as strings), ``#`` starts a comment.  A
``manifest.json`` written by a previous run is accepted in place of a config
file and reproduces that run.

Every successful run writes versioned CSV tables, ``manifest.json`` (full
configuration, seed and package version) and ``summary.txt`` to the output
directory.  Any error writes ``error.log`` only.  Exit codes: 0 success, 1
error, 2 a comparison reported a violation (or a convergence ladder failed
to decrease), 3 some verdict is inconclusive.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys as _sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import compare as cmp
from . import oracle
from .correlation import (CauchyLike, Constant, GaussianBump, LatticeAtoms, Mollifier, Riesz, WhiteNoise,
                          dalang_upsilon, smoothed_value, strengthened_dalang)
from .errors import ConfigError
from .heatkernel import InitialDatum
from .lattice import (LatticeSystem, assemble_system, box_sites, default_radius, lattice_covariance,
                      ring_transition)
from .noise import assemble_covariance, psd_repair
from .sde import affine, constant, linear, simulate_ensemble

EXPERIMENTS = ("simulate", "compare-rho", "compare-gamma", "slepian", "oracle", "dalang", "convergence")
MANIFEST_FORMAT = "shelab-manifest/1"
EXIT_OK, EXIT_ERROR, EXIT_VIOLATION, EXIT_INCONCLUSIVE = 0, 1, 2, 3


# --------------------------------------------------------------------------
# configuration text
# --------------------------------------------------------------------------

def parse_config_text(text: str) -> dict:
    """Parse ``section.key = value`` lines into ``{section: {key: value}}``."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"line {lineno}", f"key {key!r} must have the form section.key")
        try:
            val = json.loads(value)
        except json.JSONDecodeError:
            val = value
        sec = out.setdefault(parts[0], {})
        if parts[1] in sec:
            raise ConfigError(key, "duplicate key")
        sec[parts[1]] = val
    return out


def format_config(sections: dict) -> str:
    """Inverse of :func:`parse_config_text` (sorted, JSON-literal values)."""
    lines = []
    for sec in sorted(sections):
        for key in sorted(sections[sec]):
            lines.append(f"{sec}.{key} = {json.dumps(sections[sec][key], sort_keys=True)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> tuple[dict, str | None]:
    """Config sections and, for a manifest, the recorded command."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("manifest", f"invalid JSON: {exc}") from None
        if doc.get("format") != MANIFEST_FORMAT or not isinstance(doc.get("config"), dict):
            raise ConfigError("manifest", f"not a {MANIFEST_FORMAT} document")
        return doc["config"], doc.get("command")
    return parse_config_text(text), None


class _Cfg:
    """Typed access to config sections with field-path errors."""

    def __init__(self, sections: dict):
        self.s = sections

    def has(self, key: str) -> bool:
        sec, k = key.split(".")
        return k in self.s.get(sec, {})

    def section(self, name: str) -> dict:
        return dict(self.s.get(name, {}))

    def get(self, key: str, default=None, required: bool = False):
        sec, k = key.split(".")
        if k in self.s.get(sec, {}):
            return self.s[sec][k]
        if required:
            raise ConfigError(key, "missing required value")
        return default

    def num(self, key: str, default=None, required: bool = False, positive: bool = False,
            nonneg: bool = False) -> float:
        v = self.get(key, default, required)
        if v is None:
            raise ConfigError(key, "missing required value")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(key, f"expected a number, got {v!r}")
        if positive and not v > 0:
            raise ConfigError(key, "must be positive")
        if nonneg and not v >= 0:
            raise ConfigError(key, "must be nonnegative")
        return float(v)

    def int_(self, key: str, default=None, required: bool = False, minimum: int | None = None) -> int:
        v = self.get(key, default, required)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(key, f"must be >= {minimum}")
        return int(v)

    def list_(self, key: str, default=None, required: bool = False) -> list:
        v = self.get(key, default, required)
        if v is None:
            raise ConfigError(key, "missing required value")
        if not isinstance(v, list):
            v = [v]
        return v


# --------------------------------------------------------------------------
# builders (validation happens here, before any simulation)
# --------------------------------------------------------------------------

def build_correlation(cfg: _Cfg, sec: str = "correlation"):
    kind = cfg.get(f"{sec}.kind", required=True)
    d = cfg.int_(f"{sec}.d", 1, minimum=1)
    if d > 3:
        raise ConfigError(f"{sec}.d", "dimensions above 3 are not supported")
    try:
        if kind == "white":
            return WhiteNoise(d)
        if kind == "riesz":
            a = cfg.num(f"{sec}.exponent", required=True, positive=True)
            if not a < d:
                raise ConfigError(f"{sec}.exponent", "Riesz exponent must be < d")
            c = cfg.get(f"{sec}.constant")
            return Riesz(a, d, None if c is None else cfg.num(f"{sec}.constant", positive=True))
        if kind == "gaussian":
            return GaussianBump(cfg.num(f"{sec}.scale", required=True, positive=True), d)
        if kind == "cauchy":
            return CauchyLike(cfg.num(f"{sec}.scale", required=True, positive=True), d)
        if kind == "constant":
            return Constant(cfg.num(f"{sec}.value", required=True, nonneg=True), d)
        if kind == "mollifier":
            return Mollifier(cfg.num(f"{sec}.epsilon", required=True, positive=True), d,
                             cfg.num(f"{sec}.weight", 1.0, positive=True))
        if kind == "atoms":
            w = cfg.get(f"{sec}.weights", required=True)
            if not isinstance(w, dict):
                raise ConfigError(f"{sec}.weights", "expected a mapping offset -> weight")
            return LatticeAtoms({tuple(json.loads(f"[{k}]")): v for k, v in w.items()}, d,
                                cfg.num(f"{sec}.spacing", 1.0, positive=True))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(sec, str(exc)) from None
    raise ConfigError(f"{sec}.kind", f"unknown correlation kind {kind!r}")


def build_initial(cfg: _Cfg, d: int, sec: str = "initial") -> InitialDatum:
    kind = cfg.get(f"{sec}.kind", "lebesgue")
    try:
        if kind == "lebesgue":
            return InitialDatum.lebesgue(d)
        if kind == "dirac":
            return InitialDatum.dirac(d, cfg.list_(f"{sec}.location", [0.0] * d), cfg.num(f"{sec}.mass", 1.0, positive=True))
        if kind == "points":
            return InitialDatum.point_masses(cfg.list_(f"{sec}.locations", required=True),
                                             cfg.list_(f"{sec}.masses", required=True), d)
        if kind in ("gaussian", "indicator", "constant"):
            params = {k: v for k, v in cfg.section(sec).items() if k != "kind"}
            return InitialDatum.from_density(kind, d, **params)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(sec, str(exc)) from None
    raise ConfigError(f"{sec}.kind", f"unknown initial datum {kind!r}")


def build_rho(cfg: _Cfg, sec: str = "rho"):
    if not cfg.s.get(sec):
        raise ConfigError(f"{sec}.kind", "missing diffusion coefficient specification")
    kind = cfg.get(f"{sec}.kind", required=True)
    if kind == "linear":
        return linear(cfg.num(f"{sec}.lam", required=True))
    if kind == "affine":
        return affine(cfg.num(f"{sec}.a", required=True), cfg.num(f"{sec}.b", required=True))
    if kind == "constant":
        return constant(cfg.num(f"{sec}.a", required=True))
    raise ConfigError(f"{sec}.kind", f"unknown diffusion coefficient {kind!r}")


def _offset_table(raw, field: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(field, "expected a mapping offset -> value")
    try:
        return {tuple(json.loads(f"[{k}]")): float(v) for k, v in raw.items()}
    except (ValueError, TypeError) as exc:
        raise ConfigError(field, str(exc)) from None


def _matrix(raw, n: int, field: str) -> np.ndarray:
    try:
        m = np.asarray(raw, dtype=float)
    except (ValueError, TypeError):
        raise ConfigError(field, "expected a numeric matrix") from None
    if m.shape != (n, n):
        raise ConfigError(field, f"expected a {n}x{n} matrix")
    return m


def _vector(raw, n: int, field: str) -> np.ndarray:
    try:
        v = np.broadcast_to(np.asarray(raw, dtype=float), (n,)).copy()
    except (ValueError, TypeError):
        raise ConfigError(field, f"expected a number or a list of {n} numbers") from None
    return v


def build_system(cfg: _Cfg, rho) -> LatticeSystem:
    src = cfg.get("system.source", "spde")
    try:
        if src == "ring":
            n = cfg.int_("system.n", required=True, minimum=1)
            w = _offset_table(cfg.get("system.weights", {"1": 0.5, "-1": 0.5}), "system.weights")
            P = ring_transition(n, {k[0]: v for k, v in w.items()})
            g = cfg.get("system.gamma", required=True)
            G = _matrix(g, n, "system.gamma") if isinstance(g, list) else \
                assemble_covariance(_offset_table(g, "system.gamma"), [(i,) for i in range(n)]).matrix
            u0 = _vector(cfg.get("system.u0", 1.0), n, "system.u0")
            return LatticeSystem(tuple((i,) for i in range(n)), cfg.num("system.kappa", 1.0, positive=True), P,
                                 psd_repair(G).matrix, rho, u0)
        if src == "matrix":
            p = cfg.get("system.p", required=True)
            n = len(p) if isinstance(p, list) else 0
            P = _matrix(p, n, "system.p")
            G = _matrix(cfg.get("system.gamma", required=True), n, "system.gamma")
            u0 = _vector(cfg.get("system.u0", 1.0), n, "system.u0")
            return LatticeSystem(tuple((i,) for i in range(n)), cfg.num("system.kappa", 1.0, positive=True), P,
                                 psd_repair(G).matrix, rho, u0)
        if src == "spde":
            f = build_correlation(cfg)
            mu = build_initial(cfg, f.d)
            eps = cfg.num("lattice.epsilon", required=True, positive=True)
            delta = cfg.num("lattice.delta", required=True, positive=True)
            if not (eps < 1 and delta < 1):
                raise ConfigError("lattice", "epsilon and delta must lie in (0, 1)")
            radius = cfg.get("lattice.radius")
            radius = None if radius is None else cfg.int_("lattice.radius", minimum=0)
            box = cfg.get("lattice.box")
            box = None if box is None else cfg.int_("lattice.box", minimum=0)
            km = cfg.get("lattice.kappa", "yosida")
            if km != "yosida":
                km = cfg.num("lattice.kappa", positive=True)
            return assemble_system(f, eps, delta, radius, km, rho, mu, box=box)
    except ConfigError:
        raise
    except (ValueError, ArithmeticError) as exc:
        raise ConfigError("system", str(exc)) from None
    raise ConfigError("system.source", f"unknown system source {src!r} (ring, matrix, spde)")


def build_functional(spec, field: str) -> cmp.Functional:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(field, "functional must be an object with a 'kind'")
    kind, fid = spec["kind"], spec.get("id")
    try:
        if kind == "moment":
            return cmp.Moment(spec["terms"], fid)
        if kind == "laplace":
            return cmp.Laplace(spec["terms"], fid)
        if kind == "central_even":
            return cmp.CentralEven(spec["t"], spec["site"], spec.get("c", "J0"), spec.get("n", 1), fid)
        if kind == "coordinate":
            return cmp.CoordinateMap(spec["terms"], fid)
        if kind == "norm_power":
            return cmp.NormPower(spec["terms"], fid)
    except KeyError as exc:
        raise ConfigError(field, f"missing parameter {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(field, str(exc)) from None
    raise ConfigError(f"{field}.kind", f"unknown functional kind {kind!r}")


def build_functionals(cfg: _Cfg, sys: LatticeSystem) -> list:
    out = []
    for k, spec in enumerate(cfg.list_("functionals.list", required=True)):
        F = build_functional(spec, f"functionals.list[{k}]")
        for t, s in F.query_points():
            try:
                sys.site_index(s)
            except ValueError:
                raise ConfigError(f"functionals.list[{k}]", f"site {s} is not in the system") from None
        out.append(F)
    return out


def build_mc(cfg: _Cfg, seed: int | None, default_T: float | None = None) -> cmp.MCParams:
    s = seed if seed is not None else cfg.get("mc.seed", required=True)
    if isinstance(s, bool) or not isinstance(s, int) or s < 0:
        raise ConfigError("mc.seed", "seed must be a nonnegative integer")
    T = cfg.get("mc.T", default_T)
    T = None if T is None else cfg.num("mc.T", default_T, positive=True)
    dt = cfg.num("mc.dt", required=True, positive=True)
    return cmp.MCParams(cfg.int_("mc.n_paths", required=True, minimum=2), dt, s, T)


def _gamma_source(cfg: _Cfg, sys: LatticeSystem, k: int):
    sec = f"gamma{k}"
    if cfg.has(f"{sec}.matrix"):
        return _matrix(cfg.get(f"{sec}.matrix"), sys.n, f"{sec}.matrix")
    if cfg.has(f"{sec}.offsets"):
        return assemble_covariance(_offset_table(cfg.get(f"{sec}.offsets"), f"{sec}.offsets"), sys.sites).matrix
    if cfg.s.get(f"correlation{k}"):
        if "epsilon" not in sys.meta:
            raise ConfigError(f"correlation{k}", "correlation-defined covariances need system.source = spde")
        f = build_correlation(cfg, f"correlation{k}")
        B = sys.meta["box"]
        gam = lattice_covariance(f, sys.meta["epsilon"], sys.meta["delta"], box_sites(2 * B, f.d))
        return assemble_covariance(gam, sys.sites).matrix
    raise ConfigError(sec, f"missing covariance: give {sec}.matrix, {sec}.offsets or correlation{k}.*")


# --------------------------------------------------------------------------
# convergence study
# --------------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    level_a: int
    level_b: int
    x: float
    distance: float
    std_error: float


@dataclass
class ConvergenceResult:
    levels: list
    t: float
    dt: float
    rows: list
    monotone: bool

    def distances(self, x: float) -> list:
        return [r.distance for r in self.rows if abs(r.x - x) < 1e-12]


def coupled_system(sa: LatticeSystem, sb: LatticeSystem, f) -> LatticeSystem:
    """Two lattice levels driven by one underlying noise.

    Site noises are ``∫ G(ε, x − y) F(dy)``, so the cross covariance between
    level ``a`` at ``x`` and level ``b`` at ``y`` is ``(G(ε_a + ε_b) ∗ f)(x − y)``.
    Both levels run as one block system; the per-level rates are folded into
    the transition blocks so that a single κ can drive them.
    """
    ea, eb = sa.meta["epsilon"], sb.meta["epsilon"]
    na, nb = sa.n, sb.n
    diff = sa.positions[:, None, :] - sb.positions[None, :, :]
    cross = smoothed_value(f, ea + eb, diff.reshape(-1, diff.shape[-1])).reshape(na, nb)
    G = np.block([[sa.gamma, cross], [cross.T, sb.gamma]])
    G = psd_repair(0.5 * (G + G.T)).matrix
    kappa = max(sa.kappa, sb.kappa)
    P = np.zeros((na + nb, na + nb))
    for off, s in ((0, sa), (na, sb)):
        r = s.kappa / kappa
        P[off:off + s.n, off:off + s.n] = r * s.p + (1 - r) * np.eye(s.n)
    sites = tuple((0,) + s for s in sa.sites) + tuple((1,) + s for s in sb.sites)
    return LatticeSystem(sites, kappa, P, G, sa.rho, np.concatenate([sa.u0, sb.u0]),
                         positions=np.vstack([sa.positions, sb.positions]))


def convergence_study(f, rho, mu, levels, half_width: float, t: float, xs, n_paths: int, dt: float, seed: int,
                      radius: int | None = None, threads: int | None = None) -> ConvergenceResult:
    """Monte Carlo L² distances between successive ladder levels.

    ``levels`` is a list of ``(ε, δ)``; every level uses the periodic box of
    physical half-width ``half_width`` and Yosida rate κ = 1/ε.  Successive
    levels are simulated jointly on one noise with the shared time step
    ``min(dt, 0.1·ε_min)`` and compared at the query positions ``xs`` (which
    must be sites of every level).  ``monotone`` reports whether the
    distances decrease strictly along the ladder at every query position.
    """
    xs = [float(x) for x in np.atleast_1d(xs)]
    systems = []
    for eps, delta in levels:
        r = default_radius(eps, delta) if radius is None else radius
        B = int(math.ceil(half_width / delta - 1e-9))
        if B < r:
            raise ConfigError("convergence.half_width",
                              f"half-width {half_width} is narrower than the kernel radius {r * delta:g} at "
                              f"(epsilon={eps}, delta={delta})")
        for x in xs:
            if abs(x / delta - round(x / delta)) > 1e-9 or abs(x) > B * delta:
                raise ConfigError("convergence.x", f"query point {x} is not a site at delta={delta}")
        systems.append(assemble_system(f, eps, delta, r, "yosida", rho, mu, box=B))
    eps_min = min(e for e, _ in levels)
    h = min(dt, 0.1 * eps_min)
    n = int(math.ceil(t / h - 1e-9))
    h = t / n
    rows = []
    for a in range(len(systems) - 1):
        sa, sb = systems[a], systems[a + 1]
        joint = coupled_system(sa, sb, f)
        ens = simulate_ensemble(joint, t, h, seed, n_paths, record_times=[t], threads=threads)
        U = ens.values[:, 0, :]
        for x in xs:
            ia = sa.site_index(tuple(int(round(x / levels[a][1])) for _ in range(f.d)))
            ib = sa.n + sb.site_index(tuple(int(round(x / levels[a + 1][1])) for _ in range(f.d)))
            D2 = (U[:, ia] - U[:, ib]) ** 2
            m2 = float(D2.mean())
            se2 = float(D2.std(ddof=1) / math.sqrt(n_paths))
            dist = math.sqrt(m2)
            rows.append(ConvergenceRow(a, a + 1, x, dist, se2 / (2 * dist) if dist > 0 else 0.0))
    monotone = True
    for x in xs:
        d = [r.distance for r in rows if r.x == x]
        monotone &= all(b < a for a, b in zip(d, d[1:]))
    return ConvergenceResult(list(levels), t, h, rows, bool(monotone))


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

@dataclass
class Table:
    name: str
    columns: tuple
    rows: list


@dataclass
class Outcome:
    tables: list
    summary: list
    status: int = EXIT_OK


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(path: Path, table: Table) -> None:
    buf = io.StringIO()
    buf.write(f"# shelab/{table.name} v1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _site_label(s) -> str:
    return ":".join(str(v) for v in s)


def _verdict_outcome(kind: str, verdicts, extra: list) -> Outcome:
    rows = [v.row() for v in verdicts]
    status = EXIT_OK
    if any(v.status == cmp.STATUS_VIOLATION for v in verdicts):
        status = EXIT_VIOLATION
    elif any(v.status == cmp.STATUS_INCONCLUSIVE for v in verdicts):
        status = EXIT_INCONCLUSIVE
    summary = [f"experiment: {kind}"] + extra + [f"{v.functional_id}: {v.status} (z = {v.z_score:.3f}, "
                                                 f"{v.est1:.6g} vs {v.est2:.6g})" for v in verdicts]
    cols = ("functional_id", "est1", "se1", "est2", "se2", "z", "verdict")
    return Outcome([Table("comparisons", cols, rows)], summary, status)


def _prepare(kind: str, cfg: _Cfg, seed: int | None):
    """Validate the configuration and build every object the run needs."""
    if kind == "dalang":
        f = build_correlation(cfg)
        betas = [float(b) for b in cfg.list_("dalang.beta", [1.0])]
        alphas = [float(a) for a in cfg.list_("dalang.alpha", [])]
        if any(not b > 0 for b in betas):
            raise ConfigError("dalang.beta", "beta values must be positive")
        if any(not 0 <= a <= 1 for a in alphas):
            raise ConfigError("dalang.alpha", "alpha values must lie in [0, 1]")
        return {"f": f, "betas": betas, "alphas": alphas}
    if kind == "convergence":
        f = build_correlation(cfg)
        mu = build_initial(cfg, f.d)
        rho = build_rho(cfg)
        ladder = cfg.get("convergence.ladder", required=True)
        vals = [float(v) for v in cfg.list_("convergence.levels", required=True)]
        if len(vals) < 2 or any(not 0 < v < 1 for v in vals):
            raise ConfigError("convergence.levels", "need at least two values in (0, 1)")
        fixed = cfg.num("convergence.fixed", required=True, positive=True)
        if ladder == "delta":
            levels = [(fixed, v) for v in vals]
        elif ladder == "epsilon2":
            levels = [(v, fixed) for v in vals]
        else:
            raise ConfigError("convergence.ladder", "must be 'delta' or 'epsilon2'")
        mc = build_mc(cfg, seed, cfg.num("convergence.t", 0.5, positive=True))
        return {"f": f, "mu": mu, "rho": rho, "levels": levels, "ladder": ladder, "mc": mc,
                "half_width": cfg.num("convergence.half_width", required=True, positive=True),
                "xs": [float(x) for x in cfg.list_("convergence.x", [0.0])]}
    if kind == "compare-rho":
        rho1, rho2 = build_rho(cfg, "rho1"), build_rho(cfg, "rho2")
        sys = build_system(cfg, rho1)
    elif kind == "oracle" and cfg.get("oracle.kind", required=True) not in ("additive", "pam"):
        raise ConfigError("oracle.kind", "must be 'additive' or 'pam'")
    else:
        rho1 = rho2 = None
    if kind != "compare-rho":
        sys = build_system(cfg, build_rho(cfg))
    out = {"sys": sys, "threshold": cfg.num("compare.threshold", cmp.Z_THRESHOLD, positive=True)}
    if kind == "oracle":
        out["which"] = cfg.get("oracle.kind")
        if out["which"] == "additive":
            if not sys.rho.is_constant:
                raise ConfigError("rho.kind", "the additive oracle needs rho.kind = constant")
            pts = cfg.list_("oracle.points", required=True)
            try:
                out["points"] = [(float(t), s) for t, s in pts]
                for _, s in out["points"]:
                    sys.site_index(s)
            except (ValueError, TypeError):
                raise ConfigError("oracle.points", "expected a list of [t, site] pairs on the system") from None
            out["moments"] = cfg.list_("oracle.moments", [])
            for mi in out["moments"]:
                if not isinstance(mi, list) or len(mi) != len(pts):
                    raise ConfigError("oracle.moments", "each multi-index needs one exponent per point")
        else:
            if sys.rho.kind != "linear":
                raise ConfigError("rho.kind", "the PAM oracle needs rho.kind = linear")
            out["times"] = [float(t) for t in cfg.list_("oracle.times", required=True)]
            out["dt_ode"] = cfg.num("oracle.dt_ode", 1e-3, positive=True)
        return out
    out["mc"] = build_mc(cfg, seed)
    if kind == "simulate":
        out["functionals"] = build_functionals(cfg, sys) if cfg.has("functionals.list") else []
        T = out["mc"].T
        if T is None:
            raise ConfigError("mc.T", "missing required value")
        out["record"] = [float(v) for v in cfg.list_("mc.record_times", [T])]
        return out
    if kind == "compare-rho":
        out.update(rho1=rho1, rho2=rho2, functionals=build_functionals(cfg, sys))
        return out
    out["gamma1"], out["gamma2"] = _gamma_source(cfg, sys, 1), _gamma_source(cfg, sys, 2)
    if kind == "compare-gamma":
        out["functionals"] = build_functionals(cfg, sys)
        return out
    if kind == "slepian":
        sites = cfg.list_("slepian.sites", required=True)
        for s in sites:
            try:
                sys.site_index(s)
            except ValueError:
                raise ConfigError("slepian.sites", f"site {s} is not in the system") from None
        out["sites"] = sites
        out["thresholds"] = cfg.get("slepian.thresholds", required=True)
        out["t"] = cfg.num("slepian.t", out["mc"].T, positive=True)
        return out
    raise ConfigError("experiment", f"unknown experiment {kind!r}")


def _run(kind: str, p: dict) -> Outcome:
    if kind == "dalang":
        rows = []
        for b in p["betas"]:
            r = dalang_upsilon(p["f"], b)
            rows.append(("upsilon", p["f"].describe(), p["f"].d, b, r.status, r.value if r.finite else math.nan))
        for a in p["alphas"]:
            r = strengthened_dalang(p["f"], a)
            rows.append(("strengthened", p["f"].describe(), p["f"].d, a, r.status, r.value if r.finite else math.nan))
        summary = ["experiment: dalang"] + [f"{q}({par:g}) = {v:.12g} [{st}]" for q, _, _, par, st, v in rows]
        return Outcome([Table("dalang", ("quantity", "correlation", "d", "parameter", "status", "value"), rows)],
                       summary)
    if kind == "convergence":
        mc = p["mc"]
        res = convergence_study(p["f"], p["rho"], p["mu"], p["levels"], p["half_width"], mc.T, p["xs"], mc.n_paths,
                                mc.dt, mc.seed)
        lv = p["levels"]
        rows = [(p["ladder"], lv[r.level_a][0], lv[r.level_a][1], lv[r.level_b][0], lv[r.level_b][1], res.t, r.x,
                 r.distance, r.std_error) for r in res.rows]
        cols = ("ladder", "eps_a", "delta_a", "eps_b", "delta_b", "t", "x", "distance", "std_error")
        summary = [f"experiment: convergence ({p['ladder']} ladder, dt = {res.dt:g})"]
        summary += [f"x = {r[6]:g}: level ({r[1]:g}, {r[2]:g}) vs ({r[3]:g}, {r[4]:g}): {r[7]:.6g} +- {r[8]:.2g}"
                    for r in rows]
        summary.append("distances decrease monotonically" if res.monotone else "distances do NOT decrease monotonically")
        return Outcome([Table("convergence", cols, rows)], summary, EXIT_OK if res.monotone else EXIT_VIOLATION)
    sys = p["sys"]
    if kind == "oracle":
        if p["which"] == "additive":
            law = oracle.additive_law(sys, p["points"])
            rows = [(k, t, _site_label(sys.sites[i]), law.mean[k], law.covariance[k, k])
                    for k, (t, i) in enumerate(law.points)]
            tables = [Table("oracle_law", ("point", "t", "site", "mean", "variance"), rows)]
            mrows = [("-".join(str(int(v)) for v in mi), oracle.isserlis_moment(law, mi)) for mi in p["moments"]]
            if mrows:
                tables.append(Table("oracle_moments", ("multi_index", "value"), mrows))
            return Outcome(tables, ["experiment: oracle (additive)"] + [f"E[{a}] = {b:.12g}" for a, b in mrows])
        m = oracle.pam_second_moments(sys, p["times"], p["dt_ode"])
        rows = [(t, _site_label(sys.sites[i]), _site_label(sys.sites[j]), m[k, i, j])
                for k, t in enumerate(p["times"]) for i in range(sys.n) for j in range(i, sys.n)]
        gate = oracle.gate_status(sys)
        return Outcome([Table("pam_moments", ("t", "site_i", "site_j", "m"), rows)],
                       ["experiment: oracle (pam)", f"Monte Carlo gate: max |z| = {gate.max_abs_z:.3f} "
                        f"({gate.n_paths} paths, t = {gate.t:g})"])
    mc = p["mc"]
    th = p["threshold"]
    if kind == "simulate":
        ens = simulate_ensemble(sys, mc.T, mc.dt, mc.seed, mc.n_paths, record_times=p["record"])
        rows = []
        for k, t in enumerate(ens.times):
            v = ens.values[:, k, :]
            se = v.std(axis=0, ddof=1) / math.sqrt(ens.n_paths)
            rows += [(t, _site_label(s), v[:, i].mean(), se[i]) for i, s in enumerate(sys.sites)]
        tables = [Table("simulate", ("t", "site", "mean", "std_error"), rows)]
        summary = ["experiment: simulate", f"paths: {mc.n_paths}, dt = {mc.dt:g}, T = {mc.T:g}, seed = {mc.seed}",
                   f"negative entries: {ens.excursions.count} of {ens.excursions.total}"]
        if p["functionals"]:
            est = cmp.estimate(sys, p["functionals"], mc)
            tables.append(Table("estimates", ("functional_id", "value", "std_error", "n_paths", "seed"),
                                [(e.functional_id, e.value, e.std_error, e.n_paths, e.seed) for e in est]))
            summary += [f"{e.functional_id}: {e.value:.6g} +- {e.std_error:.2g}" for e in est]
        return Outcome(tables, summary)
    if kind == "compare-rho":
        v = cmp.compare_scenario_rho(sys, p["rho1"], p["rho2"], p["functionals"], mc, threshold=th)
        return _verdict_outcome(kind, v, [f"rho1 = {p['rho1'].describe()}, rho2 = {p['rho2'].describe()}, "
                                          f"common noise, {mc.n_paths} paths"])
    if kind == "compare-gamma":
        v = cmp.compare_scenario_gamma(sys, p["gamma1"], p["gamma2"], p["functionals"], mc, threshold=th)
        return _verdict_outcome(kind, v, [f"independent ensembles, {mc.n_paths} paths each"])
    v = cmp.slepian(sys, p["gamma1"], p["gamma2"], p["sites"], p["thresholds"], mc, t=p["t"], threshold=th)
    return _verdict_outcome(kind, [v], [f"P(u(t, x_k) <= a_k for all k) at t = {p['t']:g}"])


def run(kind: str, sections: dict, seed: int | None, out_dir) -> int:
    """Execute one experiment and write its artifacts; returns the exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _Cfg(sections)
        declared = cfg.get("experiment.kind")
        if declared is not None and declared != kind:
            raise ConfigError("experiment.kind", f"config is for {declared!r}, not {kind!r}")
        if kind not in EXPERIMENTS:
            raise ConfigError("experiment.kind", f"unknown experiment {kind!r}")
        prepared = _prepare(kind, cfg, seed)
        result = _run(kind, prepared)
    except Exception as exc:  # every failure is reported through error.log
        field = getattr(exc, "field", None)
        (out / "error.log").write_text(f"{type(exc).__name__}: {exc}\n" + (f"field: {field}\n" if field else ""))
        return EXIT_ERROR
    final = {k: dict(v) for k, v in sections.items()}
    if seed is not None:
        final.setdefault("mc", {})["seed"] = seed
    for t in result.tables:
        write_table(out / f"{t.name}.csv", t)
    manifest = {"format": MANIFEST_FORMAT, "version": __version__, "command": kind,
                "seed": final.get("mc", {}).get("seed"), "config": final,
                "outputs": [f"{t.name}.csv" for t in result.tables], "exit_code": result.status}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "summary.txt").write_text("\n".join(result.summary) + "\n")
    return result.status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="shelab", description="Stochastic heat equation comparison experiments.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="config file (section.key = value) or a manifest.json")
    ap.add_argument("--seed", type=int, default=None, help="override mc.seed")
    ap.add_argument("--out", default=".", help="output directory")
    args = ap.parse_args(argv)
    out = Path(args.out)
    try:
        sections, command = load_config(args.config)
        if command is not None and command != args.experiment:
            raise ConfigError("manifest", f"manifest records {command!r}, not {args.experiment!r}")
    except (OSError, ConfigError) as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.log").write_text(f"{type(exc).__name__}: {exc}\n")
        return EXIT_ERROR
    return run(args.experiment, sections, args.seed, out)


if __name__ == "__main__":
    _sys.exit(main())
