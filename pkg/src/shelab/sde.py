"""Time integration of finite interacting-diffusion systems

.. math:: dU_i = \\kappa\\sum_j p_{ij}(U_j - U_i)\\,dt + \\rho(U_i)\\,dM_i,

with an Euler–Maruyama production integrator, a Picard-iteration reference
solver, the ρ-operators (truncation, mollification) and restriction to a
finite subsystem with frozen outer sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .correlation import phi
from .errors import DomainError, NumericalError
from .lattice import LatticeSystem
from .noise import NoiseStream, ensemble_increments, factorize, map_path_chunks

RHO_KINDS = ("linear", "affine", "tabulated", "truncated", "mollified")


class BlowUpError(NumericalError):
    """The state became non-finite; ``step`` is the offending step index."""

    def __init__(self, message, step):
        super().__init__(message, residual=math.inf)
        self.step = step


# --------------------------------------------------------------------------
# diffusion coefficients
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiffusionCoefficient:
    """Catalogued Lipschitz diffusion coefficient ρ.

    Use :func:`linear`, :func:`affine`, :func:`constant`, :func:`tabulated_rho`,
    :func:`truncate_rho` and :func:`mollify_rho` to build instances.
    """

    kind: str
    params: dict
    lip_estimate: float

    def __post_init__(self):
        if self.kind not in RHO_KINDS:
            raise DomainError(f"unknown diffusion coefficient kind {self.kind!r}")

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        p = self.params
        k = self.kind
        if k == "linear":
            return p["lam"] * u
        if k == "affine":
            return p["a"] + p["b"] * u
        if k == "tabulated":
            return np.interp(u, p["grid"], p["values"])
        if k == "truncated":
            inner, N = p["inner"], p["N"]
            a = np.abs(u)
            edge = inner(np.sign(u) * N)
            return np.where(a <= N, inner(np.clip(u, -N, N)), np.where(a <= 2 * N, edge * (2 - a / N), 0.0))
        if k == "mollified":
            return np.interp(u, p["grid"], p["values"], left=p["values"][0], right=p["values"][-1])
        raise DomainError(k)  # pragma: no cover

    @property
    def vanishes_at_zero(self) -> bool:
        return abs(float(self(0.0))) < 1e-12

    @property
    def is_constant(self) -> bool:
        return self.kind == "affine" and self.params["b"] == 0.0

    def support(self) -> float:
        """Half-width of a compact support (``inf`` if none)."""
        if self.kind == "truncated":
            return 2 * self.params["N"]
        if self.kind == "mollified":
            return self.params["support"]
        if self.kind == "tabulated":
            v = np.asarray(self.params["values"])
            g = np.asarray(self.params["grid"])
            if v[0] == 0 and v[-1] == 0:
                return float(max(abs(g[0]), abs(g[-1])))
        if self.kind == "linear" and self.params["lam"] == 0:
            return 0.0
        if self.kind == "affine" and self.params["a"] == 0 and self.params["b"] == 0:
            return 0.0
        return math.inf

    def describe(self) -> str:
        p = self.params
        if self.kind == "linear":
            return f"linear(lam={p['lam']:g})"
        if self.kind == "affine":
            return f"affine(a={p['a']:g}, b={p['b']:g})"
        if self.kind == "truncated":
            return f"truncated({p['inner'].describe()}, N={p['N']:g})"
        if self.kind == "mollified":
            return f"mollified({p['inner'].describe()}, eps={p['epsilon']:g})"
        return "tabulated"

    def to_dict(self) -> dict:
        p = self.params
        if self.kind in ("linear", "affine"):
            return {"kind": self.kind, **p}
        if self.kind == "tabulated":
            return {"kind": "tabulated", "grid": list(map(float, p["grid"])), "values": list(map(float, p["values"]))}
        if self.kind == "truncated":
            return {"kind": "truncated", "inner": p["inner"].to_dict(), "N": p["N"]}
        return {"kind": "mollified", "inner": p["inner"].to_dict(), "epsilon": p["epsilon"]}

    @classmethod
    def from_dict(cls, doc: dict) -> "DiffusionCoefficient":
        k = doc["kind"]
        if k == "linear":
            return linear(doc["lam"])
        if k == "affine":
            return affine(doc["a"], doc["b"])
        if k == "tabulated":
            return tabulated_rho(doc["grid"], doc["values"])
        if k == "truncated":
            return truncate_rho(cls.from_dict(doc["inner"]), doc["N"])
        if k == "mollified":
            return mollify_rho(cls.from_dict(doc["inner"]), doc["epsilon"])
        raise DomainError(f"unknown diffusion coefficient kind {k!r}")


def linear(lam: float) -> DiffusionCoefficient:
    """ρ(u) = λu (parabolic Anderson model)."""
    return DiffusionCoefficient("linear", {"lam": float(lam)}, abs(float(lam)))


def affine(a: float, b: float) -> DiffusionCoefficient:
    """ρ(u) = a + bu (``a ≠ 0`` is meant for oracle runs only)."""
    return DiffusionCoefficient("affine", {"a": float(a), "b": float(b)}, abs(float(b)))


def constant(a: float) -> DiffusionCoefficient:
    """ρ ≡ a (additive noise)."""
    return affine(a, 0.0)


def tabulated_rho(grid, values) -> DiffusionCoefficient:
    """Piecewise-linear ρ through (grid, values), constant beyond the ends."""
    g = np.asarray(grid, dtype=float)
    v = np.asarray(values, dtype=float)
    if g.ndim != 1 or g.shape != v.shape or np.any(np.diff(g) <= 0):
        raise DomainError("tabulated rho needs an increasing grid and matching values")
    lip = float(np.max(np.abs(np.diff(v) / np.diff(g)))) if g.size > 1 else 0.0
    return DiffusionCoefficient("tabulated", {"grid": g, "values": v}, lip)


def truncate_rho(rho: DiffusionCoefficient, N: float) -> DiffusionCoefficient:
    """ρ_N: equal to ρ on [-N, N], linear ramp to 0 on N ≤ |x| ≤ 2N, zero beyond."""
    if not N > 0:
        raise DomainError("N must be positive")
    N = float(N)
    ramp = max(abs(float(rho(N))), abs(float(rho(-N)))) / N
    # the ramp has slope |ρ(±N)|/N, which is at most Lip_ρ whenever ρ(0) = 0
    return DiffusionCoefficient("truncated", {"inner": rho, "N": N}, max(rho.lip_estimate, ramp))


def mollify_rho(rho: DiffusionCoefficient, epsilon: float, points_per_eps: int = 64) -> DiffusionCoefficient:
    """ρ_ε = φ_ε * ρ with the tent mollifier φ (support [-2ε, 2ε]).

    The convolution is tabulated on a grid of spacing ``ε / points_per_eps``
    over the (compact) support of ρ_ε and interpolated linearly.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    S = rho.support()
    if not math.isfinite(S):
        raise DomainError("mollify_rho needs a compactly supported rho (apply truncate_rho first)")
    R = S + 2 * epsilon
    h = epsilon / points_per_eps
    n = int(math.ceil(R / h))
    grid = np.arange(-n, n + 1) * h
    # ∫ φ_ε(y) ρ(x − y) dy with Gauss–Legendre on the two linear pieces of the tent
    nodes, weights = np.polynomial.legendre.leggauss(48)
    ys = np.concatenate([(nodes + 1) * epsilon - 2 * epsilon, (nodes + 1) * epsilon])  # [-2ε,0] ∪ [0,2ε]
    ws = np.concatenate([weights, weights]) * epsilon
    ker = phi((ys / epsilon)[:, None]) / epsilon * ws
    vals = rho(grid[:, None] - ys[None, :]) @ ker
    return DiffusionCoefficient("mollified", {"inner": rho, "epsilon": float(epsilon), "grid": grid, "values": vals,
                                              "support": R}, rho.lip_estimate)


# --------------------------------------------------------------------------
# trajectories and ensembles
# --------------------------------------------------------------------------

@dataclass
class Excursions:
    """Negativity record over all steps and active sites.

    ``count`` is the number of strictly negative entries observed.
    ``expected`` accumulates, for every entry, the conditional probability
    that the Euler step produces a negative value given the state before
    the step (the increment is Gaussian given the past).  Its ratio to
    ``total`` is an unbiased, low-variance estimate of the expected negative
    fraction that stays informative when negatives are too rare to observe.
    """

    count: int = 0
    total: int = 0
    min_value: float = 0.0
    expected: float = 0.0

    @property
    def fraction(self) -> float:
        return self.count / self.total if self.total else 0.0

    @property
    def expected_fraction(self) -> float:
        return self.expected / self.total if self.total else 0.0

    def merge(self, other: "Excursions") -> None:
        self.count += other.count
        self.total += other.total
        self.min_value = min(self.min_value, other.min_value)
        self.expected += other.expected


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (len(times), n_sites)
    seed: int
    path_id: int
    excursions: Excursions = field(default_factory=Excursions)


@dataclass
class PathEnsemble:
    """Values of many paths at recorded times: ``values[path, time, site]``."""

    times: np.ndarray
    values: np.ndarray
    seed: int
    path_offset: int
    dt: float
    excursions: Excursions = field(default_factory=Excursions)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def at(self, t: float) -> np.ndarray:
        """Values at recorded time ``t`` (paths × sites)."""
        idx = np.flatnonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))
        if idx.size == 0:
            raise DomainError(f"time {t} was not recorded")
        return self.values[:, idx[0], :]


def drift_matrix(sys: LatticeSystem) -> np.ndarray:
    """A with drift = A U: rows ``κ(Σ_{j∈K} p_ij U_j − U_i)`` on active sites, zero elsewhere."""
    act = sys.active.astype(float)
    A = sys.kappa * (sys.p * act[None, :] - np.eye(sys.n))
    return A * act[:, None]


def system_factor(sys: LatticeSystem) -> np.ndarray:
    """Noise factor L with L Lᵀ = Γ (pivoted Cholesky)."""
    return factorize(sys.gamma).L


def _step_grid(T: float, dt: float, record_times) -> tuple[int, np.ndarray, np.ndarray]:
    if not (T > 0 and dt > 0):
        raise DomainError("T and dt must be positive")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * T:
        raise DomainError(f"T = {T} is not a multiple of dt = {dt}")
    if record_times is None:
        idx = np.arange(n_steps + 1)
    else:
        rt = np.atleast_1d(np.asarray(record_times, dtype=float))
        idx = np.rint(rt / dt).astype(int)
        if np.any(np.abs(idx * dt - rt) > 1e-9 * np.maximum(1.0, rt)) or np.any(idx < 0) or np.any(idx > n_steps):
            raise DomainError("record times must lie on the step grid within [0, T]")
    return n_steps, idx, idx * dt


def check_stability(sys: LatticeSystem, dt: float, fraction: float = 0.1) -> None:
    """Require ``κ·dt ≤ fraction`` (equivalently dt ≤ fraction·ε when κ = 1/ε)."""
    if sys.kappa * dt > fraction * (1 + 1e-12):
        raise DomainError(f"dt = {dt:g} violates the stability cap kappa*dt <= {fraction:g} (kappa = {sys.kappa:g})")


def _run_chunk(sys, L, A, n_steps, rec_idx, dt, seed, path_ids, clamp, track_neg, u0_override=None):
    n_p = path_ids.size
    u0 = sys.u0 if u0_override is None else u0_override
    U = np.tile(u0, (n_p, 1))
    act = sys.active
    noisy = act.astype(float)
    out = np.empty((n_p, rec_idx.size, sys.n))
    exc = Excursions()
    rec_pos = {int(k): m for m, k in enumerate(rec_idx)}
    if 0 in rec_pos:
        out[:, rec_pos[0], :] = U
    rho = sys.rho
    zero_noise = np.all(L == 0) or (rho.kind == "linear" and rho.params["lam"] == 0) or \
        (rho.kind == "affine" and rho.params["a"] == 0 and rho.params["b"] == 0)
    At = A.T * dt
    n_act = int(act.sum())
    sd_unit = np.sqrt(np.maximum(np.sum(L * L, axis=1), 0.0) * dt)[act]
    for step in range(n_steps):
        if track_neg:
            drift_part = (U + U @ At)[:, act]
            spread = np.zeros_like(drift_part) if zero_noise else np.abs(rho(U)[:, act]) * sd_unit
            with np.errstate(divide="ignore", invalid="ignore"):
                pr = np.where(spread > 0, special.ndtr(-drift_part / spread), (drift_part < 0).astype(float))
            exc.expected += float(pr.sum())
        if zero_noise:
            U = U + U @ At
        else:
            dM = ensemble_increments(seed, path_ids, step, L, dt)
            U = U + U @ At + rho(U) * dM * noisy
        if clamp:
            np.maximum(U, 0.0, out=U)
        if not np.all(np.isfinite(U)):
            raise BlowUpError(f"state became non-finite at step {step + 1}", step + 1)
        if track_neg:
            neg = U[:, act] < 0
            c = int(neg.sum())
            exc.count += c
            exc.total += n_p * n_act
            if c:
                exc.min_value = min(exc.min_value, float(U[:, act].min()))
        m = rec_pos.get(step + 1)
        if m is not None:
            out[:, m, :] = U
    return out, exc


def simulate_ensemble(sys: LatticeSystem, T: float, dt: float, seed: int, n_paths: int, record_times=None,
                      path_offset: int = 0, threads: int | None = None, clamp: bool = False,
                      stability_fraction: float | None = 0.1, chunk: int = 8192) -> PathEnsemble:
    """Euler–Maruyama over paths ``path_offset .. path_offset + n_paths − 1``.

    Paths are simulated in independent chunks (optionally on several threads)
    and concatenated in path order, so the result does not depend on the
    thread count.  No positivity clamping unless ``clamp=True``.
    """
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    if stability_fraction is not None:
        check_stability(sys, dt, stability_fraction)
    n_steps, rec_idx, rec_t = _step_grid(T, dt, record_times)
    L = system_factor(sys)
    A = drift_matrix(sys)
    track = sys.rho.vanishes_at_zero and bool(np.all(sys.u0 >= 0))

    def work(ids):
        return _run_chunk(sys, L, A, n_steps, rec_idx, dt, seed, ids + np.uint64(path_offset), clamp, track)

    parts = map_path_chunks(work, n_paths, threads=threads, chunk=chunk)
    exc = Excursions()
    for _, e in parts:
        exc.merge(e)
    vals = np.concatenate([v for v, _ in parts], axis=0)
    return PathEnsemble(rec_t, vals, seed, path_offset, dt, exc)


def euler_maruyama(sys: LatticeSystem, T: float, dt: float, stream: NoiseStream, clamp: bool = False,
                   stability_fraction: float | None = 0.1) -> Trajectory:
    """One Euler–Maruyama path driven by ``stream``:

    ``U_{n+1} = U_n + κ(P U_n − U_n) dt + ρ(U_n) ΔM_n``  (left-point, Itô).
    """
    if abs(stream.dt - dt) > 1e-15 * dt:
        raise DomainError("stream dt differs from integration dt")
    if stability_fraction is not None:
        check_stability(sys, dt, stability_fraction)
    n_steps, rec_idx, rec_t = _step_grid(T, dt, None)
    L = stream.L
    if L.shape[0] != sys.n:
        raise DomainError("noise factor does not match the system size")
    track = sys.rho.vanishes_at_zero and bool(np.all(sys.u0 >= 0))
    vals, exc = _run_chunk(sys, L, drift_matrix(sys), n_steps, rec_idx, dt, stream.seed,
                           np.array([stream.path_id], dtype=np.uint64), clamp, track)
    return Trajectory(rec_t, vals[0], stream.seed, stream.path_id, exc)


def euler_with_increments(sys: LatticeSystem, dt: float, dM: np.ndarray) -> np.ndarray:
    """Euler–Maruyama driven by explicit increments ``dM`` (n_steps × n_sites).

    Returns the states at all step times, shape (n_steps + 1, n_sites).  Used
    for coupled refinement studies, where coarse increments are sums of fine
    ones.
    """
    dM = np.asarray(dM, dtype=float)
    if dM.ndim != 2 or dM.shape[1] != sys.n:
        raise DomainError("increments must have shape (n_steps, n_sites)")
    At = drift_matrix(sys).T * dt
    noisy = sys.active.astype(float)
    out = np.empty((dM.shape[0] + 1, sys.n))
    U = np.array(sys.u0, dtype=float)[None, :]
    out[0] = U[0]
    for m in range(dM.shape[0]):
        U = U + U @ At + sys.rho(U) * dM[m][None, :] * noisy
        out[m + 1] = U[0]
    return out


def noise_path(stream: NoiseStream, n_steps: int) -> np.ndarray:
    """ΔM for steps 0..n_steps−1 of one stream, shape (n_steps, n_sites)."""
    ids = np.array([stream.path_id], dtype=np.uint64)
    return np.stack([ensemble_increments(stream.seed, ids, s, stream.L, stream.dt)[0] for s in range(n_steps)])


# --------------------------------------------------------------------------
# Picard reference
# --------------------------------------------------------------------------

@dataclass
class PicardReport:
    converged: bool
    iterations: int
    sup_differences: list
    ratios: list


def picard_reference(sys: LatticeSystem, T: float, dt: float, stream: NoiseStream, iterations: int = 60,
                     tol: float = 1e-13) -> tuple[Trajectory, PicardReport]:
    """Picard iteration on the fixed discretized noise path.

    Each iterate solves the linear drift exactly (variation of constants on
    the step grid) with the previous iterate inside the stochastic integral:

    ``U⁽ⁿ⁺¹⁾_{m+1} = E (U⁽ⁿ⁺¹⁾_m + ρ(U⁽ⁿ⁾_m) ΔM_m)``,  ``E = exp(A dt)``,

    starting from ``U⁽⁰⁾ ≡ u0``.  The fixed point is the exponential-Euler
    discretization of the strong equation; its distance to Euler–Maruyama is
    O(dt).  Limited to 16 sites.
    """
    if sys.n > 16:
        raise DomainError("picard_reference is limited to 16 sites")
    n_steps, _, times = _step_grid(T, dt, None)
    A = drift_matrix(sys)
    E = linalg.expm(A * dt)
    dM = noise_path(stream, n_steps) * sys.active[None, :]
    U = np.tile(sys.u0, (n_steps + 1, 1))
    diffs: list[float] = []
    converged = False
    scale = max(1.0, float(np.max(np.abs(sys.u0))))
    for it in range(1, iterations + 1):
        new = np.empty_like(U)
        new[0] = sys.u0
        g = sys.rho(U[:-1]) * dM
        for m in range(n_steps):
            new[m + 1] = E @ (new[m] + g[m])
        if not np.all(np.isfinite(new)):
            raise BlowUpError("Picard iterate became non-finite", it)
        diffs.append(float(np.max(np.abs(new - U))))
        U = new
        if diffs[-1] <= tol * scale:
            converged = True
            break
    ratios = [b / a for a, b in zip(diffs[:-1], diffs[1:]) if a > 0]
    traj = Trajectory(times, U, stream.seed, stream.path_id)
    return traj, PicardReport(converged, len(diffs), diffs, ratios)


# --------------------------------------------------------------------------
# subsystems and diagnostics
# --------------------------------------------------------------------------

def restrict_system(sys: LatticeSystem, K_m) -> LatticeSystem:
    """Finite subsystem on ``K_m``: sites in ``K_m`` evolve with drift
    ``κ(Σ_{j∈K_m} p_ij U_j − U_i)``; all other sites stay frozen at u0."""
    keys = [tuple(int(v) for v in np.atleast_1d(s)) for s in K_m]
    act = np.zeros(sys.n, bool)
    for k in keys:
        act[sys.site_index(k)] = True
    return sys.with_(active=act & sys.active)


@dataclass
class LkReport:
    k: int
    estimate: float  # sup over recorded times of the MC mean of ||U(t)||_k^k
    std_error: float
    bound: float
    beta: float
    beta_star: float
    passed: bool
    z: float


def lk_bound_beta(sys: LatticeSystem, k: int) -> tuple[float, float]:
    """(β = 6(3γ(0)k²Lip² + κk), exact root β*) for the ℓᵏ moment bound."""
    g0 = float(np.max(np.diag(sys.gamma)))
    lip = sys.rho.lip_estimate
    kap = sys.kappa
    a = 3 * g0 * k * k * lip * lip
    beta = 6 * (a + kap * k)
    if a == 0 and kap == 0:  # pragma: no cover - kappa > 0 always
        return beta, 0.0
    beta_star = 2 * 3 ** (1 - 2 / k) * (a ** (k / 2) + math.sqrt(6 * (kap * k) ** k + a**k)) ** (2 / k)
    return beta, beta_star


def lk_moment_diagnostic(ensemble: PathEnsemble, k: int, T: float, sys: LatticeSystem,
                         z_threshold: float = 2.326) -> LkReport:
    """Compare the Monte Carlo estimate of sup_t E‖U(t)‖ᵏ_{ℓᵏ} with
    ``3ᵏ‖u0‖ᵏ_{ℓᵏ} exp(βT)``; passes unless the estimate exceeds the bound
    by more than ``z_threshold`` standard errors (99% one-sided by default)."""
    if k < 2 or k % 2:
        raise DomainError("k must be an even integer >= 2")
    norms = np.sum(np.abs(ensemble.values) ** k, axis=2)  # (paths, times)
    mean = norms.mean(axis=0)
    se = norms.std(axis=0, ddof=1) / math.sqrt(norms.shape[0]) if norms.shape[0] > 1 else np.zeros_like(mean)
    j = int(np.argmax(mean))
    beta, beta_star = lk_bound_beta(sys, k)
    bound = 3.0**k * float(np.sum(np.abs(sys.u0) ** k)) * math.exp(beta * T)
    z = (mean[j] - bound) / se[j] if se[j] > 0 else (-math.inf if mean[j] <= bound else math.inf)
    return LkReport(k, float(mean[j]), float(se[j]), bound, beta, beta_star, bool(z <= z_threshold), float(z))
