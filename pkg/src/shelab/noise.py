"""Correlated Brownian increments on finite site sets.

Increments are ``ΔM = L z √dt`` where ``L Lᵀ = Γ`` and ``z`` is a standard
normal vector drawn from a counter-based generator.

Keying contract (stable across versions)
----------------------------------------
Normal number ``2b + r`` (``r ∈ {0, 1}``) of step ``step`` on path ``path_id``
under seed ``seed`` is produced by one Philox4x32-10 block with

* key     = (seed & 0xffffffff, seed >> 32)
* counter = (b, step, path_id & 0xffffffff, path_id >> 32)

The four output words ``(x0, x1, x2, x3)`` form two 64-bit integers
``v_r = x_{2r+1} << 32 | x_{2r}``; the uniform ``u_r = ((v_r >> 11) + 1/2)·2⁻⁵³``
lies strictly inside (0, 1) and ``z_r = Φ⁻¹(u_r)``.  Every variate is a pure
function of ``(seed, path_id, step, index)``; thread scheduling cannot change it.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError, NumericalError

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_ROUNDS = 10


def philox4x32(counter, key, rounds: int = _ROUNDS) -> np.ndarray:
    """Philox4x32 block function, vectorized.

    Parameters
    ----------
    counter : array_like of uint32, shape (..., 4)
    key : array_like of uint32, shape (..., 2), broadcastable against ``counter``

    Returns
    -------
    ndarray of uint32, shape (..., 4)
    """
    ctr = np.asarray(counter, dtype=np.uint32)
    key = np.asarray(key, dtype=np.uint32)
    c0, c1, c2, c3 = (ctr[..., i] for i in range(4))
    k0 = np.broadcast_to(key[..., 0], c0.shape).copy()
    k1 = np.broadcast_to(key[..., 1], c0.shape).copy()
    for r in range(rounds):
        if r:
            k0 += _W0
            k1 += _W1
        p0 = c0.astype(np.uint64) * _M0
        p1 = c2.astype(np.uint64) * _M1
        hi0 = (p0 >> _S32).astype(np.uint32)
        lo0 = (p0 & _MASK32).astype(np.uint32)
        hi1 = (p1 >> _S32).astype(np.uint32)
        lo1 = (p1 & _MASK32).astype(np.uint32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _split64(v) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=np.uint64)
    return (v & _MASK32).astype(np.uint32), (v >> _S32).astype(np.uint32)


def _uniform_pairs(words: np.ndarray) -> np.ndarray:
    """Map (..., 4) uint32 words to (..., 2) uniforms in the open unit interval."""
    w = words.astype(np.uint64)
    v0 = (w[..., 1] << _S32) | w[..., 0]
    v1 = (w[..., 3] << _S32) | w[..., 2]
    v = np.stack([v0, v1], axis=-1)
    return ((v >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(seed: int, path_ids, step: int, n: int) -> np.ndarray:
    """Standard normals for ``path_ids`` (1-d) at ``step``, shape (len(path_ids), n)."""
    if not (0 <= seed < 2**64):
        raise DomainError("seed must be a 64-bit unsigned integer")
    if not (0 <= step < 2**32):
        raise DomainError("step index must fit in 32 bits")
    paths = np.atleast_1d(np.asarray(path_ids, dtype=np.uint64))
    nblk = (n + 1) // 2
    p_lo, p_hi = _split64(paths)
    ctr = np.empty((paths.size, nblk, 4), dtype=np.uint32)
    ctr[..., 0] = np.arange(nblk, dtype=np.uint32)[None, :]
    ctr[..., 1] = np.uint32(step)
    ctr[..., 2] = p_lo[:, None]
    ctr[..., 3] = p_hi[:, None]
    s_lo, s_hi = _split64(np.uint64(seed))
    key = np.array([s_lo, s_hi], dtype=np.uint32)
    u = _uniform_pairs(philox4x32(ctr, key)).reshape(paths.size, 2 * nblk)[:, :n]
    return special.ndtri(u)


def default_threads() -> int:
    """Worker count from the ``SHELAB_THREADS`` environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("SHELAB_THREADS", "1")))
    except ValueError:
        return 1


def map_path_chunks(fn, n_paths: int, threads: int | None = None, chunk: int = 8192) -> list:
    """Apply ``fn(path_ids)`` over contiguous chunks of ``range(n_paths)``.

    Results come back in path order regardless of ``threads``, so any
    reduction over them is deterministic.
    """
    threads = default_threads() if threads is None else max(1, int(threads))
    chunks = [np.arange(s, min(s + chunk, n_paths), dtype=np.uint64) for s in range(0, n_paths, chunk)]
    if threads == 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


# --------------------------------------------------------------------------
# covariance assembly, repair and factorization
# --------------------------------------------------------------------------

def _as_site(s) -> tuple:
    return tuple(int(v) for v in np.atleast_1d(s))


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    """Site covariance Γ with its repair log (``max_clip``, ``n_clipped``)."""

    sites: tuple
    matrix: np.ndarray
    repair_log: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] != len(self.sites):
            raise DomainError("covariance must be square and match the site list")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


def assemble_covariance(gamma, sites) -> CovarianceMatrix:
    """Dense Γ with ``Γ_ij = γ(i - j)``.

    ``gamma`` is either a mapping from offsets (ints or integer tuples, absent
    offsets meaning 0) or a callable on integer-tuple offsets.
    """
    sites = tuple(_as_site(s) for s in sites)
    if callable(gamma):
        g = gamma
    else:
        table = {_as_site(k): float(v) for k, v in dict(gamma).items()}
        g = lambda off: table.get(off, 0.0)
    n = len(sites)
    arr = np.array(sites, dtype=int).reshape(n, -1)
    cache: dict = {}
    m = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            off = tuple((arr[i] - arr[j]).tolist())
            if off not in cache:
                cache[off] = float(g(off))
            m[i, j] = cache[off]
    if not np.allclose(m, m.T, rtol=0, atol=1e-14 * max(1.0, np.max(np.abs(m)))):
        raise DomainError("gamma is not symmetric: γ(m) != γ(-m)")
    return CovarianceMatrix(sites, 0.5 * (m + m.T))


def psd_repair(gamma_matrix, tol: float = 1e-8) -> CovarianceMatrix:
    """Clip negative eigenvalues of a symmetric matrix to zero.

    Raises
    ------
    NumericalError
        If the largest clipped eigenvalue exceeds ``tol · trace`` (the
        matrix is genuinely indefinite, not merely perturbed by round-off).
    """
    cm = gamma_matrix if isinstance(gamma_matrix, CovarianceMatrix) else None
    m = np.asarray(cm.matrix if cm is not None else gamma_matrix, dtype=float)
    sites = cm.sites if cm is not None else tuple((i,) for i in range(m.shape[0]))
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(m)))):
        raise DomainError("psd_repair needs a symmetric matrix")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    neg = w < 0
    if not np.any(neg):
        return CovarianceMatrix(sites, m, {})
    max_clip = float(-w[neg].min())
    scale = max(float(np.trace(m)), np.finfo(float).tiny)
    if max_clip > tol * scale:
        raise NumericalError(f"matrix is not PSD: eigenvalue {-max_clip:.3g} exceeds tolerance {tol:g}·trace",
                             residual=max_clip)
    repaired = (v * np.where(neg, 0.0, w)) @ v.T
    return CovarianceMatrix(sites, 0.5 * (repaired + repaired.T), {"max_clip": max_clip, "n_clipped": int(neg.sum())})


@dataclass(frozen=True, eq=False)
class Factor:
    """``L`` with ``L Lᵀ = Γ`` (rows in the original site order).

    ``L[perm]`` is lower triangular; columns past ``rank`` are zero.
    """

    L: np.ndarray
    perm: np.ndarray
    rank: int


def factorize(gamma, rel_tol: float = 1e-14) -> Factor:
    """Diagonally pivoted Cholesky factorization of a PSD matrix.

    The pivot is the largest remaining diagonal entry (first index on ties);
    the factorization stops once that entry drops below ``rel_tol · trace``,
    leaving zero columns for the null space.
    """
    m = np.asarray(gamma.matrix if isinstance(gamma, CovarianceMatrix) else gamma, dtype=float)
    n = m.shape[0]
    a = m.copy()
    perm = np.arange(n)
    L = np.zeros((n, n))
    thresh = rel_tol * max(float(np.trace(m)), np.finfo(float).tiny)
    rank = 0
    for k in range(n):
        diag = np.diag(a)[k:] - np.sum(L[k:, :k] ** 2, axis=1)
        j = k + int(np.argmax(diag))
        if diag[j - k] <= thresh:
            break
        if j != k:
            a[[k, j]] = a[[j, k]]
            a[:, [k, j]] = a[:, [j, k]]
            L[[k, j]] = L[[j, k]]
            perm[[k, j]] = perm[[j, k]]
        piv = np.sqrt(diag[j - k])
        L[k, k] = piv
        L[k + 1:, k] = (a[k + 1:, k] - L[k + 1:, :k] @ L[k, :k]) / piv
        rank += 1
    out = np.empty_like(L)
    out[perm] = L
    recon = out @ out.T
    err = np.linalg.norm(recon - m) / max(np.linalg.norm(m), np.finfo(float).tiny)
    if err > 1e-10:
        raise NumericalError(f"factorization residual {err:.3g} exceeds 1e-10 (matrix not PSD?)", residual=err)
    out.setflags(write=False)
    return Factor(out, perm, rank)


# --------------------------------------------------------------------------
# streams
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseStream:
    """Increment stream of one path: ``(seed, path_id)`` plus the factor and dt."""

    seed: int
    path_id: int
    factor: Factor | np.ndarray
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if not (0 <= self.path_id < 2**64):
            raise DomainError("path_id must be a 64-bit unsigned integer")

    @property
    def L(self) -> np.ndarray:
        return self.factor.L if isinstance(self.factor, Factor) else np.asarray(self.factor)


def sample_increments(stream: NoiseStream, step: int) -> np.ndarray:
    """ΔM for one step of one path: ``L z √dt``."""
    L = stream.L
    z = standard_normals(stream.seed, [stream.path_id], step, L.shape[1])[0]
    return (L @ z) * np.sqrt(stream.dt)


def ensemble_increments(seed: int, path_ids, step: int, L: np.ndarray, dt: float) -> np.ndarray:
    """Increments for many paths at once, shape (len(path_ids), n_sites)."""
    z = standard_normals(seed, path_ids, step, L.shape[1])
    return (z @ L.T) * np.sqrt(dt)


def sample_covariance_se(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariance of rows of ``x`` (n, m) and the entrywise standard error."""
    n = x.shape[0]
    c = x - x.mean(axis=0)
    cov = c.T @ c / (n - 1)
    prod = c[:, :, None] * c[:, None, :]
    se = prod.std(axis=0, ddof=1) / np.sqrt(n)
    return cov, se
