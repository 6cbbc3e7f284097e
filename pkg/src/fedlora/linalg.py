"""Small dense linear algebra kernel.

Matrices are plain two-dimensional ``float64`` numpy arrays.  The two
iterative kernels (one-sided Jacobi SVD and modified Gram-Schmidt) have a
scalar-loop implementation compiled with numba and a vectorised numpy
fallback; which one runs is decided once at import time (see ``_jit``).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from fedlora._jit import USE_JIT, njit
from fedlora.errors import ContractError, NumericalError

MAX_SWEEPS = 100
SVD_NULL_TOL = 1e-18
QR_DROP_TOL = 1e-10
RANK_REL_TOL = 1e-9

_EPS = np.finfo(np.float64).eps


class SvdFactors(NamedTuple):
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array or raise ContractError."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


# --------------------------------------------------------------------------
# Modified Gram-Schmidt with one re-orthogonalisation pass
# --------------------------------------------------------------------------


@njit
def _mgs_loops(cols, drop_tol):
    # cols: (n, m), row j holds column j of the input
    n, m = cols.shape
    q = np.zeros((n, m))
    r = np.zeros((n, n))
    k = 0
    v = np.empty(m)
    for j in range(n):
        for t in range(m):
            v[t] = cols[j, t]
        for _ in range(2):
            for i in range(k):
                c = 0.0
                for t in range(m):
                    c += q[i, t] * v[t]
                for t in range(m):
                    v[t] -= c * q[i, t]
                r[i, j] += c
        nrm = 0.0
        for t in range(m):
            nrm += v[t] * v[t]
        nrm = np.sqrt(nrm)
        if nrm > drop_tol:
            for t in range(m):
                q[k, t] = v[t] / nrm
            r[k, j] = nrm
            k += 1
    return q, r, k


def _mgs_numpy(cols, drop_tol):
    # right-looking MGS: each new basis vector is swept out of all later
    # columns at once; a classical pass against the existing basis re-orthogonalises
    n, m = cols.shape
    x = cols.copy()
    q = np.zeros((n, m))
    r = np.zeros((n, n))
    k = 0
    for j in range(n):
        v = x[j]
        if k:
            c = q[:k] @ v
            v = v - c @ q[:k]
            r[:k, j] += c
        nrm = np.sqrt(v @ v)
        if nrm <= drop_tol:
            continue
        qk = v / nrm
        q[k] = qk
        r[k, j] = nrm
        if j + 1 < n:
            coeff = x[j + 1 :] @ qk
            x[j + 1 :] -= np.outer(coeff, qk)
            r[k, j + 1 :] += coeff
        k += 1
    return q, r, k


def gram_schmidt_qr(m, drop_tol: float = QR_DROP_TOL, *, use_jit: bool | None = None):
    """Rank-revealing QR by modified Gram-Schmidt.

    Columns whose orthogonal remainder falls below ``drop_tol * ||m||_F`` are
    dropped, so ``q`` has as many columns as ``m`` has numerical rank and
    ``r`` is ``(rank, n)``.  Returns ``(q, r)`` with ``q @ r ~= m``.
    """
    m = as_matrix(m)
    tol = drop_tol * frobenius_norm(m)
    cols = np.ascontiguousarray(m.T)
    kernel = _mgs_loops if (USE_JIT if use_jit is None else use_jit) else _mgs_numpy
    q, r, k = kernel(cols, tol)
    return np.ascontiguousarray(q[:k].T), r[:k].copy()


# --------------------------------------------------------------------------
# One-sided (Hestenes) Jacobi SVD
# --------------------------------------------------------------------------


@njit
def _jacobi_loops(g, v, null_tol2, rel_tol, max_sweeps):
    # Orthogonalises the rows of g in place, applying the same rotations to v.
    # Returns the number of sweeps used, or -1 if the cap was hit.
    p, length = g.shape
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(p - 1):
            for j in range(i + 1, p):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for t in range(length):
                    alpha += g[i, t] * g[i, t]
                    beta += g[j, t] * g[j, t]
                    gamma += g[i, t] * g[j, t]
                if alpha <= null_tol2 or beta <= null_tol2:
                    continue
                if abs(gamma) <= rel_tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                tan = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    tan = 1.0
                cos = 1.0 / np.sqrt(1.0 + tan * tan)
                sin = cos * tan
                for t in range(length):
                    gi = g[i, t]
                    gj = g[j, t]
                    g[i, t] = cos * gi - sin * gj
                    g[j, t] = sin * gi + cos * gj
                for t in range(p):
                    vi = v[i, t]
                    vj = v[j, t]
                    v[i, t] = cos * vi - sin * vj
                    v[j, t] = sin * vi + cos * vj
        if not rotated:
            return sweep + 1
    return -1


def _round_robin(p):
    """Tournament schedule: p-1 rounds (p even) of p/2 disjoint pairs."""
    players = list(range(p))
    rounds = []
    for _ in range(p - 1):
        half = p // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_numpy(g, v, null_tol2, rel_tol, max_sweeps):
    p = g.shape[0]
    if p < 2:
        return 1
    padded = p + (p % 2)
    schedule = []
    for top, bot in _round_robin(padded):
        keep = (top < p) & (bot < p)
        schedule.append((top[keep], bot[keep]))
    for sweep in range(max_sweeps):
        rotated = False
        for i, j in schedule:
            gi, gj = g[i], g[j]
            alpha = np.einsum("ij,ij->i", gi, gi)
            beta = np.einsum("ij,ij->i", gj, gj)
            gamma = np.einsum("ij,ij->i", gi, gj)
            act = (alpha > null_tol2) & (beta > null_tol2)
            act &= np.abs(gamma) > rel_tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            i, j = i[act], j[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            tan = np.where(zeta == 0.0, 1.0, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)))
            cos = 1.0 / np.sqrt(1.0 + tan * tan)
            sin = (cos * tan)[:, None]
            cos = cos[:, None]
            gi, gj = g[i], g[j]
            g[i] = cos * gi - sin * gj
            g[j] = sin * gi + cos * gj
            vi, vj = v[i], v[j]
            v[i] = cos * vi - sin * vj
            v[j] = sin * vi + cos * vj
        if not rotated:
            return sweep + 1
    return -1


def _complete_basis(basis: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Fill the columns flagged in ``missing`` with unit vectors orthogonal to the rest."""
    out = basis.copy()
    dim = out.shape[0]
    have = [out[:, c] for c in range(out.shape[1]) if not missing[c]]
    for c in np.flatnonzero(missing):
        best, best_norm = None, -1.0
        for e in range(dim):
            cand = np.zeros(dim)
            cand[e] = 1.0
            for _ in range(2):
                for h in have:
                    cand -= (h @ cand) * h
            nrm = np.sqrt(cand @ cand)
            if nrm > best_norm:
                best, best_norm = cand, nrm
            if nrm > 0.5:
                break
        best = best / best_norm
        out[:, c] = best
        have.append(best)
    return out


def svd(m, *, max_sweeps: int = MAX_SWEEPS, use_jit: bool | None = None) -> SvdFactors:
    """Thin SVD ``m = u @ diag(sigma) @ vt`` by one-sided Jacobi rotations.

    ``u`` is ``(rows, p)``, ``sigma`` has length ``p`` and ``vt`` is
    ``(p, cols)`` with ``p = min(rows, cols)``.  Singular values are sorted in
    non-increasing order.  Raises NumericalError if ``max_sweeps`` sweeps do
    not converge.
    """
    m = as_matrix(m)
    rows, cols = m.shape
    if rows < 1 or cols < 1:
        raise ContractError(f"svd needs a non-empty matrix, got {m.shape}")
    tall = rows >= cols
    # rows of g are the columns being orthogonalised
    g = np.ascontiguousarray(m.T if tall else m, dtype=np.float64).copy()
    p, length = g.shape
    v = np.eye(p)
    norm = frobenius_norm(m)
    null_tol = SVD_NULL_TOL * norm
    rel_tol = max(length, 1) * _EPS
    kernel = _jacobi_loops if (USE_JIT if use_jit is None else use_jit) else _jacobi_numpy
    sweeps = kernel(g, v, null_tol * null_tol, rel_tol, max_sweeps)
    if sweeps < 0:
        raise NumericalError("one-sided Jacobi SVD did not converge", max_sweeps)

    sigma = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[order]
    v = v[order]
    null = sigma <= null_tol
    safe = np.where(null, 1.0, sigma)
    left = (g / safe[:, None]).T
    if null.any():
        left = _complete_basis(left, null)
    if tall:
        return SvdFactors(left, sigma, v)
    return SvdFactors(np.ascontiguousarray(v.T), sigma, np.ascontiguousarray(left.T))


def best_rank_approx(m, r_target: int) -> np.ndarray:
    """Frobenius-optimal rank-``r_target`` approximation via truncated SVD."""
    m = as_matrix(m)
    if r_target < 0 or r_target > min(m.shape):
        raise ContractError(f"target rank {r_target} outside [0, {min(m.shape)}]")
    if r_target == 0:
        return np.zeros_like(m)
    u, s, vt = svd(m)
    return (u[:, :r_target] * s[:r_target]) @ vt[:r_target]


def numerical_rank(m, rel_tol: float = RANK_REL_TOL) -> int:
    if rel_tol <= 0:
        raise ContractError("rel_tol must be positive")
    m = as_matrix(m)
    if not np.any(m):
        return 0
    s = svd(m).sigma
    return int(np.count_nonzero(s > rel_tol * s[0]))
