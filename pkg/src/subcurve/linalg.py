"""Dense kernels: orthonormalisation, numerical rank, symmetric eigensystems and
maximum-weight linear assignment.

Matrices are plain float64 numpy arrays. Vector sequences are 2-D arrays with
one vector per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_RANK_TOL = 1e-6
JACOBI_MAX_DIM = 64


class LinalgError(ValueError):
    pass


@dataclass(frozen=True)
class EigenSystem:
    """Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.

    ``vectors[:, i]`` is the unit eigenvector paired with ``values[i]``.
    """

    values: np.ndarray
    vectors: np.ndarray

    def top(self, k: int) -> "EigenSystem":
        k = min(k, self.values.shape[0])
        return EigenSystem(self.values[:k].copy(), self.vectors[:, :k].copy())

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise LinalgError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise LinalgError("matrix has non-finite entries")
    return a


def gram_schmidt(vectors, drop_tol: float = 1e-10, return_kept: bool = False):
    """Orthonormalise ``vectors`` in order, dropping near-dependent ones.

    Modified Gram-Schmidt with one re-orthogonalisation pass. A vector is
    dropped when its residual norm after projection falls below ``drop_tol``.
    With ``return_kept`` the input positions of the surviving vectors are
    returned as well.
    """
    if drop_tol <= 0:
        raise LinalgError("drop_tol must be positive")
    rows = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if not rows:
        return (np.empty((0, 0)), []) if return_kept else np.empty((0, 0))
    dim = rows[0].shape[0]
    if any(r.shape[0] != dim for r in rows):
        raise LinalgError("all vectors must have the same dimension")
    basis: list[np.ndarray] = []
    kept: list[int] = []
    for i, r in enumerate(rows):
        w = r.copy()
        for _ in range(2):
            for q in basis:
                w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm < drop_tol:
            continue
        basis.append(w / norm)
        kept.append(i)
    out = np.vstack(basis) if basis else np.empty((0, dim))
    return (out, kept) if return_kept else out


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi rotations until off(A) < tol * ||diag(A)||."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * np.linalg.norm(np.diag(a)) or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    t = apq / diff  # small-angle limit, avoids overflow in theta^2
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise LinalgError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.diag(a).copy(), v


def _canonical_signs(vectors: np.ndarray) -> np.ndarray:
    # first component with |x| > 1e-12 made positive, for reproducible reports
    out = vectors.copy()
    for i in range(out.shape[1]):
        col = out[:, i]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            out[:, i] = -col
    return out


def sym_eig(m, method: str = "auto") -> EigenSystem:
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    ``method`` is ``"jacobi"``, ``"lapack"`` or ``"auto"`` (Jacobi up to
    ``JACOBI_MAX_DIM`` rows, LAPACK above). The input is symmetrised first.
    """
    a = _as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise LinalgError(f"sym_eig needs a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    if n == 0:
        return EigenSystem(np.empty(0), np.empty((0, 0)))
    if method == "auto":
        method = "jacobi" if n <= JACOBI_MAX_DIM else "lapack"
    if method == "jacobi":
        values, vectors = _jacobi_eigh(a)
    elif method == "lapack":
        values, vectors = np.linalg.eigh(a)
    else:
        raise LinalgError(f"unknown eigen method {method!r}")
    order = np.argsort(-values, kind="stable")
    return EigenSystem(values[order], _canonical_signs(vectors[:, order]))


def singular_values(m) -> np.ndarray:
    """Singular values, descending, from the eigenvalues of the smaller Gram matrix."""
    a = _as_matrix(m)
    if a.size == 0:
        return np.empty(0)
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    ev = sym_eig(gram).values
    return np.sqrt(np.clip(ev, 0.0, None))


def numerical_rank(m, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``rel_tol * sigma_max``."""
    if not 0.0 < rel_tol < 1.0:
        raise LinalgError("rel_tol must lie in (0, 1)")
    sv = singular_values(m)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * sv[0]))


def _min_cost_assignment(cost: np.ndarray) -> list[int]:
    """Shortest augmenting path Hungarian method (potentials), O(n^3)."""
    n = cost.shape[0]
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = [0] * n
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    return assignment


def _best_total(score: np.ndarray) -> float:
    if score.shape[0] == 0:
        return 0.0
    perm = _min_cost_assignment(-score)
    return float(sum(score[i, j] for i, j in enumerate(perm)))


def hungarian_max(score) -> tuple[list[int], float]:
    """Permutation maximising ``sum(score[i, perm[i]])``.

    Among optimal permutations the lexicographically smallest is returned, so
    ties resolve the same way on every run.
    """
    s = _as_matrix(score)
    n = s.shape[0]
    if s.shape[1] != n:
        raise LinalgError(f"hungarian_max needs a square score matrix, got {s.shape}")
    if n == 0:
        return [], 0.0
    best = _best_total(s)
    tol = 1e-9 * n * max(1.0, float(np.max(np.abs(s))))
    rows = list(range(n))
    free_cols = list(range(n))
    chosen: list[int] = []
    fixed = 0.0
    for i in rows:
        rest_rows = rows[i + 1:]
        for j in sorted(free_cols):
            rest_cols = [c for c in free_cols if c != j]
            sub = s[np.ix_(rest_rows, rest_cols)]
            if fixed + s[i, j] + _best_total(sub) >= best - tol:
                chosen.append(j)
                fixed += s[i, j]
                free_cols.remove(j)
                break
    total = float(sum(s[i, j] for i, j in enumerate(chosen)))
    return chosen, total

