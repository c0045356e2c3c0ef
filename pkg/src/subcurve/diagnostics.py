"""Measurements around the low-rank curvature model.

Covers the quadratic gradient-descent testbed, exact Gauss-Newton Hessians
assembled from logit gradients, the quality of the rank-C approximation,
logit-gradient residuals and the overlap between class-gradient directions
and the top Hessian eigenvectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import DENSE_PARAM_CAP, Tape
from .curvature import LowRankHessian
from .linalg import DEFAULT_RANK_TOL, EigenSystem, hungarian_max, singular_values, sym_eig
from .model import ModelSpec, param_count

SCHEMA = "diag-v1"


@dataclass(frozen=True)
class QuadraticProblem:
    hessian: np.ndarray
    minimum: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hessian, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] != np.shape(self.minimum)[0]:
            raise ValueError("hessian must be square and match the minimum's dimension")
        if np.max(np.abs(h - h.T)) > 1e-12 * max(1.0, np.max(np.abs(h))):
            raise ValueError("hessian is not symmetric")
        if sym_eig(h).values[-1] <= 0:
            raise ValueError("hessian is not positive definite")

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, low: float = 0.1, high: float = 10.0):
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        lam = rng.uniform(low, high, n)
        h = (q * lam) @ q.T
        return cls(0.5 * (h + h.T), rng.standard_normal(n))

    @property
    def lambda_max(self) -> float:
        return float(sym_eig(self.hessian).values[0])


def quadratic_gd_trajectory(p: QuadraticProblem, theta0, eta: float, steps: int) -> np.ndarray:
    """Distances to the minimum for ``steps`` gradient steps (entry 0 is the start)."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    theta = np.array(theta0, dtype=np.float64)
    out = np.empty(steps + 1)
    out[0] = np.linalg.norm(theta - p.minimum)
    for t in range(1, steps + 1):
        theta = theta - eta * p.hessian @ (theta - p.minimum)
        out[t] = np.linalg.norm(theta - p.minimum)
    return out


def quadratic_closed_form(p: QuadraticProblem, theta0, eta: float, steps: int) -> np.ndarray:
    """``sqrt(sum_i (1 - eta lambda_i)^(2t) (v_i . delta_0)^2)`` from the eigensystem."""
    eig = sym_eig(p.hessian)
    coords = eig.vectors.T @ (np.asarray(theta0, dtype=np.float64) - p.minimum)
    factors = 1.0 - eta * eig.values
    t = np.arange(steps + 1)[:, None]
    return np.sqrt(np.sum((factors[None, :] ** (2 * t)) * coords[None, :] ** 2, axis=1))


def gauss_newton_from_jacobian(jac: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """``(1/|B|) sum_mu J_mu^T (diag p - p p^T) J_mu`` with ``J_mu`` of shape (C, N)."""
    b, c, n = jac.shape
    a = np.einsum("bk,kl->bkl", probs, np.eye(c)) - np.einsum("bk,bl->bkl", probs, probs)
    weighted = np.einsum("bkl,bln->bkn", a, jac).reshape(b * c, n)
    h = jac.reshape(b * c, n).T @ weighted / b
    return 0.5 * (h + h.T)


def _check_cap(spec: ModelSpec, cap: int) -> None:
    n = param_count(spec)
    if n > cap:
        raise ValueError(f"{n} parameters exceeds the dense cap of {cap}")


def gauss_newton_hessian(spec: ModelSpec, theta, x, labels, cap: int = DENSE_PARAM_CAP):
    _check_cap(spec, cap)
    tape = Tape(spec, theta, x, labels)
    return gauss_newton_from_jacobian(tape.jacobian(), tape.forward.probs)


def principal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between the row spaces of ``a`` and ``b``."""
    qa, _ = np.linalg.qr(np.atleast_2d(a).T)
    qb, _ = np.linalg.qr(np.atleast_2d(b).T)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.sort(np.arccos(np.clip(s, -1.0, 1.0)))


def low_rank_error(gn: np.ndarray, h: LowRankHessian) -> dict:
    """Relative Frobenius error of ``h`` against a dense Hessian, and the largest
    principal angle between ``span{v_k}`` and the matching top eigenspace."""
    diff = h.dense() - gn
    denom = np.linalg.norm(gn)
    rel = float(np.linalg.norm(diff) / denom) if denom > 0 else float(np.linalg.norm(diff))
    angle = 0.0
    if h.rank:
        top = sym_eig(gn).vectors[:, : h.rank].T
        angle = float(principal_angles(h.directions, top)[-1])
    return {"frobenius_rel_error": rel, "top_subspace_angle": angle}


def logit_residuals(logit_grads: np.ndarray, labels, class_grads) -> dict:
    """Residuals of ``grad z_k = y_k c_k + eps_k``, relative to ``|c_k|``.

    Statistics are split into examples of class k ("within") and the rest
    ("other", where ``eps_k`` is the whole logit gradient).
    """
    labels = np.asarray(labels)
    b, c, _ = logit_grads.shape
    per_class = []
    for k in range(c):
        ck = class_grads[k]
        if ck is None:
            per_class.append(None)
            continue
        ck = np.asarray(ck)
        norm = float(np.linalg.norm(ck))
        y = (labels == k).astype(np.float64)
        eps = logit_grads[:, k] - y[:, None] * ck
        rel = np.linalg.norm(eps, axis=1) / (norm if norm > 0 else 1.0)
        within = rel[labels == k]
        other = rel[labels != k]
        per_class.append({
            "class": k,
            "within_mean": float(within.mean()) if within.size else 0.0,
            "within_max": float(within.max()) if within.size else 0.0,
            "other_mean": float(other.mean()) if other.size else 0.0,
            "other_max": float(other.max()) if other.size else 0.0,
            "within_mean_residual_norm": (
                float(np.linalg.norm(eps[labels == k].mean(axis=0))) if within.size else 0.0
            ),
        })
    return {"per_class": per_class}


@dataclass
class OverlapReport:
    cosine_matrix: list
    assignment: list
    assignment_score: float
    combined_rank: int
    combined_singular_values: list
    rank_per_batch: list = field(default_factory=list)
    residual_stats: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_rows(vectors) -> np.ndarray:
    v = np.vstack([np.asarray(x, dtype=np.float64) for x in vectors])
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def combined_rank(directions: np.ndarray, eig_top: np.ndarray, rel_tol: float) -> tuple[int, np.ndarray]:
    """Numerical rank of ``[v_1..v_C | e_1..e_C]`` and its singular values."""
    m = np.hstack([directions.T, eig_top])
    sv = singular_values(m)
    rank = 0 if sv.size == 0 or sv[0] == 0 else int(np.count_nonzero(sv > rel_tol * sv[0]))
    return rank, sv


def subspace_overlap(class_grads, eig: EigenSystem, rel_tol: float = DEFAULT_RANK_TOL) -> OverlapReport:
    v = _unit_rows(class_grads)
    c = v.shape[0]
    if eig.vectors.shape[1] < c:
        raise ValueError(f"need at least {c} eigenvectors, got {eig.vectors.shape[1]}")
    e = eig.vectors[:, :c]
    cos = np.abs(v @ e)
    assignment, total = hungarian_max(cos)
    rank, sv = combined_rank(v, e, rel_tol)
    return OverlapReport(
        cosine_matrix=cos.tolist(),
        assignment=assignment,
        assignment_score=total / c,
        combined_rank=rank,
        combined_singular_values=sv.tolist(),
    )


def rank_trace(snapshots, eig: EigenSystem, rel_tol: float = DEFAULT_RANK_TOL) -> list[dict]:
    """Combined-matrix rank for each batch's class gradients against fixed eigenvectors.

    Classes absent from a batch are skipped for that batch. Each entry logs
    sigma_C, sigma_{C+1} and sigma_{2C} so the threshold can be judged later.
    """
    out = []
    for step, grads in snapshots:
        present = [g for g in grads if g is not None]
        c = len(grads)
        if not present:
            out.append({"step": step, "rank": 0, "present": 0})
            continue
        rank, sv = combined_rank(_unit_rows(present), eig.vectors[:, :c], rel_tol)
        pick = {f"sigma_{i}": float(sv[i - 1]) if i <= sv.size else 0.0 for i in (c, c + 1, 2 * c)}
        out.append({"step": step, "rank": rank, "present": len(present), **pick})
    return out


def random_cosine_stats(dim: int, samples: int, seed: int = 0, chunk: int = 500) -> dict:
    """Monte Carlo mean of |cos| between independent Gaussian directions."""
    rng = np.random.default_rng(seed)
    vals = np.empty(samples)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        a = rng.standard_normal((n, dim))
        b = rng.standard_normal((n, dim))
        vals[done:done + n] = np.abs(np.sum(a * b, axis=1)) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        )
        done += n
    return {
        "mean": float(vals.mean()),
        "stderr": float(vals.std(ddof=1) / math.sqrt(samples)),
        "expected": math.sqrt(2.0 / (math.pi * dim)),
    }


def eigenspectrum_report(hessian: np.ndarray, top_n: int, num_classes: int, fd_hessian=None) -> dict:
    eig = sym_eig(hessian)
    top_n = min(top_n, eig.values.shape[0])
    vals = eig.values[:top_n]
    report = {"top_eigenvalues": vals.tolist(), "num_classes": num_classes, "gap_ratio": None}
    if eig.values.shape[0] > num_classes and num_classes >= 1:
        below = eig.values[num_classes]
        report["gap_ratio"] = float(eig.values[num_classes - 1] / below) if below > 0 else None
    if fd_hessian is not None:
        report["fd_top_eigenvalues"] = sym_eig(fd_hessian).values[:top_n].tolist()
    return report


def kink_free_inputs(spec: ModelSpec, theta, x, margin: float = 1e-6, seed: int = 0,
                     scale: float = 1e-3, tries: int = 100) -> np.ndarray:
    """Nudge ``x`` until every hidden pre-activation is at least ``margin`` from 0."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    for _ in range(tries):
        if Tape(spec, theta, x).min_preactivation_margin() >= margin:
            return x
        x = x + scale * rng.standard_normal(x.shape)
    raise RuntimeError("could not find a kink-free point")


def to_json(report: dict) -> str:
    return json.dumps({"schema": SCHEMA, **report}, indent=2, sort_keys=True)
