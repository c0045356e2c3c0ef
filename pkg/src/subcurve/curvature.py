"""Class-gradient curvature model.

Per minibatch we measure the class gradients ``c_k`` (mean logit-k gradient
over the batch's class-k examples) and the matching curvature
``lambda_k = mean_mu y_k p_k (1 - p_k) |c_k|^2``. Both are smoothed with
bias-corrected exponential averages (an RMS for ``lambda``) and turned into a
rank-C Hessian ``sum_k lambda_k v_k v_k^T`` with ``v_k = c_k / |c_k|``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .linalg import gram_schmidt

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-8
MIN_DIRECTION_NORM = 1e-12
CHECKPOINT_MAGIC = b"SCRV1"


def batch_class_gradients(logit_grads: np.ndarray, labels, num_classes: int) -> list:
    """Mean of ``grad z_k`` over the batch's class-k examples.

    ``logit_grads`` has shape ``(|B|, C, N)``. Classes missing from the batch
    come back as ``None`` rather than a zero vector.
    """
    labels = np.asarray(labels)
    out = []
    for k in range(num_classes):
        rows = np.flatnonzero(labels == k)
        out.append(logit_grads[rows, k].mean(axis=0) if rows.size else None)
    return out


def class_gradients_from_tape(tape, labels) -> list:
    """Same as :func:`batch_class_gradients` using one backward pass per class."""
    labels = np.asarray(labels)
    n, c = tape.logits.shape
    out = []
    for k in range(c):
        rows = np.flatnonzero(labels == k)
        if rows.size == 0:
            out.append(None)
            continue
        seed = np.zeros((n, c))
        seed[rows, k] = 1.0 / rows.size
        out.append(tape.seeded_logit_gradient(seed))
    return out


def batch_eigenvalues(probs: np.ndarray, onehot: np.ndarray, class_grads: list) -> np.ndarray:
    """``lambda_k = (1/|B|) sum_mu y_k p_k (1 - p_k) |c_k|^2``; zero for absent classes."""
    weights = np.mean(onehot * probs * (1.0 - probs), axis=0)
    sq = np.array([0.0 if c is None else float(c @ c) for c in class_grads])
    return weights * sq


@dataclass(frozen=True)
class CurvatureState:
    """Bias-corrected running averages, one counter per class.

    ``ema`` holds the bias-corrected class-gradient averages and ``rms`` the
    bias-corrected averages of squared eigenvalues. Storing the corrected
    values (rather than the raw accumulators) makes the first observation
    come back bit for bit.
    """

    ema: np.ndarray
    rms: np.ndarray
    counts: np.ndarray
    gamma: float = 0.9
    global_step: int = 0

    @classmethod
    def zeros(cls, num_classes: int, dim: int, gamma: float = 0.9) -> "CurvatureState":
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes),
                   np.zeros(num_classes, dtype=np.int64), gamma)

    @property
    def num_classes(self) -> int:
        return self.ema.shape[0]

    def class_gradients(self) -> np.ndarray:
        """Bias-corrected ``c_k``; zero rows for classes never observed."""
        return self.ema.copy()

    def eigenvalues(self) -> np.ndarray:
        """Bias-corrected RMS ``lambda_k``; 1 for classes never observed."""
        lam = np.sqrt(self.rms)
        lam[self.counts == 0] = 1.0
        return lam


def update_state(state: CurvatureState, class_grads: list, eigenvalues) -> CurvatureState:
    """One EMA/RMS step; classes marked ``None`` are left untouched.

    With ``w = (1 - gamma) / (1 - gamma^t)`` the corrected average obeys
    ``avg <- avg + w (x - avg)``, the same recursion as dividing the raw
    accumulator ``m <- gamma m + (1 - gamma) x`` by ``1 - gamma^t``.
    """
    g = state.gamma
    ema = state.ema.copy()
    rms = state.rms.copy()
    counts = state.counts.copy()
    for k, c in enumerate(class_grads):
        if c is None:
            continue
        counts[k] += 1
        w = (1.0 - g) / (1.0 - g ** int(counts[k]))
        ema[k] = ema[k] + w * (c - ema[k])
        rms[k] = rms[k] + w * (float(eigenvalues[k]) ** 2 - rms[k])
    return replace(state, ema=ema, rms=rms, counts=counts, global_step=state.global_step + 1)


@dataclass(frozen=True)
class LowRankHessian:
    directions: np.ndarray  # (k, N) unit rows
    eigenvalues: np.ndarray  # (k,)
    classes: tuple[int, ...] = ()
    orthonormalized: bool = False
    dim: int = field(default=0)

    def __post_init__(self):
        if self.dim == 0 and self.directions.ndim == 2:
            object.__setattr__(self, "dim", self.directions.shape[1])

    @property
    def rank(self) -> int:
        return self.directions.shape[0]

    def dense(self) -> np.ndarray:
        v = self.directions
        return (v.T * self.eigenvalues) @ v

    def max_cross_dot(self) -> float:
        if self.rank < 2:
            return 0.0
        gram = self.directions @ self.directions.T
        return float(np.max(np.abs(gram - np.diag(np.diag(gram)))))


def build_low_rank(
    state: CurvatureState,
    orthonormalize: bool = False,
    lambda_floor: float = LAMBDA_FLOOR,
) -> LowRankHessian:
    dim = state.ema.shape[1]
    grads = state.class_gradients()
    lams = state.eigenvalues()
    keep, rows = [], []
    for k in range(state.num_classes):
        if state.counts[k] == 0:
            continue
        norm = np.linalg.norm(grads[k])
        if norm < MIN_DIRECTION_NORM:
            log.warning("class %d gradient norm %.3g below %.0e; excluded this step",
                        k, norm, MIN_DIRECTION_NORM)
            continue
        keep.append(k)
        rows.append(grads[k] / norm)
    directions = np.vstack(rows) if rows else np.empty((0, dim))
    if orthonormalize and rows:
        directions, kept = gram_schmidt(directions, drop_tol=1e-10, return_kept=True)
        keep = [keep[i] for i in kept]
    eig = np.maximum(lams[keep], lambda_floor) if keep else np.empty(0)
    return LowRankHessian(directions, eig, tuple(keep), orthonormalize, dim)


def _check_dim(h: LowRankHessian, u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (h.dim,):
        raise ValueError(f"vector has shape {u.shape}, low-rank Hessian acts on ({h.dim},)")
    return u


def apply_hvp(h: LowRankHessian, u) -> np.ndarray:
    """``sum_k lambda_k (v_k . u) v_k`` without forming the N x N matrix."""
    u = _check_dim(h, u)
    return h.directions.T @ (h.eigenvalues * (h.directions @ u))


def apply_pinv(h: LowRankHessian, g) -> np.ndarray:
    """Generalised inverse ``sum_k (1/lambda_k) (v_k . g) v_k``."""
    g = _check_dim(h, g)
    return h.directions.T @ ((h.directions @ g) / h.eigenvalues)


def project_complement(h: LowRankHessian, g) -> np.ndarray:
    """``(I - sum_k v_k v_k^T) g``.

    Non-orthonormal directions are deflated one at a time in class order, so
    the result is exactly orthogonal only to the last one.
    """
    g = _check_dim(h, g)
    if h.orthonormalized:
        return g - h.directions.T @ (h.directions @ g)
    out = g.copy()
    for v in h.directions:
        out -= (v @ out) * v
    return out


def save_state(path, state: CurvatureState) -> None:
    """Little-endian record: magic, C, N, ema, rms, counts, gamma, global step."""
    c, n = state.ema.shape
    with open(Path(path), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", c, n))
        f.write(state.ema.astype("<f8").tobytes())
        f.write(state.rms.astype("<f8").tobytes())
        f.write(state.counts.astype("<u8").tobytes())
        f.write(struct.pack("<dQ", state.gamma, state.global_step))


def load_state(path) -> CurvatureState:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a curvature checkpoint")
    c, n = struct.unpack_from("<IQ", raw, 5)
    off = 5 + 12
    expected = off + 8 * (c * n + 2 * c) + 16
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    ema = np.frombuffer(raw, "<f8", c * n, off).reshape(c, n).astype(np.float64)
    off += 8 * c * n
    rms = np.frombuffer(raw, "<f8", c, off).astype(np.float64)
    off += 8 * c
    counts = np.frombuffer(raw, "<u8", c, off).astype(np.int64)
    off += 8 * c
    gamma, step = struct.unpack_from("<dQ", raw, off)
    return CurvatureState(ema, rms, counts, gamma, step)
