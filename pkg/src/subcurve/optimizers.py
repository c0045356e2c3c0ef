"""SGD with heavy-ball momentum and the subspace quasi-Newton update, plus the
epoch loop that ties model, curvature state and optimiser together."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError, Tape
from .curvature import (
    LAMBDA_FLOOR,
    CurvatureState,
    LowRankHessian,
    batch_eigenvalues,
    build_low_rank,
    class_gradients_from_tape,
    update_state,
)
from .data import Dataset, minibatch_stream
from .model import ModelSpec

METHODS = ("sgd", "quasi_newton")
MOMENTUM_MODES = ("combined_update", "projected_only")
DIVERGENCE_NORM = 1e12


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "sgd"
    eta: float = 0.1
    momentum_beta: float = 0.9
    gamma: float = 0.9
    weight_decay: float = 0.0
    orthonormalize: bool = False
    lambda_floor: float = LAMBDA_FLOOR
    momentum_applies_to: str = "combined_update"
    max_newton_step: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.momentum_beta < 1.0:
            raise ValueError("momentum_beta must lie in [0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.momentum_applies_to not in MOMENTUM_MODES:
            raise ValueError(f"momentum_applies_to must be one of {MOMENTUM_MODES}")
        if not self.lambda_floor > 0:
            raise ValueError("lambda_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MomentumState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, dim: int) -> "MomentumState":
        return cls(np.zeros(dim))


class DivergenceError(FloatingPointError):
    """A step produced a non-finite value or a parameter norm above the limit."""

    def __init__(self, message: str, step: int = -1, metrics: list | None = None):
        super().__init__(message)
        self.step = step
        self.metrics = metrics or []


def sgd_step(theta, g, mstate: MomentumState, cfg: OptimizerConfig):
    """``v <- beta v + g``; ``theta <- theta - eta v``."""
    velocity = cfg.momentum_beta * mstate.velocity + g
    new_theta = theta - cfg.eta * velocity
    if not np.all(np.isfinite(new_theta)):
        raise DivergenceError("non-finite SGD update")
    return new_theta, MomentumState(velocity)


def newton_coefficients(h: LowRankHessian, g, eta: float, cap: float | None = None) -> np.ndarray:
    """``(1/lambda_k - eta) (v_k . g)`` for each retained direction."""
    coef = (1.0 / h.eigenvalues - eta) * (h.directions @ g)
    if cap is not None:
        coef = np.clip(coef, -cap, cap)
    return coef


def qn_delta(g, h: LowRankHessian, eta: float, cap: float | None = None) -> np.ndarray:
    """Raw update ``-eta g - sum_k (1/lambda_k - eta)(v_k . g) v_k``."""
    return -eta * g - h.directions.T @ newton_coefficients(h, g, eta, cap)


def qn_step(theta, g, h: LowRankHessian, mstate: MomentumState, cfg: OptimizerConfig):
    g = np.asarray(g, dtype=np.float64)
    eta = cfg.eta
    beta = cfg.momentum_beta
    newton = h.directions.T @ newton_coefficients(h, g, eta, cfg.max_newton_step)
    if not np.all(np.isfinite(newton)):
        proj = np.abs(h.directions @ g)
        dump = ", ".join(
            f"class {k}: lambda={lam:.3g} |v.g|={p:.3g}"
            for k, lam, p in zip(h.classes, h.eigenvalues, proj)
        )
        raise DivergenceError(f"non-finite quasi-Newton update ({dump})")
    # the raw update is -eta g - newton; velocity stays in gradient units so
    # that beta = 0, lambda = 1/eta or an empty subspace reproduce SGD exactly
    if cfg.momentum_applies_to == "combined_update":
        velocity = beta * mstate.velocity + (g + newton / eta)
        new_theta = theta - eta * velocity
    else:
        in_span = h.directions.T @ (h.directions @ g)
        velocity = beta * mstate.velocity + (g - in_span)
        new_theta = theta - eta * velocity - (eta * in_span + newton)
    if not np.all(np.isfinite(new_theta)):
        raise DivergenceError("non-finite quasi-Newton update")
    return new_theta, MomentumState(velocity)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    epoch: int
    mean_loss: float
    train_accuracy: float
    grad_norm: float
    eigenvalues: tuple[float, ...] = ()


@dataclass(frozen=True)
class TrainState:
    theta: np.ndarray
    momentum: MomentumState
    curvature: CurvatureState | None = None
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, theta: np.ndarray, num_classes: int, cfg: OptimizerConfig) -> "TrainState":
        curvature = None
        if cfg.method == "quasi_newton":
            curvature = CurvatureState.zeros(num_classes, theta.shape[0], cfg.gamma)
        return cls(np.array(theta, dtype=np.float64), MomentumState.zeros(theta.shape[0]), curvature)


StepObserver = Callable[[int, list, LowRankHessian | None], None]


def train_epoch(
    spec: ModelSpec,
    dataset: Dataset,
    cfg: OptimizerConfig,
    state: TrainState,
    batch_size: int,
    epoch_seed: int,
    observer: StepObserver | None = None,
) -> tuple[TrainState, list[StepMetrics]]:
    """One pass over ``dataset`` in seeded minibatches.

    ``observer(step, class_grads, low_rank)`` is called after every step when
    given; class gradients are measured for SGD runs too in that case.
    On divergence the partial metrics travel on the raised error.
    """
    metrics: list[StepMetrics] = []
    theta, momentum, curv, step = state.theta, state.momentum, state.curvature, state.step
    qn = cfg.method == "quasi_newton"
    for batch in minibatch_stream(dataset, batch_size, epoch_seed):
        x = batch.inputs(dataset)
        try:
            tape = Tape(spec, theta, x, batch.labels)
        except NonFiniteError as exc:
            raise DivergenceError(str(exc), step, metrics) from exc
        fwd = tape.forward
        g = tape.loss_gradient()
        if cfg.weight_decay:
            g = g + cfg.weight_decay * theta
        class_grads = None
        low_rank = None
        if qn or observer is not None:
            class_grads = class_gradients_from_tape(tape, batch.labels)
        try:
            if qn:
                lam_b = batch_eigenvalues(fwd.probs, fwd.labels, class_grads)
                curv = update_state(curv, class_grads, lam_b)
                low_rank = build_low_rank(curv, cfg.orthonormalize, cfg.lambda_floor)
                theta, momentum = qn_step(theta, g, low_rank, momentum, cfg)
            else:
                theta, momentum = sgd_step(theta, g, momentum, cfg)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), step, metrics) from exc
        step += 1
        metrics.append(
            StepMetrics(
                step=step,
                epoch=state.epoch,
                mean_loss=fwd.mean_loss,
                train_accuracy=fwd.accuracy,
                grad_norm=float(np.linalg.norm(g)),
                eigenvalues=tuple(float(v) for v in curv.eigenvalues()) if qn else (),
            )
        )
        if observer is not None:
            observer(step, class_grads, low_rank)
        norm = float(np.linalg.norm(theta))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(f"parameter norm {norm:.3g} exceeds {DIVERGENCE_NORM:.0e}",
                                  step, metrics)
    new_state = replace(state, theta=theta, momentum=momentum, curvature=curv, step=step,
                        epoch=state.epoch + 1)
    return new_state, metrics
