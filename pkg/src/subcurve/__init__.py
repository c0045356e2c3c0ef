"""Newton steps in the class-gradient subspace, gradient descent elsewhere."""

from .autodiff import BatchForward, Graph, Tape, fd_gradient, fd_hessian, forward_batch, loss_gradient
from .curvature import (
    CurvatureState,
    LowRankHessian,
    apply_hvp,
    apply_pinv,
    build_low_rank,
    project_complement,
    update_state,
)
from .data import Dataset, Minibatch, generate_blobs, load_idx, minibatch_stream
from .linalg import EigenSystem, gram_schmidt, hungarian_max, numerical_rank, sym_eig
from .model import ModelSpec, init_params, param_count
from .optimizers import OptimizerConfig, TrainState, qn_step, sgd_step, train_epoch

__all__ = [
    "BatchForward", "CurvatureState", "Dataset", "EigenSystem", "Graph", "LowRankHessian",
    "Minibatch", "ModelSpec", "OptimizerConfig", "Tape", "TrainState", "apply_hvp", "apply_pinv",
    "build_low_rank", "fd_gradient", "fd_hessian", "forward_batch", "generate_blobs",
    "gram_schmidt", "hungarian_max", "init_params", "load_idx", "loss_gradient",
    "minibatch_stream", "numerical_rank", "param_count", "project_complement", "qn_step",
    "sgd_step", "sym_eig", "train_epoch", "update_state",
]
__version__ = "0.1.0"
