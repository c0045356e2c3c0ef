"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records operations in creation order, which is already a
topological order, so a backward pass walks the node list in reverse. The
softmax-cross-entropy loss is a single fused node whose adjoint is
``(p - y) / |B|``.

Per-class logit gradients are obtained by seeding the logits node with a
one-hot adjoint and running one backward pass per class over the same forward
graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ModelSpec, param_count

DENSE_PARAM_CAP = 4000
FD_STEP = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when a forward value stops being finite."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    label: str = ""
    aux: tuple = ()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, kind, inputs, value, label="", aux=()) -> int:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite values in {label or kind}")
        self.nodes.append(Node(kind, tuple(inputs), value, label, aux))
        return len(self.nodes) - 1

    def value(self, i: int) -> np.ndarray:
        return self.nodes[i].value

    def leaf(self, value, label: str = "") -> int:
        return self._push("leaf", (), value, label)

    def matmul(self, a: int, b: int, label: str = "") -> int:
        return self._push("matmul", (a, b), self.value(a) @ self.value(b), label)

    def transpose(self, a: int) -> int:
        return self._push("transpose", (a,), self.value(a).T)

    def add(self, a: int, b: int, label: str = "") -> int:
        return self._push("add", (a, b), self.value(a) + self.value(b), label)

    def mul(self, a: int, b: int, label: str = "") -> int:
        return self._push("mul", (a, b), self.value(a) * self.value(b), label)

    def relu(self, a: int, label: str = "") -> int:
        # derivative at exactly 0 is taken as 0
        return self._push("relu", (a,), np.maximum(self.value(a), 0.0), label)

    def sum(self, a: int) -> int:
        return self._push("sum", (a,), np.sum(self.value(a)))

    def softmax_xent(self, logits: int, onehot: np.ndarray, label: str = "loss") -> int:
        """Mean cross-entropy of ``softmax(logits)`` against one-hot rows."""
        z = self.value(logits)
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - lse
        probs = np.exp(log_p)
        per_example = -np.sum(onehot * log_p, axis=1)
        return self._push(
            "softmax_xent", (logits,), per_example.mean(), label, (probs, onehot, per_example)
        )

    def backward(self, root: int, seed=None) -> list:
        """Adjoints of every node w.r.t. ``root`` seeded with ``seed``.

        Entries for nodes that do not influence ``root`` are ``None``.
        """
        adj: list = [None] * len(self.nodes)
        root_value = self.value(root)
        adj[root] = np.ones_like(root_value) if seed is None else np.asarray(seed, dtype=np.float64)
        if adj[root].shape != root_value.shape:
            raise ValueError(f"seed shape {adj[root].shape} != node shape {root_value.shape}")

        def acc(i, g):
            adj[i] = g if adj[i] is None else adj[i] + g

        for i in range(root, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            kind = node.kind
            if kind == "leaf":
                continue
            if kind == "matmul":
                a, b = node.inputs
                acc(a, g @ self.value(b).T)
                acc(b, self.value(a).T @ g)
            elif kind == "transpose":
                acc(node.inputs[0], g.T)
            elif kind == "add":
                a, b = node.inputs
                acc(a, _unbroadcast(g, self.value(a).shape))
                acc(b, _unbroadcast(g, self.value(b).shape))
            elif kind == "mul":
                a, b = node.inputs
                acc(a, _unbroadcast(g * self.value(b), self.value(a).shape))
                acc(b, _unbroadcast(g * self.value(a), self.value(b).shape))
            elif kind == "relu":
                a = node.inputs[0]
                acc(a, g * (self.value(a) > 0.0))
            elif kind == "sum":
                a = node.inputs[0]
                acc(a, np.full_like(self.value(a), float(g)))
            elif kind == "softmax_xent":
                probs, onehot, _ = node.aux
                acc(node.inputs[0], float(g) * (probs - onehot) / probs.shape[0])
            else:
                raise ValueError(f"unknown node kind {kind!r}")
        return adj


@dataclass
class BatchForward:
    logits: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    per_example_loss: np.ndarray
    mean_loss: float

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.logits.argmax(axis=1) == self.labels.argmax(axis=1)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class Tape:
    """Forward graph of one model on one batch, reusable for many backward passes."""

    def __init__(self, spec: ModelSpec, theta: np.ndarray, x: np.ndarray, labels=None):
        theta = np.asarray(theta, dtype=np.float64)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 0:
            raise ValueError("batch is empty")
        if x.shape[1] != spec.input_dim:
            raise ValueError(f"inputs have dimension {x.shape[1]}, model expects {spec.input_dim}")
        if theta.shape != (param_count(spec),):
            raise ValueError(f"expected {param_count(spec)} parameters, got shape {theta.shape}")
        self.spec = spec
        self.graph = g = Graph()
        self.param_nodes: list[tuple[int, int]] = []
        self.preact_nodes: list[int] = []
        h = g.leaf(x, "inputs")
        layout = spec.layout()
        for l, slot in enumerate(layout):
            w = g.leaf(theta[slot.weight].reshape(slot.shape), f"layer {l} weight")
            b = g.leaf(theta[slot.bias], f"layer {l} bias")
            self.param_nodes.append((w, b))
            pre = g.add(g.matmul(h, g.transpose(w), f"layer {l} pre-activation"), b,
                        f"layer {l} pre-activation")
            self.preact_nodes.append(pre)
            last = l == len(layout) - 1
            if last or spec.activation == "identity":
                h = pre
            else:
                h = g.relu(pre, f"layer {l} activation")
        self.logits_node = h
        self.loss_node = None
        self.forward = None
        if labels is not None:
            labels = np.asarray(labels)
            onehot = labels if labels.ndim == 2 else one_hot(labels, spec.num_classes)
            self.loss_node = g.softmax_xent(h, onehot)
            probs, _, per_example = g.nodes[self.loss_node].aux
            self.forward = BatchForward(
                logits=g.value(h),
                probs=probs,
                labels=onehot,
                per_example_loss=per_example,
                mean_loss=float(per_example.mean()),
            )

    @property
    def logits(self) -> np.ndarray:
        return self.graph.value(self.logits_node)

    def _flat(self, adj) -> np.ndarray:
        out = np.zeros(param_count(self.spec))
        for (w, b), slot in zip(self.param_nodes, self.spec.layout()):
            if adj[w] is not None:
                out[slot.weight] = adj[w].ravel()
            if adj[b] is not None:
                out[slot.bias] = adj[b]
        return out

    def loss_gradient(self) -> np.ndarray:
        if self.loss_node is None:
            raise ValueError("tape was built without labels")
        return self._flat(self.graph.backward(self.loss_node))

    def seeded_logit_gradient(self, seed: np.ndarray) -> np.ndarray:
        """``sum_{mu,k} seed[mu, k] * grad z_k^mu`` in one backward pass."""
        return self._flat(self.graph.backward(self.logits_node, seed))

    def logit_gradient(self, example: int, k: int) -> np.ndarray:
        n, c = self.logits.shape
        if not 0 <= k < c:
            raise IndexError(f"class index {k} outside [0, {c})")
        seed = np.zeros((n, c))
        seed[example, k] = 1.0
        return self.seeded_logit_gradient(seed)

    def jacobian(self) -> np.ndarray:
        """All logit gradients, shape ``(|B|, C, N)``; |B|*C backward passes."""
        n, c = self.logits.shape
        jac = np.empty((n, c, param_count(self.spec)))
        for mu in range(n):
            for k in range(c):
                jac[mu, k] = self.logit_gradient(mu, k)
        return jac

    def min_preactivation_margin(self) -> float:
        """Smallest |pre-activation| over hidden ReLU units (inf if none)."""
        if self.spec.activation != "relu" or len(self.preact_nodes) < 2:
            return float("inf")
        return float(min(np.min(np.abs(self.graph.value(i))) for i in self.preact_nodes[:-1]))


def forward_batch(spec: ModelSpec, theta, x, labels) -> BatchForward:
    return Tape(spec, theta, x, labels).forward


def loss_gradient(spec: ModelSpec, theta, x, labels) -> np.ndarray:
    return Tape(spec, theta, x, labels).loss_gradient()


def logit_gradient(spec: ModelSpec, theta, example, k: int) -> np.ndarray:
    """Gradient of logit ``k`` for a single input vector."""
    return Tape(spec, theta, np.atleast_2d(example)).logit_gradient(0, k)


def logit_jacobian(spec: ModelSpec, theta, x) -> np.ndarray:
    return Tape(spec, theta, x).jacobian()


def loss_fn(spec: ModelSpec, x, labels) -> Callable[[np.ndarray], float]:
    return lambda theta: forward_batch(spec, theta, x, labels).mean_loss


def grad_fn(spec: ModelSpec, x, labels) -> Callable[[np.ndarray], np.ndarray]:
    return lambda theta: loss_gradient(spec, theta, x, labels)


def fd_gradient(f: Callable[[np.ndarray], float], theta, h: float = FD_STEP) -> np.ndarray:
    """Central differences ``(f(t + h e_a) - f(t - h e_a)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for a in range(theta.size):
        orig = theta[a]
        theta[a] = orig + h
        fp = f(theta)
        theta[a] = orig - h
        fm = f(theta)
        theta[a] = orig
        out[a] = (fp - fm) / (2.0 * h)
    return out


def fd_hessian(
    grad: Callable[[np.ndarray], np.ndarray],
    theta,
    h: float = FD_STEP,
    cap: int = DENSE_PARAM_CAP,
) -> np.ndarray:
    """Symmetrised central differences of an analytic gradient."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64)
    n = theta.size
    if n > cap:
        raise ValueError(
            f"{n} parameters exceeds the dense Hessian cap of {cap}; "
            "use the low-rank Hessian-vector product instead"
        )
    hess = np.empty((n, n))
    for a in range(n):
        orig = theta[a]
        theta[a] = orig + h
        gp = grad(theta)
        theta[a] = orig - h
        gm = grad(theta)
        theta[a] = orig
        hess[:, a] = (gp - gm) / (2.0 * h)
    return 0.5 * (hess + hess.T)
