"""Fully connected ReLU/identity networks over a flat parameter vector.

Layer ``l`` maps width ``w[l]`` to ``w[l+1]`` with a weight matrix of shape
``(w[l+1], w[l])`` (so ``z = W x + b``) followed by a bias. The flat vector
stores ``W_0, b_0, W_1, b_1, ...``, each weight row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import XorShift64Star

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSlots:
    weight: slice
    bias: slice
    shape: tuple[int, int]


@dataclass(frozen=True)
class ModelSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("layer_widths needs at least an input and an output width")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def num_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layout(self) -> list[LayerSlots]:
        slots = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            slots.append(LayerSlots(w, b, (fan_out, fan_in)))
        return slots

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation}


def param_count(spec: ModelSpec) -> int:
    w = spec.layer_widths
    return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))


def unflatten(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(W, b)`` views into ``theta`` (no copies)."""
    theta = np.asarray(theta)
    if theta.shape != (param_count(spec),):
        raise ValueError(f"expected {param_count(spec)} parameters, got shape {theta.shape}")
    return [(theta[s.weight].reshape(s.shape), theta[s.bias]) for s in spec.layout()]


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.empty(0)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """He-scaled normal weights, zero biases, drawn from xorshift64*."""
    rng = XorShift64Star(seed)
    theta = np.zeros(param_count(spec))
    for slot in spec.layout():
        fan_out, fan_in = slot.shape
        std = np.sqrt(2.0 / fan_in)
        theta[slot.weight] = std * rng.normals(fan_in * fan_out)
    return theta
