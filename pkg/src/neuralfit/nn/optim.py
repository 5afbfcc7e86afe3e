"""Adam with bias correction and deterministic weight initialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import BadConfig, ShapeMismatch
from .layers import Module


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise BadConfig("invalid Adam hyper-parameters")


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Update ``params`` in place with one bias-corrected Adam step."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k in sorted(params):
        p = params[k]
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def init_weights(net: Module, seed: int) -> None:
    """Glorot-normal weights (output heads carry their own gain), zero biases,
    unit layer-norm scales.  Modules are visited in a fixed order."""
    rng = np.random.default_rng(seed)
    for mod in net.modules():
        mod.reset(rng)
