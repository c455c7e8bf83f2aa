from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 5e-5
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p -= (state.lr * state.weight_decay) * p
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class StepLR:
    """Multiply the learning rate by ``gamma`` every ``step_size`` epochs."""

    state: AdamState
    step_size: int = 20
    gamma: float = 0.5
    epoch: int = 0
    base_lr: float | None = None

    def __post_init__(self):
        if self.base_lr is None:
            self.base_lr = self.state.lr

    def step(self) -> float:
        self.epoch += 1
        self.state.lr = self.base_lr * self.gamma ** (self.epoch // self.step_size)
        return self.state.lr
