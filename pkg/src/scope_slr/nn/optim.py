from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError
from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    """Cosine annealing: ``base_lr`` at step 0, ``min_lr`` at step ``total_steps - 1``."""
    if total_steps <= 1:
        return base_lr
    step = min(max(step, 0), total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


@dataclass
class OptimizerState:
    lr: float
    total_steps: int
    min_lr: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return cosine_lr(self.step, self.total_steps, self.lr, self.min_lr)


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState,
               names: list[str] | None = None) -> float:
    """One AdamW update in place (decoupled weight decay, bias-corrected moments).

    Returns the learning rate used. Raises before touching any parameter if a
    gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"param[{i}]"
            bad = int(np.sum(~np.isfinite(g)))
            raise NonFiniteError("adamw_step", f"{bad} non-finite gradient entries in {label}")
    lr = state.current_lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        p.data = p.data * (1.0 - lr * state.weight_decay)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step = t
    return lr


class AdamW:
    """Convenience wrapper binding a parameter list to an :class:`OptimizerState`."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float, total_steps: int,
                 min_lr: float = 0.0, weight_decay: float = 0.01):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState(lr=lr, total_steps=total_steps, min_lr=min_lr,
                                    weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        return adamw_step(self.params, [p.grad for p in self.params], self.state, self.names)
