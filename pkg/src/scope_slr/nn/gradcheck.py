from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-6,
               floor: float = 1e-8, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` takes no arguments and rebuilds the scalar output from the current
    values of ``wrt``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` only a random
    subset of coordinates (per tensor) is probed.
    """
    for t in wrt:
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    worst = 0.0
    for t in wrt:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
