"""Parameterised layers and losses built on :mod:`scope_slr.nn.tensor`.

Transformer blocks are pre-norm: ``h + Attn(LN(h))`` then ``h + FFN(LN(h))``.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tt
from .tensor import Tensor, parameter


class Module:
    """Minimal parameter container; attribute order defines parameter order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-8):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.eps) * self.gain + self.shift


class TemporalConv(Module):
    def __init__(self, d_in: int, d_out: int, width: int, stride: int, rng: np.random.Generator):
        self.weight = parameter(xavier_uniform(rng, width * d_in, d_out, (width, d_in, d_out)))
        self.bias = parameter(np.zeros(d_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return tt.conv1d(x, self.weight, self.bias, self.stride)


def temporal_conv(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int) -> Tensor:
    return tt.conv1d(x, kernel, bias, stride)


class AttentionLayer(Module):
    """Multi-head self-attention with pre-norm and a residual connection.

    Query/key/value projections carry no bias; the score scale uses the
    per-head channel count.
    """

    def __init__(self, hidden: int, heads: int, rng: np.random.Generator):
        if hidden % heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.norm = LayerNorm(hidden)
        self.w_q = parameter(xavier_uniform(rng, hidden, hidden))
        self.w_k = parameter(xavier_uniform(rng, hidden, hidden))
        self.w_v = parameter(xavier_uniform(rng, hidden, hidden))
        self.out = Linear(hidden, hidden, rng)
        self.heads = heads
        self.hidden = hidden

    @property
    def channels(self) -> int:
        return self.hidden // self.heads

    def attend(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """Attention output for already-normalised input (no residual)."""
        T = x.shape[0]
        H, C = self.heads, self.channels

        def split(t: Tensor) -> Tensor:
            return tt.transpose(t.reshape(T, H, C), (1, 0, 2))

        q = split(x @ self.w_q)
        k = split(x @ self.w_k)
        v = split(x @ self.w_v)
        keep = mask.astype(np.float64)[None, :, None]
        # Zero masked value rows so masked content cannot reach any output bit.
        v = v * keep
        scores = (q @ tt.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(C))
        weights = tt.softmax(scores, mask=mask[None, None, :])
        ctx = tt.transpose(weights @ v, (1, 0, 2)).reshape(T, self.hidden)
        return self.out(ctx)

    def __call__(self, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if mask is None:
            mask = np.ones(h.shape[0], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h.shape[0],):
            raise ValueError(f"mask length {mask.shape} does not match sequence length {h.shape[0]}")
        if not mask.any():
            raise ValueError("attention mask hides every position")
        return h + self.attend(self.norm(h), mask)


def attention_forward(h: Tensor, layer: AttentionLayer, mask: np.ndarray) -> Tensor:
    return layer(h, mask)


class FeedForward(Module):
    def __init__(self, hidden: int, ff: int, rng: np.random.Generator):
        self.norm = LayerNorm(hidden)
        self.fc1 = Linear(hidden, ff, rng)
        self.fc2 = Linear(ff, hidden, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return h + self.fc2(tt.gelu(self.fc1(self.norm(h))))


class EncoderBlock(Module):
    def __init__(self, hidden: int, heads: int, ff: int, rng: np.random.Generator):
        self.attn = AttentionLayer(hidden, heads, rng)
        self.ffn = FeedForward(hidden, ff, rng)

    def __call__(self, h: Tensor, mask: np.ndarray) -> Tensor:
        return self.ffn(self.attn(h, mask))


class TransformerEncoder(Module):
    def __init__(self, layers: int, hidden: int, heads: int, ff: int, rng: np.random.Generator):
        self.blocks = [EncoderBlock(hidden, heads, ff, rng) for _ in range(layers)]
        self.final_norm = LayerNorm(hidden)

    def __call__(self, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if mask is None:
            mask = np.ones(h.shape[0], dtype=bool)
        for block in self.blocks:
            h = block(h, mask)
        return self.final_norm(h)


def mean_pool_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    if mask is None:
        return x.mean(axis=0)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mean_pool_time: every position is masked")
    return (x * mask.astype(np.float64)[:, None]).sum(axis=0) * (1.0 / n)


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"l2_loss: dimension mismatch {a.shape} vs {b.shape}")
    return tt.l2_norm(a - b)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    ``logits`` may be one row (N,) with an integer target or a batch (B, N)
    with an integer array; the batched form averages.
    """
    n_classes = logits.shape[-1]
    targets = np.atleast_1d(np.asarray(target))
    if targets.dtype.kind not in "iu" or np.any(targets < 0) or np.any(targets >= n_classes):
        raise ValueError(f"cross_entropy: target {target!r} outside [0, {n_classes})")
    logp = tt.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        return -logp[int(targets[0])]
    picked = logp[np.arange(logits.shape[0]), targets]
    return -picked.mean()
