"""Layers for the codebook projector and the small encoder/decoder.

Pre-norm transformer blocks with multi-head self-attention, GELU MLPs,
and the usual ViT defaults (normal(0, 0.02) projections, zero biases).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation, built from primitives so the tape differentiates it
    inner = T.scale(T.add(x, T.scale(T.mul(T.square(x), x), 0.044715)), _GELU_C)
    return T.mul(T.scale(x, 0.5), T.add(T.tanh(inner), 1.0))


def softmax_rows(x: Tensor) -> Tensor:
    shifted = T.sub(x, Tensor(x.values.max(axis=-1, keepdims=True)))
    e = T.exp(shifted)
    return T.div(e, T.reduce_sum(e, axis=-1, keepdims=True))


def default_heads(d: int) -> int:
    """8 heads once d >= 64, otherwise the divisor of d nearest d/8."""
    if d >= 64 and d % 8 == 0:
        return 8
    target = max(1, round(d / 8))
    divisors = [h for h in range(1, d + 1) if d % h == 0]
    return min(divisors, key=lambda h: (abs(h - target), h))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, init_std: float = INIT_STD):
        if d_in <= 0 or d_out <= 0:
            raise ValueError("layer dimensions must be positive")
        self.weight = Tensor(rng.normal(0.0, init_std, size=(d_in, d_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            params[f"{prefix}.bias"] = self.bias
        return params


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.shift = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.reduce_mean(x, axis=-1, keepdims=True)
        centered = T.sub(x, mu)
        var = T.reduce_mean(T.square(centered), axis=-1, keepdims=True)
        normed = T.div(centered, T.sqrt(T.add(var, self.eps)))
        return T.add(T.mul(normed, self.gain), self.shift)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.shift": self.shift}


class MultiHeadAttention:
    """Scaled dot-product self-attention.

    Input rows are one token sequence by default; pass ``seq_len`` to
    treat them as a stack of independent equal-length sequences (no
    attention crosses a sequence boundary).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def _split_heads(self, x: Tensor, batch: int, seq: int) -> Tensor:
        # (batch*seq, d) -> (batch, heads, seq, head_dim)
        x = T.reshape(x, (batch, seq, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def _scores(self, x: Tensor, batch: int, seq: int) -> Tensor:
        qh = self._split_heads(self.q(x), batch, seq)
        kh = self._split_heads(self.k(x), batch, seq)
        raw = T.bmm(qh, T.transpose(kh, (0, 1, 3, 2)))
        return softmax_rows(T.scale(raw, 1.0 / math.sqrt(self.head_dim)))

    def __call__(self, x: Tensor, seq_len: int | None = None) -> Tensor:
        n = x.values.shape[0]
        seq = n if seq_len is None else seq_len
        if seq < 1 or n % seq != 0:
            raise ValueError(f"{n} rows do not split into length-{seq} sequences")
        batch = n // seq
        attn = self._scores(x, batch, seq)
        vh = self._split_heads(self.v(x), batch, seq)
        mixed = T.bmm(attn, vh)  # (batch, heads, seq, head_dim)
        joined = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, self.d))
        return self.out(joined)

    def attention_weights(self, x: Tensor, seq_len: int | None = None) -> np.ndarray:
        """Softmax matrices (batch, heads, seq, seq), values only."""
        n = x.values.shape[0]
        seq = n if seq_len is None else seq_len
        with T.no_grad():
            return self._scores(x, n // seq, seq).values

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for tag, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            params.update(layer.named_params(f"{prefix}.{tag}"))
        return params


class Mlp:
    def __init__(self, d: int, rng: np.random.Generator, expansion: int = 4):
        self.fc1 = Linear(d, expansion * d, rng)
        self.fc2 = Linear(expansion * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fc1.named_params(f"{prefix}.fc1"),
                **self.fc2.named_params(f"{prefix}.fc2")}


class TransformerBlock:
    """Pre-norm block: x + Attn(LN(x)), then y + MLP(LN(y))."""

    def __init__(self, d: int, heads: int | None, rng: np.random.Generator):
        heads = default_heads(d) if heads is None else heads
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(d, rng)

    def __call__(self, x: Tensor, seq_len: int | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), seq_len))
        return T.add(x, self.mlp(self.ln2(x)))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.ln1.named_params(f"{prefix}.ln1"),
                **self.attn.named_params(f"{prefix}.attn"),
                **self.ln2.named_params(f"{prefix}.ln2"),
                **self.mlp.named_params(f"{prefix}.mlp")}
