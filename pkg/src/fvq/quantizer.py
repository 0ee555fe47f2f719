"""Vector quantization: nearest-code assignment, straight-through
estimation, commitment loss, usage/alignment metrics, and the residual
multi-code variant.

Distances are squared Euclidean; argmin ties break toward the lowest
index. The commitment loss is a mean square over all elements, so the
weight beta stays comparable across batch shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# keep the n×K distance workspace under ~32 MB per chunk
_CHUNK_ELEMS = 4_000_000


class Codebook:
    """K learnable code vectors of width d."""

    def __init__(self, k: int, d: int, rng: np.random.Generator):
        if k < 1 or d < 1:
            raise ValueError("codebook needs k >= 1 and d >= 1")
        self.k = k
        self.d = d
        # unit-scale rows: i.i.d. normal(0, 1/sqrt(d)) per coordinate
        self.entries = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(k, d)),
                              requires_grad=True)

    def named_params(self, prefix: str = "codebook") -> dict[str, Tensor]:
        return {f"{prefix}.entries": self.entries}


def squared_distances(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances, n×K."""
    if z.shape[1] != codes.shape[1]:
        raise T.ShapeError(
            f"vector width mismatch: queries {z.shape} vs codebook {codes.shape}")
    n, d = z.shape
    k = codes.shape[0]
    if n * k * d <= _CHUNK_ELEMS:
        # small case: direct differences keep constructed ties exact
        diff = z[:, None, :] - codes[None, :, :]
        return (diff * diff).sum(axis=2)
    out = np.empty((n, k))
    c2 = (codes * codes).sum(axis=1)
    rows = max(1, _CHUNK_ELEMS // k)
    for lo in range(0, n, rows):
        chunk = z[lo:lo + rows]
        z2 = (chunk * chunk).sum(axis=1)
        out[lo:lo + rows] = z2[:, None] - 2.0 * (chunk @ codes.T) + c2[None, :]
    return out


def nearest_indices(z_e: np.ndarray, codebook_values: np.ndarray) -> np.ndarray:
    """Index of the closest code per query row (lowest index on ties)."""
    return squared_distances(z_e, codebook_values).argmin(axis=1)


@dataclass
class QuantizeResult:
    """Outputs of one quantization pass.

    z_q carries the straight-through gradient path back to the encoder;
    z_q_raw is the plain codebook gather, the tensor losses must use to
    reach the codebook (and any projector in front of it).
    """

    z_q: Tensor
    z_q_raw: Tensor
    z_e: Tensor
    indices: np.ndarray
    ste_error: np.ndarray  # values of z_q - z_e, detached


def quantize_ste(z_e: Tensor, codebook_values: Tensor) -> QuantizeResult:
    """Assign each row to its nearest code; forward takes the code values,
    backward passes the output gradient to z_e unchanged."""
    idx = nearest_indices(z_e.values, codebook_values.values)
    raw = T.gather_rows(codebook_values, idx)
    z_q = T.add(z_e, T.detach(T.sub(raw, z_e)))
    return QuantizeResult(z_q=z_q, z_q_raw=raw, z_e=z_e, indices=idx,
                          ste_error=z_q.values - z_e.values)


def commitment_loss(z_e: Tensor, z_q: Tensor, beta: float = 0.25) -> Tensor:
    """d(z_q, sg[z_e]) + beta * d(z_e, sg[z_q]), each a mean square.

    The first term moves the codebook toward the encoder output, the
    second (scaled by beta) moves the encoder toward its code.
    """
    if z_e.values.shape != z_q.values.shape:
        raise T.ShapeError(
            f"commitment shapes differ: {z_e.values.shape} vs {z_q.values.shape}")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    pull_codes = T.reduce_mean(T.square(T.sub(z_q, T.detach(z_e))))
    pull_encoder = T.reduce_mean(T.square(T.sub(z_e, T.detach(z_q))))
    return T.add(pull_codes, T.scale(pull_encoder, beta))


@dataclass
class UsageStats:
    """Hit counts per code over one evaluation pass."""

    hit_counts: np.ndarray
    samples_seen: int = 0

    @classmethod
    def for_codebook(cls, k: int) -> "UsageStats":
        return cls(hit_counts=np.zeros(k, dtype=np.int64))

    def update(self, indices: np.ndarray) -> None:
        idx = np.asarray(indices)
        np.add.at(self.hit_counts, idx, 1)
        self.samples_seen += idx.size

    def usage(self) -> float:
        if self.samples_seen == 0:
            raise ValueError("usage undefined before any samples are counted")
        return float((self.hit_counts > 0).mean())


def usage(stats: UsageStats) -> float:
    return stats.usage()


def set_distance(points: np.ndarray, codes: np.ndarray) -> float:
    """Mean over rows of the squared distance to the nearest code."""
    if points.size == 0 or codes.size == 0:
        raise ValueError("set_distance needs nonempty inputs")
    return float(squared_distances(points, codes).min(axis=1).mean())


def residual_quantize(z_e: Tensor, codebook_values: Tensor, depth: int) -> QuantizeResult:
    """Greedy multi-code assignment on successive residuals, shared codebook.

    z_q sums the selected codes with the straight-through path applied to
    the sum; indices come back as an n×depth matrix. depth=1 performs
    exactly the single-code pass.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    residual = z_e.values
    raw_sum = None
    index_cols = []
    for _ in range(depth):
        idx = nearest_indices(residual, codebook_values.values)
        picked = T.gather_rows(codebook_values, idx)
        raw_sum = picked if raw_sum is None else T.add(raw_sum, picked)
        residual = residual - picked.values
        index_cols.append(idx)
    z_q = T.add(z_e, T.detach(T.sub(raw_sum, z_e)))
    return QuantizeResult(z_q=z_q, z_q_raw=raw_sum, z_e=z_e,
                          indices=np.stack(index_cols, axis=1),
                          ste_error=z_q.values - z_e.values)


def one_step_behind_update(c: np.ndarray, z_e: np.ndarray, eta: float) -> np.ndarray:
    """Reference code-vector update: one gradient step on half the squared
    distance to z_e lands the code at (1 - eta) * c + eta * z_e."""
    if not 0 <= eta <= 1:
        raise ValueError("eta must be in [0, 1]")
    return (1.0 - eta) * np.asarray(c) + eta * np.asarray(z_e)
