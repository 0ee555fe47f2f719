"""Codebook projector: compress groups of code vectors into tokens,
mix them with transformer blocks, and recover a same-shape codebook.

The base codebook's K rows are split into K/p consecutive groups of p
rows. Each group is flattened to a p*d vector, projected to width
d_latent, normalized, mixed globally, then expanded back to p rows of
width d. Training optimizes the projector jointly with the base
codebook; afterwards the projector output can be materialized and the
projector dropped, leaving a plain K×d codebook for inference.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class BridgeConfigError(ValueError):
    """Inconsistent projector configuration (divisibility, head count)."""


@dataclass
class BridgeConfig:
    p: int = 16                 # code vectors per group
    d_latent: int | None = None  # token width, defaults to the vector channel
    depth: int = 2              # transformer blocks
    heads: int | None = None    # defaults via nn.default_heads
    use_pos_embed: bool = True

    def resolve(self, d: int) -> "BridgeConfig":
        d_latent = self.d_latent if self.d_latent is not None else d
        heads = self.heads if self.heads is not None else nn.default_heads(d_latent)
        return BridgeConfig(p=self.p, d_latent=d_latent, depth=self.depth,
                            heads=heads, use_pos_embed=self.use_pos_embed)


class Bridge:
    """The compress → process → recover pipeline for one (K, d) codebook."""

    def __init__(self, k: int, d: int, cfg: BridgeConfig, rng: np.random.Generator):
        cfg = cfg.resolve(d)
        if cfg.p < 1 or k % cfg.p != 0:
            raise BridgeConfigError(f"codebook size {k} not divisible by patch size {cfg.p}")
        if cfg.depth < 1:
            raise BridgeConfigError("bridge needs at least one block")
        if cfg.d_latent % cfg.heads != 0:
            raise BridgeConfigError(
                f"d_latent={cfg.d_latent} not divisible by heads={cfg.heads}")
        self.k = k
        self.d = d
        self.cfg = cfg
        self.tokens = k // cfg.p
        self.compress = nn.Linear(cfg.p * d, cfg.d_latent, rng)
        self.pre_ln = nn.LayerNorm(cfg.d_latent)
        self.blocks = [nn.TransformerBlock(cfg.d_latent, cfg.heads, rng)
                       for _ in range(cfg.depth)]
        self.post_ln = nn.LayerNorm(cfg.d_latent)
        self.expand = nn.Linear(cfg.d_latent, cfg.p * d, rng)
        self.pos_embed = None
        if cfg.use_pos_embed:
            self.pos_embed = Tensor(rng.normal(0.0, nn.INIT_STD,
                                               size=(self.tokens, cfg.d_latent)),
                                    requires_grad=True)

    def patchify(self, codebook: Tensor) -> Tensor:
        if codebook.values.shape != (self.k, self.d):
            raise T.ShapeError(
                f"expected codebook {(self.k, self.d)}, got {codebook.values.shape}")
        grouped = T.reshape(codebook, (self.tokens, self.cfg.p * self.d))
        tokens = self.pre_ln(self.compress(grouped))
        if self.pos_embed is not None:
            tokens = T.add(tokens, self.pos_embed)
        return tokens

    def process(self, tokens: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def unpatchify(self, tokens: Tensor) -> Tensor:
        expanded = self.expand(self.post_ln(tokens))
        return T.reshape(expanded, (self.k, self.d))

    def __call__(self, codebook: Tensor) -> Tensor:
        return self.unpatchify(self.process(self.patchify(codebook)))

    def effective(self, codebook: Tensor) -> Tensor:
        return self(codebook)

    def materialize(self, codebook: Tensor) -> np.ndarray:
        """Value-only copy of the mapped codebook, for projector-free use."""
        with T.no_grad():
            return self(codebook).values.copy()

    def named_params(self, prefix: str = "bridge") -> dict[str, Tensor]:
        params = {}
        params.update(self.compress.named_params(f"{prefix}.compress"))
        params.update(self.pre_ln.named_params(f"{prefix}.pre_ln"))
        for i, block in enumerate(self.blocks):
            params.update(block.named_params(f"{prefix}.block{i}"))
        params.update(self.post_ln.named_params(f"{prefix}.post_ln"))
        params.update(self.expand.named_params(f"{prefix}.expand"))
        if self.pos_embed is not None:
            params[f"{prefix}.pos_embed"] = self.pos_embed
        return params


def scale_patch_size(k_old: int, k_new: int, p_old: int) -> int:
    """Co-scale the group size with the codebook so K/p stays constant.

    The codebook ratio must be a power of 4 (either direction); the
    returned patch size is p_old times that ratio.
    """
    if k_old < 1 or k_new < 1 or p_old < 1:
        raise ValueError("sizes must be positive")
    big, small = max(k_old, k_new), min(k_old, k_new)
    ratio = big // small
    if big % small != 0 or ratio & (ratio - 1) or ratio.bit_length() % 2 == 0:
        nearest = small * 4 ** max(1, round(np.log(max(big / small, 4)) / np.log(4)))
        raise ValueError(
            f"codebook ratio {k_new}/{k_old} is not a power of 4; "
            f"nearest valid size from {small} is {nearest}")
    if k_new >= k_old:
        return p_old * ratio
    if p_old % ratio != 0:
        raise ValueError(
            f"patch size {p_old} cannot shrink by {ratio}; "
            f"nearest valid patch size is {ratio}")
    return p_old // ratio


def export_codebook(path, codebook_values: np.ndarray, meta: dict) -> None:
    """Write a materialized codebook plus a JSON sidecar describing it."""
    from .serialize import save_tensors

    save_tensors(path, {"codebook.effective": codebook_values})
    sidecar = os.fspath(path) + ".json"
    tmp = sidecar + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, sidecar)
