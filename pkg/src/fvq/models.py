"""Small image autoencoder around the quantizer: non-overlapping patch
embedding, a few transformer blocks each side, and a linear un-embedding
back to pixels. The same encoder/decoder serves every projector arm so
comparisons isolate the quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .bridge import Bridge, BridgeConfig
from .quantizer import Codebook, QuantizeResult, commitment_loss, quantize_ste, residual_quantize
from .tensor import Tensor


@dataclass
class VQNConfig:
    image_size: int = 16
    image_patch: int = 4
    channels: int = 1
    d: int = 32
    k: int = 1024
    bridge: BridgeConfig | None = field(default_factory=BridgeConfig)
    rq_depth: int = 1
    beta: float = 0.25
    encoder_depth: int = 1
    decoder_depth: int = 1

    def __post_init__(self):
        if self.image_size % self.image_patch != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch {self.image_patch}")
        if self.rq_depth < 1:
            raise ValueError("rq_depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.image_size // self.image_patch

    @property
    def tokens_per_image(self) -> int:
        return self.grid * self.grid


class IdentityProjector:
    """No mapping: the quantizer sees the base codebook directly."""

    def effective(self, codebook: Tensor) -> Tensor:
        return codebook

    def named_params(self, prefix: str = "projector") -> dict[str, Tensor]:
        return {}


def _apply_blocks(blocks, x: Tensor, seq_len: int) -> Tensor:
    """Run blocks over each length-seq_len row segment independently."""
    for block in blocks:
        x = block(x, seq_len)
    return x


class VQN:
    """Encoder → quantizer (optionally through a projector) → decoder."""

    def __init__(self, cfg: VQNConfig, rng: np.random.Generator, projector=None):
        self.cfg = cfg
        patch_dim = cfg.image_patch ** 2 * cfg.channels
        self.patch_embed = nn.Linear(patch_dim, cfg.d, rng)
        self.enc_pos = Tensor(rng.normal(0.0, nn.INIT_STD, (cfg.tokens_per_image, cfg.d)),
                              requires_grad=True)
        self.enc_blocks = [nn.TransformerBlock(cfg.d, None, rng)
                           for _ in range(cfg.encoder_depth)]
        self.codebook = Codebook(cfg.k, cfg.d, rng)
        if projector is not None:
            self.projector = projector
        elif cfg.bridge is not None:
            self.projector = Bridge(cfg.k, cfg.d, cfg.bridge, rng)
        else:
            self.projector = IdentityProjector()
        self.dec_pos = Tensor(rng.normal(0.0, nn.INIT_STD, (cfg.tokens_per_image, cfg.d)),
                              requires_grad=True)
        self.dec_blocks = [nn.TransformerBlock(cfg.d, None, rng)
                           for _ in range(cfg.decoder_depth)]
        self.unembed = nn.Linear(cfg.d, patch_dim, rng)

    # --- encoder -----------------------------------------------------

    def extract_patches(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        b, h, w, c = images.shape
        if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise T.ShapeError(
                f"expected images (*, {cfg.image_size}, {cfg.image_size}, "
                f"{cfg.channels}), got {images.shape}")
        p, g = cfg.image_patch, cfg.grid
        patches = images.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
        return patches.reshape(b * g * g, p * p * c)

    def encode(self, images: np.ndarray) -> Tensor:
        patches = Tensor(self.extract_patches(np.asarray(images, dtype=np.float64)))
        tokens = self.patch_embed(patches)
        b = images.shape[0]
        tokens = T.add(tokens, T.tile_rows(self.enc_pos, b))
        return _apply_blocks(self.enc_blocks, tokens, self.cfg.tokens_per_image)

    # --- decoder -----------------------------------------------------

    def decode(self, z_q: Tensor) -> Tensor:
        cfg = self.cfg
        total = z_q.values.shape[0]
        if total % cfg.tokens_per_image != 0:
            raise T.ShapeError(
                f"{total} quantized vectors do not tile {cfg.tokens_per_image}-token images")
        b = total // cfg.tokens_per_image
        tokens = T.add(z_q, T.tile_rows(self.dec_pos, b))
        tokens = _apply_blocks(self.dec_blocks, tokens, cfg.tokens_per_image)
        pixels = self.unembed(tokens)
        p, g, c = cfg.image_patch, cfg.grid, cfg.channels
        img = T.reshape(pixels, (b, g, g, p, p, c))
        img = T.transpose(img, (0, 1, 3, 2, 4, 5))
        return T.reshape(img, (b, cfg.image_size, cfg.image_size, c))

    # --- full network ------------------------------------------------

    def effective_codebook(self) -> Tensor:
        return self.projector.effective(self.codebook.entries)

    def quantize(self, z_e: Tensor, effective: Tensor) -> QuantizeResult:
        if self.cfg.rq_depth == 1:
            return quantize_ste(z_e, effective)
        return residual_quantize(z_e, effective, self.cfg.rq_depth)

    def forward(self, images: np.ndarray) -> tuple[Tensor, QuantizeResult, Tensor]:
        z_e = self.encode(images)
        effective = self.effective_codebook()
        result = self.quantize(z_e, effective)
        recon = self.decode(result.z_q)
        return recon, result, effective

    def named_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        params.update(self.patch_embed.named_params("encoder.embed"))
        params["encoder.pos_embed"] = self.enc_pos
        for i, block in enumerate(self.enc_blocks):
            params.update(block.named_params(f"encoder.block{i}"))
        params.update(self.codebook.named_params("codebook"))
        params.update(self.projector.named_params("projector"))
        params["decoder.pos_embed"] = self.dec_pos
        for i, block in enumerate(self.dec_blocks):
            params.update(block.named_params(f"decoder.block{i}"))
        params.update(self.unembed.named_params("decoder.unembed"))
        return params

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params().items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != p.values.shape:
                raise ValueError(f"parameter {name!r} has shape {tensors[name].shape}, "
                                 f"expected {p.values.shape}")
            p.values = tensors[name].astype(np.float64).copy()


def reconstruction_loss(recon: Tensor, images: np.ndarray) -> Tensor:
    target = np.asarray(images, dtype=np.float64)
    if recon.values.shape != target.shape:
        raise T.ShapeError(f"recon {recon.values.shape} vs images {target.shape}")
    return T.reduce_mean(T.square(T.sub(recon, Tensor(target))))


def training_loss(recon: Tensor, images: np.ndarray, z_e: Tensor,
                  z_q_raw: Tensor, beta: float) -> tuple[Tensor, float, float]:
    """Pixel MSE plus the commitment pair; returns (loss, mse, commit)."""
    rec = reconstruction_loss(recon, images)
    commit = commitment_loss(z_e, z_q_raw, beta)
    total = T.add(rec, commit)
    return total, rec.item(), commit.item()
