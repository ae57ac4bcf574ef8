"""Patch backbone and adapter producing the visual condition for cross-attention."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .geoalign import patch_boxes


@dataclass
class VisualCondition:
    content: torch.Tensor  # (B, L, d_model)
    pos_encoding: torch.Tensor | None  # (L, d_model), added to keys only
    patch_boxes: torch.Tensor  # (L, 4)

    @property
    def length(self) -> int:
        return self.content.shape[1]

    def repeat(self, n: int) -> "VisualCondition":
        """Repeat each batch entry ``n`` times (image-major)."""
        return VisualCondition(self.content.repeat_interleave(n, dim=0), self.pos_encoding, self.patch_boxes)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., L, P*P*C), row-major patches, (row, col, channel) inside a patch."""
    *lead, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(*lead, gh, patch, gw, patch, C)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def sine_pos_2d(rows: int, cols: int, d_model: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed 2-D encoding of grid indices: row half then column half, (L, d_model)."""
    if d_model % 4:
        raise ValueError("d_model must be divisible by 4")
    half = d_model // 2
    n_freq = half // 2
    freq = temperature ** (-torch.arange(n_freq, dtype=torch.float64) / n_freq)

    def axis(pos):
        arg = pos[:, None] * freq
        return torch.cat([arg.sin(), arg.cos()], dim=-1)

    r = axis(torch.arange(rows, dtype=torch.float64))
    c = axis(torch.arange(cols, dtype=torch.float64))
    pe = torch.cat([r[:, None, :].expand(rows, cols, half), c[None, :, :].expand(rows, cols, half)], dim=-1)
    return pe.reshape(rows * cols, d_model).float()


def _encoder(d: int, heads: int, layers: int, dropout: float) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(
        d, heads, dim_feedforward=4 * d, dropout=dropout, activation="gelu",
        batch_first=True, norm_first=True,
    )
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class PatchBackbone(nn.Module):
    """Small pre-norm ViT without a class token."""

    def __init__(self, n_patches: int, patch: int, d_vision: int = 192, layers: int = 4, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.patch = patch
        self.embed = nn.Linear(3 * patch * patch, d_vision)
        self.pos = nn.Parameter(torch.randn(n_patches, d_vision) * 0.02)
        self.encoder = _encoder(d_vision, heads, layers, dropout)
        self.norm = nn.LayerNorm(d_vision)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.embed(patches) + self.pos
        return self.norm(self.encoder(x))


class Adapter(nn.Module):
    """Transformer layer(s) on backbone features, then a projection to d_model."""

    def __init__(self, d_vision: int, d_model: int, layers: int = 1, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.encoder = _encoder(d_vision, heads, layers, dropout) if layers > 0 else nn.Identity()
        self.proj = nn.Linear(d_vision, d_model)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.proj(self.encoder(features))


class VisualEncoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        rows, cols = cfg.grid
        self.grid = (rows, cols)
        self.patch = cfg.patch_size
        self.backbone = PatchBackbone(rows * cols, cfg.patch_size, cfg.d_vision, cfg.vision_layers, cfg.vision_heads, cfg.vision_dropout)
        self.adapter = Adapter(cfg.d_vision, cfg.d_model, cfg.adapter_layers, cfg.vision_heads, cfg.vision_dropout)
        self.use_pos = cfg.key_pos_encoding
        self.register_buffer("pos_encoding", sine_pos_2d(rows, cols, cfg.d_model), persistent=False)
        self.register_buffer("boxes", patch_boxes(rows, cols), persistent=False)

    def forward(self, images: torch.Tensor) -> VisualCondition:
        """images: (B, H, W, 3) in [0, 1]."""
        feats = self.backbone(patchify(images, self.patch))
        content = self.adapter(feats)
        pos = self.pos_encoding.to(content.dtype) if self.use_pos else None
        return VisualCondition(content, pos, self.boxes.to(content.dtype))
