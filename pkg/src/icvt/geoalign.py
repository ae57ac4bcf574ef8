"""Geometry Alignment: patch boxes, geometry embeddings and fused cross-attention.

Three ways of injecting box geometry into the layout-to-image cross-attention:

* ``adding``  -- geometry embeddings are summed onto content queries/keys, so
  the logits carry content, geometry and two cross terms;
* ``concat``  -- geometry is concatenated along the feature axis, which leaves
  only the content and geometry blocks in the logits;
* ``manual``  -- the geometry block is replaced by a learned function of the
  relative geometry between each layout box and each image patch.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def patch_boxes(rows: int, cols: int, dtype=torch.float32) -> torch.Tensor:
    """(cx, cy, w, h) of every grid cell, row-major, normalized to the canvas."""
    if rows < 1 or cols < 1:
        raise ValueError("grid must have at least one row and one column")
    r = torch.arange(rows, dtype=torch.float64)
    c = torch.arange(cols, dtype=torch.float64)
    rr, cc = torch.meshgrid(r, c, indexing="ij")
    cx = (cc.reshape(-1) + 0.5) / cols
    cy = (rr.reshape(-1) + 0.5) / rows
    w = torch.full_like(cx, 1.0 / cols)
    h = torch.full_like(cy, 1.0 / rows)
    return torch.stack([cx, cy, w, h], dim=-1).to(dtype)


def sine_embed(values: torch.Tensor, dim: int, temperature: float = 10000.0, scale: float = 2 * math.pi) -> torch.Tensor:
    """Sinusoidal map of scalars in [0, 1] to ``dim`` features (sin block, then cos block)."""
    n_freq = (dim + 1) // 2
    i = torch.arange(n_freq, dtype=values.dtype, device=values.device)
    freq = temperature ** (-i / n_freq)
    arg = values[..., None] * scale * freq
    return torch.cat([arg.sin(), arg.cos()], dim=-1)[..., :dim]


class GeometryEmbedding(nn.Module):
    """Maps (cx, cy, w, h) boxes to ``dim`` features, fixed sinusoidal or learned."""

    def __init__(self, dim: int, mode: str = "sine"):
        super().__init__()
        if mode not in ("sine", "learned"):
            raise ValueError(f"unknown geometry embedding {mode!r}")
        if mode == "sine" and dim % 4:
            raise ValueError("sine geometry embedding needs dim divisible by 4")
        self.dim = dim
        self.mode = mode
        if mode == "learned":
            self.mlp = nn.Sequential(nn.Linear(4, dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, boxes: torch.Tensor) -> torch.Tensor:
        if self.mode == "learned":
            return self.mlp(boxes)
        per = self.dim // 4
        return torch.cat([sine_embed(boxes[..., k], per) for k in range(4)], dim=-1)


# Functional fusion forms ---------------------------------------------------

def _scaled(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])


def _check_pair(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"{what}: feature dims differ ({a.shape[-1]} vs {b.shape[-1]})")


def attention_logits(q_c, k_c):
    _check_pair(q_c, k_c, "query/key")
    return _scaled(q_c, k_c)


def adding_logits(q_c, q_g, k_c, k_g):
    _check_pair(q_c, q_g, "content/geometry query")
    _check_pair(k_c, k_g, "content/geometry key")
    _check_pair(q_c, k_c, "query/key")
    return _scaled(q_c + q_g, k_c + k_g)


def concat_logits(q_c, q_g, k_c, k_g):
    _check_pair(q_c, q_g, "content/geometry query")
    _check_pair(k_c, k_g, "content/geometry key")
    _check_pair(q_c, k_c, "query/key")
    return _scaled(torch.cat([q_c, q_g], dim=-1), torch.cat([k_c, k_g], dim=-1))


def manual_logits(q_c, k_c, geometry_term):
    _check_pair(q_c, k_c, "query/key")
    return (q_c @ k_c.transpose(-2, -1) + geometry_term) / math.sqrt(q_c.shape[-1])


def fuse_adding(q_c, q_g, k_c, k_g, v_c):
    return adding_logits(q_c, q_g, k_c, k_g).softmax(dim=-1) @ v_c


def fuse_concat(q_c, q_g, k_c, k_g, v_c):
    return concat_logits(q_c, q_g, k_c, k_g).softmax(dim=-1) @ v_c


def fuse_manual(q_c, k_c, v_c, geometry_term):
    return manual_logits(q_c, k_c, geometry_term).softmax(dim=-1) @ v_c


# Relative geometry (manual mode) -------------------------------------------

def relative_geometry(layout_boxes: torch.Tensor, patch_boxes: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Relative features between layout boxes (..., T, 4) and patches (L, 4) -> (..., T, L, 4).

    Centre offsets are clamped at ``eps`` before the log so coincident centres
    stay finite.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if (layout_boxes[..., 2:] <= 0).any() or (patch_boxes[..., 2:] <= 0).any():
        raise ValueError("box widths and heights must be positive")
    li = layout_boxes[..., :, None, :]
    pj = patch_boxes[..., None, :, :]
    dx = (li[..., 0] - pj[..., 0]).abs().clamp_min(eps) / li[..., 2]
    dy = (li[..., 1] - pj[..., 1]).abs().clamp_min(eps) / li[..., 3]
    rw = li[..., 2] / pj[..., 2]
    rh = li[..., 3] / pj[..., 3]
    return torch.stack([dx, dy, rw, rh], dim=-1).log()


class ManualGeometryTerm(nn.Module):
    """G = ReLU(w_g^T FC(r)), one output per attention head."""

    def __init__(self, hidden: int = 64, n_heads: int = 1):
        super().__init__()
        self.fc = nn.Linear(4, hidden)
        self.w_g = nn.Linear(hidden, n_heads)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        # (..., T, L, 4) -> (..., heads, T, L)
        g = F.relu(self.w_g(F.relu(self.fc(r))))
        return g.movedim(-1, -3)


def manual_geometry_term(r: torch.Tensor, module: ManualGeometryTerm) -> torch.Tensor:
    """Single-head convenience: (T, L, 4) -> (T, L)."""
    return module(r).squeeze(-3)


# Multi-head cross-attention with geometry fusion ---------------------------

def _split(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


class GeometryCrossAttention(nn.Module):
    """Layout queries attend to image patches with optional geometry fusion."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        fusion: str = "none",
        geometry_embedding: str | None = "sine",
        dropout: float = 0.0,
        relation_hidden: int = 64,
        relation_eps: float = 1e-3,
    ):
        super().__init__()
        if fusion not in ("none", "adding", "concat", "manual"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.n_heads = n_heads
        self.fusion = fusion
        self.relation_eps = relation_eps
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        if fusion in ("adding", "concat"):
            self.geo_embed = GeometryEmbedding(d_model, geometry_embedding or "sine")
            self.qg_proj = nn.Linear(d_model, d_model)
            self.kg_proj = nn.Linear(d_model, d_model)
            # geometry query for steps without a box (z-as-BOS, EOS, PAD)
            self.null_geometry = nn.Parameter(torch.zeros(d_model))
        elif fusion == "manual":
            self.relation = ManualGeometryTerm(relation_hidden, n_heads)

    def logits(self, x, memory, memory_pos, patch_geometry, query_boxes, query_has_box):
        """Per-head attention logits (B, heads, T, L)."""
        q_c = _split(self.q_proj(x), self.n_heads)
        keys = memory if memory_pos is None else memory + memory_pos
        k_c = _split(self.k_proj(keys), self.n_heads)
        if self.fusion == "none":
            return attention_logits(q_c, k_c)
        if self.fusion == "manual":
            safe = torch.where(query_has_box[..., None], query_boxes, torch.full_like(query_boxes, 0.5))
            r = relative_geometry(safe, patch_geometry, self.relation_eps)
            g = self.relation(r) * query_has_box[:, None, :, None]
            return manual_logits(q_c, k_c, g)
        g_q = self.geo_embed(query_boxes)
        g_q = torch.where(query_has_box[..., None], g_q, self.null_geometry.expand_as(g_q))
        q_g = _split(self.qg_proj(g_q), self.n_heads)
        k_g = self.kg_proj(self.geo_embed(patch_geometry))
        k_g = _split(k_g.expand(x.shape[0], -1, -1), self.n_heads)
        if self.fusion == "adding":
            return adding_logits(q_c, q_g, k_c, k_g)
        return concat_logits(q_c, q_g, k_c, k_g)

    def forward(self, x, memory, memory_pos, patch_geometry, query_boxes, query_has_box):
        b, t, d = x.shape
        attn = self.logits(x, memory, memory_pos, patch_geometry, query_boxes, query_has_box).softmax(-1)
        v = _split(self.v_proj(memory), self.n_heads)
        out = (self.dropout(attn) @ v).transpose(1, 2).reshape(b, t, d)
        return self.out_proj(out)
