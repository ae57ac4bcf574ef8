"""ICVT: posterior encoder with attention pooling, latent layer, autoregressive decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .geoalign import GeometryCrossAttention
from .layout import (
    BOS,
    CLASSES,
    EOS,
    PAD,
    Layout,
    LayoutElement,
    Vocabulary,
    order_elements,
    tokenize,
)
from .vision import VisualCondition, VisualEncoder

N_CLASS_TOKENS = len(CLASSES) + 3


@dataclass
class PosteriorParams:
    mu: torch.Tensor
    log_sigma: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()


def reparameterize(params: PosteriorParams, noise: torch.Tensor) -> torch.Tensor:
    return params.mu + params.log_sigma.exp() * noise


def kl_divergence(q: PosteriorParams, p: PosteriorParams | None = None) -> torch.Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis.

    ``p=None`` is the standard normal prior.
    """
    if p is None:
        return 0.5 * (q.mu ** 2 + (2 * q.log_sigma).exp() - 1 - 2 * q.log_sigma).sum(-1)
    var_ratio = (2 * (q.log_sigma - p.log_sigma)).exp()
    mean_term = ((q.mu - p.mu) / p.log_sigma.exp()) ** 2
    return 0.5 * (var_ratio + mean_term - 1 - 2 * (q.log_sigma - p.log_sigma)).sum(-1)


# Blocks --------------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
        """``allowed``: boolean (B, T, T) or (T, T), True where a query may see a key."""
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        if allowed is not None:
            if allowed.dim() == 3:
                allowed = allowed[:, None]
            logits = logits.masked_fill(~allowed, float("-inf"))
        attn = self.dropout(logits.softmax(-1))
        return self.out_proj((attn @ v).transpose(1, 2).reshape(b, t, d))


class ICVTBlock(nn.Module):
    """Pre-norm block: self-attention, geometry-fused cross-attention, FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d)
        self.self_attn = SelfAttention(d, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(d)
        self.cross_attn = GeometryCrossAttention(
            d, cfg.n_heads, cfg.fusion, cfg.geometry_embedding, cfg.dropout,
            cfg.relation_hidden, cfg.relation_eps,
        )
        self.norm3 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, cfg.d_ff), nn.GELU(), nn.Dropout(cfg.dropout), nn.Linear(cfg.d_ff, d))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, cond: VisualCondition, boxes, has_box, allowed=None):
        x = x + self.drop(self.self_attn(self.norm1(x), allowed))
        x = x + self.drop(self.cross_attn(self.norm2(x), cond.content, cond.pos_encoding, cond.patch_boxes, boxes, has_box))
        return x + self.drop(self.ffn(self.norm3(x)))


class Stack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(ICVTBlock(cfg) for _ in range(cfg.n_layers))
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x, cond, boxes, has_box, allowed=None):
        for block in self.blocks:
            x = block(x, cond, boxes, has_box, allowed)
        return self.norm(x)


class AttentionPool(nn.Module):
    """Single learned query attending over a sequence; returns (pooled, weights)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.query = nn.Parameter(torch.randn(d_model) * 0.02)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None):
        if x.shape[-2] == 0:
            raise ValueError("cannot pool an empty sequence")
        logits = self.k_proj(x) @ self.query / math.sqrt(x.shape[-1])
        if valid is not None:
            logits = logits.masked_fill(~valid, float("-inf"))
        weights = logits.softmax(-1)
        return (weights[..., None] * self.v_proj(x)).sum(-2), weights


class PosteriorHead(nn.Module):
    def __init__(self, d_model: int, d_z: int):
        super().__init__()
        self.mu = nn.Linear(d_model, d_z)
        self.log_sigma = nn.Linear(d_model, d_z)

    def forward(self, pooled: torch.Tensor) -> PosteriorParams:
        return PosteriorParams(self.mu(pooled), self.log_sigma(pooled))


class LearnedPrior(nn.Module):
    """p(z | X) from the mean-pooled visual condition."""

    def __init__(self, d_model: int, d_z: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, 2 * d_z))

    def forward(self, cond: VisualCondition) -> PosteriorParams:
        mu, log_sigma = self.net(cond.content.mean(1)).chunk(2, dim=-1)
        return PosteriorParams(mu, log_sigma)


class LayoutEmbedding(nn.Module):
    """Concatenated per-attribute embeddings of (c, x, y, w, h), each d_attr wide."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.continuous = cfg.coord_mode == "continuous"
        self.cls = nn.Embedding(N_CLASS_TOKENS, cfg.d_attr)
        if self.continuous:
            self.coord = nn.ModuleList(nn.Linear(1, cfg.d_attr) for _ in range(4))
            self.no_coord = nn.Parameter(torch.zeros(4, cfg.d_attr))
        else:
            # last index is the sentinel used on special steps
            self.coord = nn.ModuleList(nn.Embedding(cfg.n_bins + 1, cfg.d_attr) for _ in range(4))

    def forward(self, cls, coords, values=None):
        parts = [self.cls(cls)]
        is_elem = (cls < len(CLASSES))[..., None]
        for k in range(4):
            if self.continuous:
                e = self.coord[k](values[..., k:k + 1])
                parts.append(torch.where(is_elem, e, self.no_coord[k].expand_as(e)))
            else:
                parts.append(self.coord[k](coords[..., k]))
        return torch.cat(parts, dim=-1)


@dataclass
class DecoderOutput:
    cls: torch.Tensor  # (B, S, 6)
    coords: list  # 4 x (B, S, n_bins), or 4 x (B, S) in continuous mode


# Model ---------------------------------------------------------------------

class ICVT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocabulary(cfg.n_bins)
        d = cfg.d_model
        self.visual = VisualEncoder(cfg)
        self.embed = LayoutEmbedding(cfg)
        self.encoder = Stack(cfg)
        self.pool = AttentionPool(d)
        self.posterior = PosteriorHead(d, cfg.d_z)
        self.prior_net = LearnedPrior(d, cfg.d_z) if cfg.prior == "learned" else None
        self.decoder = Stack(cfg)
        self.z_proj = nn.Linear(cfg.d_z, d)
        self.step_pos = nn.Embedding(cfg.max_elements + 2, d) if cfg.decoder_pos_embedding else None
        self.cls_head = nn.Linear(d, N_CLASS_TOKENS)
        out = 1 if cfg.coord_mode == "continuous" else cfg.n_bins
        self.coord_heads = nn.ModuleList(nn.Linear(d, out) for _ in range(4))

    # geometry of the query steps -----------------------------------------
    def step_boxes(self, cls, coords, values=None):
        has_box = cls < len(CLASSES)
        if self.cfg.coord_mode == "continuous":
            boxes = values.clamp(1e-3, 1.0)
        else:
            idx = coords.clamp(max=self.cfg.n_bins - 1)
            boxes = (idx.to(self.z_proj.weight.dtype) + 0.5) / self.cfg.n_bins
        return boxes, has_box

    def encode_image(self, images: torch.Tensor) -> VisualCondition:
        return self.visual(images)

    def prior(self, cond: VisualCondition) -> PosteriorParams:
        b = cond.content.shape[0]
        if self.prior_net is not None:
            return self.prior_net(cond)
        zeros = cond.content.new_zeros(b, self.cfg.d_z)
        return PosteriorParams(zeros, zeros.clone())

    def encode_layout(self, cls, coords, cond: VisualCondition, values=None):
        """Joint layout/image sequence from element steps only (no BOS, no PE, no mask).

        ``cls``/``coords`` cover element steps, padded with PAD. Returns (joint, valid).
        """
        valid = cls < len(CLASSES)
        empty = ~valid.any(-1)
        # keep softmax defined for empty rows; their posterior is replaced by the prior
        valid_keys = valid.clone()
        valid_keys[empty, 0] = True
        x = self.embed(cls, coords, values)
        boxes, has_box = self.step_boxes(cls, coords, values)
        allowed = valid_keys[:, None, :].expand(-1, cls.shape[1], -1)
        joint = self.encoder(x, cond, boxes, has_box, allowed)
        return joint, valid_keys, empty

    def posterior_params(self, cls, coords, cond: VisualCondition, values=None) -> PosteriorParams:
        joint, valid, empty = self.encode_layout(cls, coords, cond, values)
        pooled, _ = self.pool(joint, valid)
        q = self.posterior(pooled)
        if empty.any():
            p = self.prior(cond)
            q = PosteriorParams(
                torch.where(empty[:, None], p.mu, q.mu),
                torch.where(empty[:, None], p.log_sigma, q.log_sigma),
            )
        return q

    def decode(self, cls, coords, z, cond: VisualCondition, values=None) -> DecoderOutput:
        """Teacher-forced decoder pass over a BOS-framed input sequence (B, S)."""
        if not bool((cls[:, 0] == BOS).all()):
            raise ValueError("decoder input must start with BOS")
        b, s = cls.shape
        x = self.embed(cls, coords, values)
        x = torch.cat([self.z_proj(z)[:, None, :], x[:, 1:]], dim=1)
        if self.step_pos is not None:
            x = x + self.step_pos.weight[:s]
        boxes, has_box = self.step_boxes(cls, coords, values)
        causal = torch.ones(s, s, dtype=torch.bool, device=cls.device).tril()
        h = self.decoder(x, cond, boxes, has_box, causal)
        coord_logits = [head(h) for head in self.coord_heads]
        if self.cfg.coord_mode == "continuous":
            coord_logits = [c.squeeze(-1) for c in coord_logits]
        return DecoderOutput(self.cls_head(h), coord_logits)

    def forward(self, images, cls, coords, noise=None, values=None):
        """Training pass. ``cls``/``coords``: full framed tokens (B, S) / (B, S, 4)."""
        cond = self.encode_image(images)
        q = self.posterior_params(cls[:, 1:], coords[:, 1:], cond, None if values is None else values[:, 1:])
        if noise is None:
            noise = torch.randn_like(q.mu)
        z = reparameterize(q, noise)
        out = self.decode(cls[:, :-1], coords[:, :-1], z, cond, None if values is None else values[:, :-1])
        p = self.prior(cond) if self.prior_net is not None else None
        return out, q, p

    # sampling ----------------------------------------------------------------
    def _pick(self, logits, temperature, generator):
        if temperature <= 0:
            return logits.argmax(-1)
        probs = (logits.double() / temperature).softmax(-1)
        return torch.multinomial(probs, 1, generator=generator).squeeze(-1)

    @torch.no_grad()
    def autoregress(self, cond, z, prefix: list[Layout] | None = None, max_len=None, temperature=1.0, generator=None):
        """Sample element sequences. Returns per-row lists of element tuples (cls, x, y, w, h indices/values)."""
        cfg = self.cfg
        max_len = cfg.max_elements if max_len is None else max_len
        if max_len > cfg.max_elements:
            raise ValueError("max_len exceeds max_elements")
        b = z.shape[0]
        length = max_len + 1
        cls = torch.full((b, length), PAD, dtype=torch.long)
        coords = torch.full((b, length, 4), cfg.n_bins, dtype=torch.long)
        values = torch.zeros(b, length, 4)
        cls[:, 0] = BOS
        start = torch.ones(b, dtype=torch.long)
        if prefix is not None:
            for i, lay in enumerate(prefix):
                if len(lay) > max_len:
                    raise ValueError(f"partial layout has {len(lay)} elements, max_len is {max_len}")
                t = tokenize(lay, self.vocab, cfg.max_elements)
                n = len(lay)
                cls[i, 1:n + 1] = torch.from_numpy(t.cls[1:n + 1])
                coords[i, 1:n + 1] = torch.from_numpy(t.coords[1:n + 1])
                values[i, 1:n + 1] = torch.from_numpy(t.values[1:n + 1]).float()
                start[i] = n + 1
        done = start > max_len
        z = z.to(self.z_proj.weight.dtype)
        values = values.to(z.dtype)
        banned = torch.zeros(N_CLASS_TOKENS, dtype=torch.bool)
        banned[[BOS, PAD]] = True
        for step in range(1, length):
            active = (~done) & (start <= step)
            if not active.any():
                if done.all():
                    break
                continue
            out = self.decode(cls[:, :step], coords[:, :step], z, cond, values[:, :step])
            cl = out.cls[:, -1].masked_fill(banned, float("-inf"))
            c = self._pick(cl, temperature, generator)
            if cfg.coord_mode == "continuous":
                xyz = torch.stack([o[:, -1].sigmoid() for o in out.coords], -1).to(values.dtype)
                idx = torch.clamp((xyz * cfg.n_bins).long(), max=cfg.n_bins - 1)
            else:
                idx = torch.stack([self._pick(o[:, -1], temperature, generator) for o in out.coords], -1)
                xyz = (idx.to(values.dtype) + 0.5) / cfg.n_bins
            is_elem = c != EOS
            write = active & is_elem
            cls[write, step] = c[write]
            coords[write, step] = idx[write]
            values[write, step] = xyz[write]
            done = done | (active & ~is_elem)
        rows = []
        for i in range(b):
            n_elem = int((cls[i, 1:] < len(CLASSES)).sum())
            rows.append([
                (CLASSES[int(cls[i, j])], *values[i, j].tolist()) for j in range(1, n_elem + 1)
            ])
        return rows

    def _to_layout(self, elems, canvas):
        return Layout(tuple(LayoutElement(*e) for e in elems), canvas)

    @property
    def canvas(self):
        return (self.cfg.image_width, self.cfg.image_height)

    @torch.no_grad()
    def generate(self, cond, z, max_len=None, temperature=1.0, generator=None) -> list[Layout]:
        rows = self.autoregress(cond, z, None, max_len, temperature, generator)
        return [
            Layout(tuple(order_elements(self._to_layout(r, self.canvas).elements, self.cfg.n_bins)), self.canvas)
            for r in rows
        ]

    @torch.no_grad()
    def complete(self, cond, partial: list[Layout], z, max_len=None, temperature=1.0, generator=None,
                 finished: bool = False) -> list[Layout]:
        """Continue each partial layout; the output starts with the partial elements verbatim."""
        if finished:
            return list(partial)
        rows = self.autoregress(cond, z, partial, max_len, temperature, generator)
        result = []
        for lay, r in zip(partial, rows):
            tail = order_elements(self._to_layout(r[len(lay):], self.canvas).elements, self.cfg.n_bins)
            result.append(Layout(tuple(lay.elements) + tuple(tail), lay.canvas))
        return result

    def sample_z(self, cond: VisualCondition, generator=None) -> torch.Tensor:
        p = self.prior(cond)
        noise = torch.randn(p.mu.shape, generator=generator, dtype=p.mu.dtype)
        return reparameterize(p, noise)

    @torch.no_grad()
    def sample_layouts(self, images: np.ndarray, n_z: int = 1, seed: int = 0, temperature: float = 1.0,
                       batch_size: int = 128) -> list[list[Layout]]:
        """For each image, ``n_z`` layouts generated from prior draws. Deterministic in ``seed``."""
        was_training = self.training
        self.eval()
        gen = torch.Generator().manual_seed(seed)
        out: list[list[Layout]] = []
        images = torch.as_tensor(np.asarray(images), dtype=self.z_proj.weight.dtype)
        per = max(1, batch_size // max(n_z, 1))
        for i in range(0, len(images), per):
            cond = self.encode_image(images[i:i + per]).repeat(n_z)
            z = self.sample_z(cond, gen)
            lays = self.generate(cond, z, temperature=temperature, generator=gen)
            out.extend(lays[k * n_z:(k + 1) * n_z] for k in range(len(lays) // n_z))
        self.train(was_training)
        return out
