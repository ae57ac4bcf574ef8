"""β-VAE objective with cyclic annealing, augmentation, training loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .layout import CLASSES, PAD, Layout, LayoutElement, Vocabulary, order_elements, tokenize
from .model import ICVT, DecoderOutput, kl_divergence
from .synthetic import Sample, split_of

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class BetaSchedule:
    period: int
    beta_low: float = 0.001
    beta_high: float = 0.3
    num_cycles: int = 2

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0 <= self.beta_low <= self.beta_high:
            raise ValueError("need 0 <= beta_low <= beta_high")


def beta_at(t: int, sched: BetaSchedule) -> float:
    """Low for the first half of each cycle, linear ramp to high by 3/4, then high."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    T = sched.period
    u = t % T
    if u <= T / 2:
        return sched.beta_low
    if u >= 3 * T / 4:
        return sched.beta_high
    frac = (u - T / 2) / (T / 4)
    return sched.beta_low + (sched.beta_high - sched.beta_low) * frac


def reconstruction_loss(out: DecoderOutput, target_cls: torch.Tensor, target_coords: torch.Tensor,
                        target_values: torch.Tensor | None = None, continuous: bool = False):
    """Sum of the five head losses; each averaged over valid steps per sample, then over the batch.

    Class CE covers every non-PAD target step (elements and EOS); coordinate
    losses cover element steps only.  Returns (total, per-head dict).
    """
    if out.cls.shape[:2] != target_cls.shape or target_coords.shape[:2] != target_cls.shape:
        raise ValueError("logits and targets disagree in shape")
    step_mask = (target_cls != PAD).to(out.cls.dtype)
    elem_mask = (target_cls < len(CLASSES)).to(out.cls.dtype)

    def per_sample(loss, mask):
        return (loss * mask).sum(-1) / mask.sum(-1).clamp_min(1.0)

    ce_cls = F.cross_entropy(out.cls.transpose(1, 2), target_cls, reduction="none")
    parts = {"cls": per_sample(ce_cls, step_mask).mean()}
    for k, name in enumerate("xywh"):
        if continuous:
            pred = out.coords[k].sigmoid()
            loss = (pred - target_values[..., k].to(pred.dtype)) ** 2
        else:
            tgt = target_coords[..., k].clamp(max=out.coords[k].shape[-1] - 1)
            loss = F.cross_entropy(out.coords[k].transpose(1, 2), tgt, reduction="none")
        parts[name] = per_sample(loss, elem_mask).mean()
    return sum(parts.values()), parts


def total_loss(recon, kl, beta):
    return recon + beta * kl


# Augmentation ----------------------------------------------------------------

def flip_layout(layout: Layout, n_bins: int = 128) -> Layout:
    flipped = [LayoutElement(e.cls, 1.0 - e.cx, e.cy, e.w, e.h) for e in layout.elements]
    return Layout(tuple(order_elements(flipped, n_bins)), layout.canvas)


def _jitter_colors(image: np.ndarray, rng: np.random.Generator, strength: float = 0.2) -> np.ndarray:
    b, c, s = rng.uniform(1 - strength, 1 + strength, size=3)
    img = image * b
    mean = img.mean()
    img = (img - mean) * c + mean
    gray = img.mean(axis=-1, keepdims=True)
    img = (img - gray) * s + gray
    return np.clip(img, 0.0, 1.0).astype(image.dtype)


def augment(sample: Sample, rng: np.random.Generator, flip: bool | None = None,
            color_jitter: bool = True, n_bins: int = 128) -> Sample:
    """Random horizontal flip (image, mask and boxes together) and color jitter (image only).

    ``flip=None`` flips with probability 0.5; True/False forces it.
    """
    do_flip = rng.random() < 0.5 if flip is None else flip
    image, sal, layout = sample.image, sample.saliency, sample.layout
    if do_flip:
        image = image[:, ::-1].copy()
        sal = sal[:, ::-1].copy()
        layout = flip_layout(layout, n_bins)
    if color_jitter:
        image = _jitter_colors(image, rng)
    return Sample(image, sal, layout, sample.id, sample.placement)


# Batching ----------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor
    cls: torch.Tensor
    coords: torch.Tensor
    values: torch.Tensor


def collate(samples: Sequence[Sample], vocab: Vocabulary, max_elements: int) -> Batch:
    toks = [tokenize(s.layout, vocab, max_elements) for s in samples]
    # trim trailing all-PAD steps; keep one step past the longest EOS
    longest = max(t.n_elements for t in toks) + 2
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))
    cls = torch.from_numpy(np.stack([t.cls[:longest] for t in toks]))
    coords = torch.from_numpy(np.stack([t.coords[:longest] for t in toks]))
    values = torch.from_numpy(np.stack([t.values[:longest] for t in toks]).astype(np.float32))
    return Batch(images, cls, coords, values)


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Batch composition as a pure function of (seed, iteration)."""
    rng = np.random.default_rng([seed, iteration])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def split_samples(samples: Sequence[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    train, val = [], []
    for s in samples:
        (val if split_of(s.id, val_fraction) == "val" else train).append(s)
    return train, val


# Checkpoints ---------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ICVT, config: TrainConfig, iteration: int,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = {"model": model.state_dict()}
    if optimizer is not None:
        blob["optimizer"] = optimizer.state_dict()
    torch.save(blob, path / "model.pt")
    with open(path / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
    rng_digest = hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()[:16]
    with open(path / "state.json", "w") as fh:
        json.dump({"iteration": iteration, "rng_digest": rng_digest}, fh)
    return path


def load_checkpoint(path: str | Path, with_optimizer: bool = False):
    """Returns (model, config, iteration[, optimizer_state])."""
    path = Path(path)
    for name in ("model.pt", "config.json", "state.json"):
        if not (path / name).exists():
            raise FileNotFoundError(f"checkpoint {path} is missing {name}")
    with open(path / "config.json") as fh:
        config = TrainConfig.from_dict(json.load(fh))
    with open(path / "state.json") as fh:
        state = json.load(fh)
    blob = torch.load(path / "model.pt", map_location="cpu", weights_only=True)
    model = ICVT(config.model)
    model.load_state_dict(blob["model"])
    model.eval()
    if with_optimizer:
        return model, config, state["iteration"], blob.get("optimizer")
    return model, config, state["iteration"]


def build_optimizer(model: ICVT, config: TrainConfig) -> torch.optim.Optimizer:
    backbone = list(model.visual.backbone.parameters())
    ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in ids]
    return torch.optim.AdamW(
        [{"params": rest, "lr": config.lr}, {"params": backbone, "lr": config.backbone_lr}],
        weight_decay=config.weight_decay,
    )


# Training loop ---------------------------------------------------------------------

def train_step(model: ICVT, batch: Batch, beta: float, continuous: bool = False):
    out, q, p = model(batch.images, batch.cls, batch.coords, values=batch.values)
    recon, parts = reconstruction_loss(
        out, batch.cls[:, 1:], batch.coords[:, 1:], batch.values[:, 1:], continuous=continuous,
    )
    kl_per = kl_divergence(q, p)
    kl = kl_per.mean()
    return total_loss(recon, kl, beta), recon, kl, parts, q


def train(config: TrainConfig, samples: Sequence[Sample], out_dir: str | Path | None = None,
          resume: str | Path | None = None, max_iters: int | None = None,
          on_log: Callable[[dict], None] | None = None) -> Iterator[Path]:
    """Run teacher-forced training; yields each checkpoint directory as it is written.

    Logs one JSON line per iteration to ``<out_dir>/train_log.jsonl``.
    """
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if not samples:
        raise ValueError("empty training set")
    mcfg = config.model
    vocab = Vocabulary(mcfg.n_bins)
    continuous = mcfg.coord_mode == "continuous"
    start = 0
    if resume is not None:
        model, _, start, opt_state = load_checkpoint(resume, with_optimizer=True)
        optimizer = build_optimizer(model, config)
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
    else:
        model = ICVT(mcfg)
        optimizer = build_optimizer(model, config)
    model.train()
    sched = BetaSchedule(config.cycle_iters, config.beta_low, config.beta_high, config.num_cycles)
    total = config.total_iters if max_iters is None else min(max_iters, config.total_iters)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "a" if resume is not None else "w") as log_fh:
        for it in range(start, total):
            idx = batch_indices(len(samples), config.batch_size, config.seed, it)
            rng = np.random.default_rng([config.seed, it, 1])
            batch_samples = [
                augment(samples[i], rng, flip=None if config.flip else False,
                        color_jitter=config.color_jitter, n_bins=mcfg.n_bins)
                for i in idx
            ]
            batch = collate(batch_samples, vocab, mcfg.max_elements)
            beta = beta_at(it, sched)
            loss, recon, kl, parts, q = train_step(model, batch, beta, continuous)
            recon, kl = recon.detach(), kl.detach()
            parts = {k: v.detach() for k, v in parts.items()}
            if not torch.isfinite(loss):
                snapshot = {
                    "iter": it, "recon": float(recon), "kl": float(kl), "beta": beta,
                    "batch_ids": [samples[i].id for i in idx],
                    "mu_absmax": float(q.mu.detach().abs().max()),
                    "log_sigma_max": float(q.log_sigma.detach().max()),
                }
                with open(out_dir / "nonfinite_snapshot.json", "w") as fh:
                    json.dump(snapshot, fh, indent=2)
                raise NonFiniteLossError(f"non-finite loss at iteration {it}", snapshot)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            rec = {
                "iter": it, "recon": float(recon), "kl": float(kl), "beta": beta,
                "kl_per_dim": float(kl) / mcfg.d_z,
                **{f"loss_{k}": float(v) for k, v in parts.items()},
            }
            log_fh.write(json.dumps(rec) + "\n")
            if on_log is not None:
                on_log(rec)
            if it % 100 == 0:
                logger.info("iter %d recon %.4f kl %.4f beta %.4f", it, rec["recon"], rec["kl"], beta)
            last = it + 1 == total
            if (it + 1) % config.checkpoint_every == 0 or last:
                model.eval()
                yield save_checkpoint(out_dir / f"ckpt_{it + 1:06d}", model, config, it + 1, optimizer)
                model.train()
    model.eval()


def train_to_end(config: TrainConfig, samples: Sequence[Sample], out_dir=None, **kw) -> Path:
    """Exhaust :func:`train` and return the last checkpoint path."""
    last = None
    for last in train(config, samples, out_dir, **kw):
        pass
    if last is None:
        raise RuntimeError("training produced no checkpoint")
    return last
