"""Procedural poster samples: masked subject image, saliency mask and layout.

Each sample is a pure function of ``(config.seed, seed)``.  The salient blob
occupies a band of rows; design elements are stacked in the free bands above
and below it, so the ground truth never occludes the subject.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .layout import (
    Layout,
    LayoutElement,
    canonicalize,
    layout_to_record,
    read_jsonl,
    record_to_layout,
    write_jsonl,
)

PLACEMENTS = ("top", "bottom", "middle", "random")


class DatasetError(Exception):
    """Missing or unreadable dataset files."""


@dataclass
class GenConfig:
    height: int = 128
    width: int = 96
    patch_size: int = 16
    placements: tuple[str, ...] = PLACEMENTS
    min_texts: int = 2
    max_texts: int = 6
    substrate_prob: float = 0.3
    logo_prob: float = 0.5
    # hand-placement imprecision of designers/annotators, in normalized units
    jitter: float = 0.004
    seed: int = 0

    def __post_init__(self):
        self.placements = tuple(self.placements)
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("image size must be divisible by the patch size")
        bad = set(self.placements) - set(PLACEMENTS)
        if bad or not self.placements:
            raise ValueError(f"invalid placement modes {sorted(bad)}")
        if not 1 <= self.min_texts <= self.max_texts:
            raise ValueError("invalid text count range")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["placements"] = list(self.placements)
        return d


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # H x W x 3 float in [0, 1], already multiplied by the mask
    saliency: np.ndarray  # H x W uint8 in {0, 1}
    layout: Layout
    id: str
    placement: str = field(default="", compare=False)


def _rng(config: GenConfig, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, seed]))


def _background(rng, h, w) -> np.ndarray:
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    t = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0 + (c1 - c0) * t[..., None]
    img = img + rng.normal(0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _blob_mask(rng, h, w, cy, cx, bh, bw) -> np.ndarray:
    """Ellipse or rounded rectangle; all sizes in pixels."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy = (yy - cy) / (bh / 2)
    dx = (xx - cx) / (bw / 2)
    if rng.random() < 0.5:
        mask = dx ** 2 + dy ** 2 <= 1.0
    else:
        r = rng.uniform(0.2, 0.5)
        qx = np.maximum(np.abs(dx) - (1 - r), 0)
        qy = np.maximum(np.abs(dy) - (1 - r), 0)
        mask = (np.abs(dx) <= 1) & (np.abs(dy) <= 1) & (qx ** 2 + qy ** 2 <= r ** 2)
    return mask.astype(np.uint8)


def _subject_texture(rng, h, w) -> np.ndarray:
    base = rng.uniform(0.2, 1.0, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    fy, fx = rng.uniform(0.05, 0.2, size=2)
    shade = 0.75 + 0.25 * np.sin(fy * yy + fx * xx + rng.uniform(0, 6.28))
    return np.clip(base * shade[..., None], 0, 1)


def _blob_center_y(rng, placement, frac_h) -> float:
    half = frac_h / 2
    if placement == "top":
        lo, hi = 0.18, 0.35
    elif placement == "bottom":
        lo, hi = 0.65, 0.82
    elif placement == "middle":
        lo, hi = 0.45, 0.55
    else:
        lo, hi = 0.0, 1.0
    lo, hi = max(lo, half + 0.02), min(hi, 1 - half - 0.02)
    if lo > hi:
        return 0.5
    return rng.uniform(lo, hi)


def _plan_group(rng, n_texts, with_logo, config: GenConfig):
    """Vertical slot list for a group: (kind, height, pad_top, pad_bottom, has_substrate)."""
    slots = []
    if with_logo:
        slots.append(("logo", rng.uniform(0.05, 0.08), 0.0, 0.0, False))
    for _ in range(n_texts):
        has_sub = rng.random() < config.substrate_prob
        pt, pb = (rng.uniform(0.006, 0.016, size=2) if has_sub else (0.0, 0.0))
        slots.append(("text", rng.uniform(0.035, 0.07), pt, pb, has_sub))
    return slots


def _slot_height(slot) -> float:
    return slot[1] + slot[2] + slot[3]


def _place_group(rng, slots, top, bottom, config: GenConfig) -> list[LayoutElement]:
    gaps = rng.uniform(0.008, 0.025, size=max(len(slots) - 1, 0))
    need = sum(_slot_height(s) for s in slots) + gaps.sum()
    y = top + rng.uniform(0, max(bottom - top - need, 0.0)) * rng.uniform(0.3, 1.0)
    align = "left" if rng.random() < 0.5 else "center"
    anchor = rng.uniform(0.06, 0.3) if align == "left" else rng.uniform(0.42, 0.58)
    out = []
    for k, (kind, h, pt, pb, has_sub) in enumerate(slots):
        if kind == "logo":
            w = rng.uniform(0.12, 0.25)
        else:
            w = rng.uniform(0.3, 0.8)
        # keep the element (and its substrate padding) inside the canvas
        margin = 0.04
        if align == "left":
            w = min(w, 1 - margin - anchor)
            left = anchor
        else:
            w = min(w, 2 * (min(anchor, 1 - anchor) - margin))
            left = anchor - w / 2
        j = config.jitter
        left = left + float(np.clip(rng.normal(0, j), -2.5 * j, 2.5 * j)) if j > 0 else left
        t = y + pt
        cx, cy = left + w / 2, t + h / 2
        out.append(LayoutElement(kind, cx, cy, w, h))
        if has_sub:
            pl, pr = rng.uniform(0.008, 0.03, size=2)
            s_left, s_right = left - pl, left + w + pr
            s_top, s_bottom = t - pt, t + h + pb
            out.append(LayoutElement(
                "substrate", (s_left + s_right) / 2, (s_top + s_bottom) / 2,
                s_right - s_left, s_bottom - s_top,
            ))
        y += _slot_height((kind, h, pt, pb, has_sub))
        if k < len(gaps):
            y += gaps[k]
    return out


def _try_layout(rng, free, config: GenConfig):
    """Distribute texts/logo over free vertical intervals; None if they don't fit."""
    n_texts = int(rng.integers(config.min_texts, config.max_texts + 1))
    with_logo = rng.random() < config.logo_prob
    usable = [(a, b) for a, b in free if b - a > 0.06]
    if not usable:
        return None
    # random split of texts across intervals, weighted by free height
    heights = np.array([b - a for a, b in usable])
    counts = rng.multinomial(n_texts, heights / heights.sum())
    elements = []
    for gi, ((a, b), n) in enumerate(zip(usable, counts)):
        logo_here = with_logo and gi == 0
        if n == 0 and not logo_here:
            continue
        slots = _plan_group(rng, int(n), logo_here, config)
        gaps_max = 0.025 * max(len(slots) - 1, 0)
        if sum(_slot_height(s) for s in slots) + gaps_max > b - a:
            return None
        elements.extend(_place_group(rng, slots, a, b, config))
    return elements


def generate_sample(seed: int, config: GenConfig = GenConfig()) -> Sample:
    rng = _rng(config, seed)
    H, W = config.height, config.width
    placement = config.placements[int(rng.integers(len(config.placements)))]
    background = _background(rng, H, W)
    frac_h = rng.uniform(0.25, 0.5)
    frac_w = rng.uniform(0.3, 0.7)
    scale = 1.0
    for _ in range(100):
        fh, fw = frac_h * scale, frac_w * scale
        cy = _blob_center_y(rng, placement, fh)
        cx = rng.uniform(max(0.3, fw / 2 + 0.02), min(0.7, 1 - fw / 2 - 0.02)) if fw < 0.9 else 0.5
        mask = _blob_mask(rng, H, W, cy * H, cx * W, max(fh * H, 2.0), max(fw * W, 2.0))
        if mask.sum() == 0:
            scale *= 0.85
            continue
        rows = np.flatnonzero(mask.any(axis=1))
        # one clear pixel row between elements and the subject
        r0 = (rows[0] - 1) / H
        r1 = (rows[-1] + 2) / H
        free = [(0.02, r0), (r1, 0.98)]
        elements = _try_layout(rng, free, config)
        if elements is not None:
            break
        scale *= 0.85
    else:  # pragma: no cover - shrinking always ends in a feasible blob
        raise RuntimeError("could not place layout")
    texture = _subject_texture(rng, H, W)
    alpha = rng.uniform(0.5, 0.8)
    image = alpha * texture + (1 - alpha) * background
    image = image * mask[..., None]
    layout = canonicalize(Layout(tuple(elements), (W, H)))
    return Sample(image.astype(np.float32), mask, layout, f"s{config.seed}_{seed:06d}", placement)


def generate_samples(n: int, config: GenConfig = GenConfig(), start: int = 0) -> list[Sample]:
    return [generate_sample(start + i, config) for i in range(n)]


def split_of(sample_id: str, val_fraction: float = 0.1) -> str:
    """Stable train/val assignment from a hash of the id."""
    h = int(hashlib.md5(sample_id.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
    return "val" if h < val_fraction else "train"


# On-disk format -----------------------------------------------------------

def write_dataset(samples: Iterable[Sample], root: str | Path, config: GenConfig | None = None) -> dict:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        img = np.clip(np.rint(s.image * 255), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.saliency > 0).astype(np.uint8) * 255, mode="L").save(root / "masks" / f"{s.id}.png")
        records.append(layout_to_record(s.layout, s.id))
    write_jsonl(root / "layouts.jsonl", records)
    meta = {
        "config": config.to_dict() if config is not None else None,
        "counts": {
            "samples": len(records),
            "elements": sum(len(r["elements"]) for r in records),
        },
    }
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def _load_png(path: Path, sample_id: str, what: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"sample {sample_id}: missing {what} file {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB" if what == "image" else "L"))
    except OSError as exc:
        raise DatasetError(f"sample {sample_id}: unreadable {what} file {path}: {exc}") from exc


def read_dataset(root: str | Path) -> Iterator[Sample]:
    root = Path(root)
    layouts = root / "layouts.jsonl"
    if not layouts.exists():
        return
    for rec in read_jsonl(layouts):
        sid = rec["id"]
        img = _load_png(root / "images" / f"{sid}.png", sid, "image")
        mask = _load_png(root / "masks" / f"{sid}.png", sid, "mask")
        yield Sample(img.astype(np.float32) / 255.0, (mask > 127).astype(np.uint8), record_to_layout(rec), sid)
