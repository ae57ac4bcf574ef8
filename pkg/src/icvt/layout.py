"""Layout data types, coordinate quantization, ordering and token framing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CLASSES = ("text", "substrate", "logo")
BOS, EOS, PAD = 3, 4, 5
CLASS_VOCAB = CLASSES + ("<bos>", "<eos>", "<pad>")
CLASS_TO_INDEX = {name: i for i, name in enumerate(CLASS_VOCAB)}

DEFAULT_BINS = 128
DEFAULT_MAX_ELEMENTS = 20


@dataclass(frozen=True)
class LayoutElement:
    cls: str
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown element class {self.cls!r}")
        for name in ("cx", "cy", "w", "h"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def ltrb(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Layout:
    elements: tuple[LayoutElement, ...] = ()
    canvas: tuple[int, int] = (96, 128)  # (width_px, height_px)

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "canvas", tuple(int(v) for v in self.canvas))

    def __len__(self):
        return len(self.elements)

    def boxes(self) -> np.ndarray:
        return np.array([e.box for e in self.elements], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class Vocabulary:
    n_bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least two coordinate bins")

    @property
    def n_classes(self) -> int:
        return len(CLASS_VOCAB)

    @property
    def sentinel(self) -> int:
        """Coordinate index used at BOS/EOS/PAD steps (one past the last bin)."""
        return self.n_bins


@dataclass(frozen=True)
class TokenizedLayout:
    """Framed index sequence: BOS, one step per element, EOS, then PAD.

    ``cls`` has shape (S,), ``coords`` (S, 4) with columns x, y, w, h, and
    ``mask`` marks the non-PAD steps.  ``values`` keeps the unquantized
    coordinates of element steps (zeros elsewhere) for continuous heads.
    """

    cls: np.ndarray
    coords: np.ndarray
    mask: np.ndarray = field(default=None)
    values: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mask is None:
            object.__setattr__(self, "mask", self.cls != PAD)

    @property
    def n_elements(self) -> int:
        return int(np.sum(self.cls < len(CLASSES)))

    def __len__(self):
        return len(self.cls)


def quantize(v: float, n_bins: int = DEFAULT_BINS) -> int:
    if n_bins < 2:
        raise ValueError("need at least two coordinate bins")
    v = min(max(float(v), 0.0), 1.0)
    return min(int(math.floor(v * n_bins)), n_bins - 1)


def dequantize(idx: int, n_bins: int = DEFAULT_BINS) -> float:
    if not 0 <= idx < n_bins:
        raise ValueError(f"bin index {idx} out of range [0, {n_bins})")
    return (idx + 0.5) / n_bins


def quantize_array(v: np.ndarray, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(v * n_bins), n_bins - 1).astype(np.int64)


def dequantize_array(idx: np.ndarray, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= n_bins):
        raise ValueError("bin index out of range")
    return (idx + 0.5) / n_bins


def order_elements(elements: Sequence[LayoutElement], n_bins: int = DEFAULT_BINS) -> list[LayoutElement]:
    """Sort top to bottom, then left to right, on quantized edges; stable."""
    keyed = [
        (quantize(e.cy - e.h / 2, n_bins), quantize(e.cx - e.w / 2, n_bins), i, e)
        for i, e in enumerate(elements)
    ]
    keyed.sort(key=lambda k: k[:3])
    return [k[3] for k in keyed]


def canonicalize(layout: Layout, n_bins: int = DEFAULT_BINS) -> Layout:
    return Layout(tuple(order_elements(layout.elements, n_bins)), layout.canvas)


def tokenize(layout: Layout, vocab: Vocabulary = Vocabulary(), max_elements: int = DEFAULT_MAX_ELEMENTS) -> TokenizedLayout:
    n = len(layout.elements)
    if n > max_elements:
        raise ValueError(f"layout has {n} elements, more than max_elements={max_elements}")
    length = max_elements + 2
    cls = np.full(length, PAD, dtype=np.int64)
    coords = np.full((length, 4), vocab.sentinel, dtype=np.int64)
    values = np.zeros((length, 4), dtype=np.float64)
    cls[0] = BOS
    for i, e in enumerate(layout.elements, start=1):
        cls[i] = CLASS_TO_INDEX[e.cls]
        coords[i] = [quantize(v, vocab.n_bins) for v in e.box]
        values[i] = e.box
    cls[n + 1] = EOS
    return TokenizedLayout(cls, coords, values=values)


def _check_framing(tokens: TokenizedLayout) -> int:
    cls = np.asarray(tokens.cls)
    if cls.ndim != 1 or len(cls) < 2 or cls[0] != BOS:
        raise ValueError("token sequence must start with BOS")
    eos = np.flatnonzero(cls == EOS)
    if len(eos) != 1:
        raise ValueError(f"expected exactly one EOS, found {len(eos)}")
    end = int(eos[0])
    body = cls[1:end]
    if np.any(body >= len(CLASSES)):
        raise ValueError("special token inside the element span")
    if np.any(cls[end + 1:] != PAD):
        raise ValueError("non-PAD token after EOS")
    return end


def detokenize(tokens: TokenizedLayout, vocab: Vocabulary = Vocabulary(), canvas: tuple[int, int] = (96, 128)) -> Layout:
    end = _check_framing(tokens)
    coords = np.asarray(tokens.coords)
    elements = []
    for i in range(1, end):
        x, y, w, h = (dequantize(int(c), vocab.n_bins) for c in coords[i])
        elements.append(LayoutElement(CLASSES[int(tokens.cls[i])], x, y, w, h))
    return Layout(tuple(elements), canvas)


# JSON Lines interchange ---------------------------------------------------

def layout_to_record(layout: Layout, sample_id: str, **extra) -> dict:
    rec = {
        "id": sample_id,
        "canvas": {"w": layout.canvas[0], "h": layout.canvas[1]},
        "elements": [
            {"cls": e.cls, "cx": e.cx, "cy": e.cy, "w": e.w, "h": e.h} for e in layout.elements
        ],
    }
    rec.update(extra)
    return rec


def record_to_layout(rec: dict) -> Layout:
    canvas = (int(rec["canvas"]["w"]), int(rec["canvas"]["h"]))
    elements = tuple(
        LayoutElement(e["cls"], float(e["cx"]), float(e["cy"]), float(e["w"]), float(e["h"]))
        for e in rec["elements"]
    )
    return Layout(elements, canvas)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
