"""Layout quality metrics: output rate, overlap, alignment, occlusion.

Overlap and occlusion are computed exactly from box geometry.  Occlusion
treats the saliency mask as piecewise constant on its pixel cells and
integrates the union of boxes against it, so its value is the limit of
rasterizing at ever finer resolution.  ``raster_*`` functions are the
brute-force oracles used to validate the analytic forms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .layout import CLASSES, Layout, LayoutElement

MIN_SIZE = 1e-3

REPORT_SCHEMA = {
    "type": "object",
    "required": ["output_rate", "overlap", "alignment", "occlusion", "n_samples", "n_scored"],
    "properties": {
        "output_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "overlap": {"type": "number", "minimum": 0, "maximum": 1},
        "alignment": {"type": "number", "minimum": 0},
        "occlusion": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 0},
        "n_scored": {"type": "integer", "minimum": 0},
        "fid": {"type": ["number", "null"]},
    },
}


@dataclass
class MetricReport:
    output_rate: float
    overlap: float
    alignment: float
    occlusion: float
    n_samples: int
    n_scored: int  # layouts with at least one valid box; the denominator of the other means
    fid: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def is_valid_box(e: LayoutElement) -> bool:
    if e.cls not in CLASSES or e.w < MIN_SIZE or e.h < MIN_SIZE:
        return False
    x0, y0, x1, y1 = e.ltrb
    return min(x1, 1.0) > max(x0, 0.0) and min(y1, 1.0) > max(y0, 0.0)


def valid_elements(layout: Layout) -> list[LayoutElement]:
    return [e for e in layout.elements if is_valid_box(e)]


def _clipped(elements: Sequence[LayoutElement]) -> np.ndarray:
    """(N, 4) boxes as clipped (x0, y0, x1, y1)."""
    if not elements:
        return np.zeros((0, 4))
    return np.clip(np.array([e.ltrb for e in elements], dtype=np.float64), 0.0, 1.0)


def output_rate(layouts: Sequence[Layout]) -> float:
    if len(layouts) == 0:
        raise ValueError("output rate of an empty collection is undefined")
    return sum(1 for lay in layouts if valid_elements(lay)) / len(layouts)


def overlap(layout: Layout) -> float:
    """Sum of pairwise intersection areas over the sum of box areas, capped at 1."""
    b = _clipped(valid_elements(layout))
    if len(b) < 2:
        return 0.0
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(b[:, None, 2], b[None, :, 2]) - np.maximum(b[:, None, 0], b[None, :, 0])
    ih = np.minimum(b[:, None, 3], b[None, :, 3]) - np.maximum(b[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    pair = np.triu(inter, k=1).sum()
    total = areas.sum()
    return float(min(pair / total, 1.0)) if total > 0 else 0.0


def _axes(elements: Sequence[LayoutElement]) -> np.ndarray:
    """(N, 6): left, x-center, right, top, y-center, bottom."""
    return np.array(
        [[e.cx - e.w / 2, e.cx, e.cx + e.w / 2, e.cy - e.h / 2, e.cy, e.cy + e.h / 2] for e in elements],
        dtype=np.float64,
    )


def alignment(layout: Layout) -> float:
    """Mean over elements of the smallest same-axis gap to any other element."""
    elems = valid_elements(layout)
    if len(elems) < 2:
        return 0.0
    a = _axes(elems)
    gaps = np.abs(a[:, None, :] - a[None, :, :])
    gaps[np.arange(len(a)), np.arange(len(a))] = np.inf
    return float(gaps.min(axis=(1, 2)).mean())


def _coverage_1d(lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    """Length of [lo, hi] inside each of ``n`` unit cells of [0, 1]; (N, n)."""
    edges = np.arange(n + 1) / n
    a = np.maximum(lo[:, None], edges[None, :-1])
    b = np.minimum(hi[:, None], edges[None, 1:])
    return np.clip(b - a, 0, None)


def _union_cell_coverage(boxes: np.ndarray, H: int, W: int) -> np.ndarray:
    """Area of the union of ``boxes`` inside each pixel cell; (H, W), in pixel units.

    Working in pixel units keeps boxes that sit on pixel edges exact.
    """
    px = boxes * np.array([W, H, W, H], dtype=np.float64)
    xs = np.unique(np.concatenate([px[:, [0, 2]].ravel(), np.arange(W + 1)]))
    ys = np.unique(np.concatenate([px[:, [1, 3]].ravel(), np.arange(H + 1)]))
    xm, ym = (xs[:-1] + xs[1:]) / 2, (ys[:-1] + ys[1:]) / 2
    inside_x = (xm[None, :] > px[:, None, 0]) & (xm[None, :] < px[:, None, 2])  # (N, nx)
    inside_y = (ym[None, :] > px[:, None, 1]) & (ym[None, :] < px[:, None, 3])  # (N, ny)
    inside = (inside_y[:, :, None] & inside_x[:, None, :]).any(axis=0)  # (ny, nx)
    area = np.outer(np.diff(ys), np.diff(xs)) * inside
    col = np.minimum(xm.astype(int), W - 1)
    row = np.minimum(ym.astype(int), H - 1)
    cov = np.zeros((H, W))
    np.add.at(cov, (row[:, None], col[None, :]), area)
    return cov


def occlusion(layout: Layout, saliency: np.ndarray, denominator: str = "union") -> float | None:
    """Salient fraction of the area covered by the layout's boxes.

    ``denominator="union"`` integrates over the union of boxes (default);
    ``"sum"`` weights every box separately.  ``None`` when no box is valid.
    """
    sal = np.asarray(saliency) > 0
    H, W = sal.shape
    b = _clipped(valid_elements(layout))
    if len(b) == 0:
        return None
    if denominator == "sum":
        cx = _coverage_1d(b[:, 0], b[:, 2], W)
        cy = _coverage_1d(b[:, 1], b[:, 3], H)
        covered = np.einsum("ny,nx,yx->", cy, cx, sal.astype(np.float64))
        total = float(((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])).sum())
    elif denominator == "union":
        cov = _union_cell_coverage(b, H, W)
        covered = float(cov[sal].sum())
        total = float(cov.sum())
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    if total <= 0:
        return None
    return float(np.clip(covered / total, 0.0, 1.0))


# Raster oracles --------------------------------------------------------------

def _raster(boxes: np.ndarray, res: int) -> np.ndarray:
    """Pixel-centre rasterization of clipped boxes: (N, res, res) booleans."""
    c = (np.arange(res) + 0.5) / res
    inx = (c[None, :] >= boxes[:, None, 0]) & (c[None, :] < boxes[:, None, 2])
    iny = (c[None, :] >= boxes[:, None, 1]) & (c[None, :] < boxes[:, None, 3])
    return iny[:, :, None] & inx[:, None, :]


def raster_overlap(layout: Layout, res: int = 1024) -> float:
    b = _clipped(valid_elements(layout))
    if len(b) < 2:
        return 0.0
    masks = _raster(b, res)
    counts = masks.reshape(len(b), -1).sum(1)
    pair = 0
    for i in range(len(b)):
        for j in range(i + 1, len(b)):
            pair += np.count_nonzero(masks[i] & masks[j])
    return min(pair / counts.sum(), 1.0) if counts.sum() else 0.0


def brute_alignment(layout: Layout) -> float:
    elems = valid_elements(layout)
    if len(elems) < 2:
        return 0.0
    axes = [_axes([e])[0] for e in elems]
    per = []
    for i, ai in enumerate(axes):
        best = float("inf")
        for j, aj in enumerate(axes):
            if i == j:
                continue
            for k in range(6):
                best = min(best, abs(ai[k] - aj[k]))
        per.append(best)
    return sum(per) / len(per)


def raster_occlusion(layout: Layout, saliency: np.ndarray, res: int = 1024) -> float | None:
    sal = np.asarray(saliency) > 0
    H, W = sal.shape
    b = _clipped(valid_elements(layout))
    if len(b) == 0:
        return None
    union = _raster(b, res).any(axis=0)
    c = (np.arange(res) + 0.5) / res
    up = sal[np.minimum((c * H).astype(int), H - 1)][:, np.minimum((c * W).astype(int), W - 1)]
    n = np.count_nonzero(union)
    return np.count_nonzero(union & up) / n if n else None


# Aggregation -------------------------------------------------------------------

def summarize(layouts: Sequence[Layout], saliencies: Sequence[np.ndarray]) -> tuple[MetricReport, list[dict]]:
    """Aggregate metrics over (layout, saliency) pairs; also returns per-sample rows."""
    rows = []
    ov, al, oc = [], [], []
    for lay, sal in zip(layouts, saliencies):
        n_valid = len(valid_elements(lay))
        row = {"n_boxes": n_valid, "overlap": None, "alignment": None, "occlusion": None}
        if n_valid:
            row["overlap"] = overlap(lay)
            row["alignment"] = alignment(lay)
            row["occlusion"] = occlusion(lay, sal)
            ov.append(row["overlap"])
            al.append(row["alignment"])
            if row["occlusion"] is not None:
                oc.append(row["occlusion"])
        rows.append(row)
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    report = MetricReport(
        output_rate=output_rate(layouts) if layouts else 0.0,
        overlap=mean(ov), alignment=mean(al), occlusion=mean(oc),
        n_samples=len(layouts), n_scored=len(ov),
    )
    return report, rows


def evaluate(model, samples, n_z: int = 1, seed: int = 0, temperature: float = 1.0,
             csv_path: str | Path | None = None) -> MetricReport:
    """Generate ``n_z`` layouts per test image and score them.

    ``model`` needs ``sample_layouts(images, n_z, seed, temperature)`` returning
    one list of ``n_z`` layouts per image.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty test set")
    images = np.stack([s.image for s in samples])
    generated = model.sample_layouts(images, n_z=n_z, seed=seed, temperature=temperature)
    layouts, sals, keys = [], [], []
    for s, lays in zip(samples, generated):
        for k, lay in enumerate(lays):
            layouts.append(lay)
            sals.append(s.saliency)
            keys.append((s.id, k))
    report, rows = summarize(layouts, sals)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "z_index", "n_boxes", "overlap", "alignment", "occlusion"])
            for (sid, k), r in zip(keys, rows):
                w.writerow([sid, k, r["n_boxes"], r["overlap"], r["alignment"], r["occlusion"]])
    return report


def random_placement(layout: Layout, rng: np.random.Generator) -> Layout:
    """Same classes and box sizes, centres drawn uniformly with the box inside the canvas."""
    out = []
    for e in layout.elements:
        cx = rng.uniform(e.w / 2, 1 - e.w / 2) if e.w < 1 else 0.5
        cy = rng.uniform(e.h / 2, 1 - e.h / 2) if e.h < 1 else 0.5
        out.append(LayoutElement(e.cls, cx, cy, e.w, e.h))
    return Layout(tuple(out), layout.canvas)
