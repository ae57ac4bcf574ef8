"""Command-line entry point: make-dataset, train, sample, complete, evaluate.

Every command writes its outputs and a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import TrainConfig, apply_overrides, config_digest, load_config
from .layout import Layout, layout_to_record, read_jsonl, record_to_layout, write_jsonl
from .synthetic import DatasetError, GenConfig, Sample, generate_samples, read_dataset, split_of, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CLASS_COLORS = {"text": (255, 0, 0), "substrate": (0, 255, 0), "logo": (0, 0, 255)}

logger = logging.getLogger("icvt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cache_dir() -> Path:
    return Path(os.environ.get("ICVT_CACHE", Path.home() / ".cache" / "icvt"))


def _resolve_dataset(path: str) -> Path:
    """A dataset path as given, or relative to the cache dir."""
    p = Path(path)
    if p.exists():
        return p
    cached = cache_dir() / path
    if cached.exists():
        return cached
    raise DatasetError(f"dataset not found: {p} (also looked in {cached})")


def _split_config_args(items: list[str]) -> tuple[str | None, list[str]]:
    """``--config`` values: at most one JSON file path, any number of key=value overrides."""
    path, overrides = None, []
    for item in items:
        if "=" in item and not Path(item).exists():
            overrides.append(item)
        elif path is None:
            path = item
        else:
            raise UsageError("only one config file may be given")
    return path, overrides


def _train_config(args) -> TrainConfig:
    path, overrides = _split_config_args(args.config)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(path, overrides)


def _gen_config(args) -> GenConfig:
    path, overrides = _split_config_args(args.config)
    base = dataclasses.asdict(GenConfig())
    base["placements"] = list(base["placements"])
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(base)
        if unknown:
            raise KeyError(f"unknown config keys {sorted(unknown)}")
        base.update(user)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    d = apply_overrides(base, overrides)
    d["placements"] = tuple(d["placements"])
    return GenConfig(**d)


class RunManifest:
    def __init__(self, command: str, config: dict, seed: int | None):
        self.command = command
        self.config = config
        self.seed = seed
        self.started = datetime.now(timezone.utc).isoformat()
        self.artifacts: dict[str, str] = {}
        self.extra: dict = {}

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        blob = {
            "command": self.command,
            "argv": sys.argv[1:],
            "config": self.config,
            "config_digest": config_digest(self.config),
            "seed": self.seed,
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
            "artifacts": self.artifacts,
            **self.extra,
        }
        path = out_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=2)
        return path


def dataset_digest(root: Path) -> str:
    """Hash of every file under a dataset directory except the manifest."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


# Images -------------------------------------------------------------------------

def _load_image(path: Path, height: int, width: int) -> np.ndarray:
    from PIL import Image

    if not path.exists():
        raise DatasetError(f"image not found: {path}")
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (width, height):
            im = im.resize((width, height), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _load_images(path: Path, height: int, width: int) -> list[tuple[str, np.ndarray]]:
    """(id, image) pairs from a dataset dir, a directory of PNGs, or a single PNG."""
    if path.is_file():
        return [(path.stem, _load_image(path, height, width))]
    if (path / "layouts.jsonl").exists():
        return [(s.id, _fit(s.image, height, width)) for s in read_dataset(path)]
    if not path.is_dir():
        raise DatasetError(f"images not found: {path}")
    folder = path / "images" if (path / "images").is_dir() else path
    files = sorted(folder.glob("*.png"))
    return [(f.stem, _load_image(f, height, width)) for f in files]


def _fit(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    from PIL import Image

    im = Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)).resize((width, height), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def render_layout(image: np.ndarray, layout: Layout, line_width: int = 1):
    """Class-coloured box outlines over an (H, W, 3) image in [0, 1]; returns a PIL image."""
    from PIL import Image, ImageDraw

    im = Image.fromarray(np.clip(np.rint(image * 255), 0, 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    W, H = im.size
    for e in layout.elements:
        x0, y0, x1, y1 = e.ltrb
        box = [round(max(x0, 0) * W), round(max(y0, 0) * H), round(min(x1, 1) * W) - 1, round(min(y1, 1) * H) - 1]
        if box[2] >= box[0] and box[3] >= box[1]:
            draw.rectangle(box, outline=CLASS_COLORS[e.cls], width=line_width)
    return im


# Commands -----------------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    cfg = _gen_config(args)
    if args.n < 0:
        raise UsageError("-n must be non-negative")
    out = Path(args.out) if args.out else cache_dir() / f"synthetic-{config_digest(cfg.to_dict())}-{args.n}"
    manifest = RunManifest("make-dataset", cfg.to_dict(), cfg.seed)
    samples = generate_samples(args.n, cfg)
    meta = write_dataset(samples, out, cfg)
    split = {"train": [], "val": []}
    for s in samples:
        split[split_of(s.id, args.val_fraction)].append(s.id)
    with open(out / "split.json", "w") as fh:
        json.dump({"val_fraction": args.val_fraction, **split}, fh, indent=2)
    manifest.artifacts = {k: str(out / k) for k in ("images", "masks", "layouts.jsonl", "meta.json", "split.json")}
    manifest.extra = {"counts": meta["counts"], "dataset_digest": dataset_digest(out)}
    manifest.write(out)
    print(out)
    return EXIT_OK


def _dataset_splits(root: Path, val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    samples = list(read_dataset(root))
    split_file = root / "split.json"
    if split_file.exists():
        with open(split_file) as fh:
            val_ids = set(json.load(fh)["val"])
    else:
        val_ids = {s.id for s in samples if split_of(s.id, val_fraction) == "val"}
    return [s for s in samples if s.id not in val_ids], [s for s in samples if s.id in val_ids]


def cmd_train(args) -> int:
    from .training import train

    cfg = _train_config(args)
    dataset = args.dataset or cfg.dataset
    if not dataset:
        raise UsageError("no dataset given (--dataset or dataset=... in --config)")
    root = _resolve_dataset(dataset)
    cfg = dataclasses.replace(cfg, dataset=str(root), out_dir=args.out or cfg.out_dir)
    train_set, _ = _dataset_splits(root, cfg.val_fraction)
    if not train_set:
        raise DatasetError(f"dataset {root} has no training samples")
    out = Path(cfg.out_dir)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed)
    ckpts = []
    for ck in train(cfg, train_set, out, resume=args.resume, max_iters=args.max_iters):
        ckpts.append(str(ck))
        logger.info("checkpoint %s", ck)
    manifest.artifacts = {"checkpoints": ckpts, "log": str(out / "train_log.jsonl")}
    manifest.extra = {"last_checkpoint": ckpts[-1] if ckpts else None}
    manifest.write(out)
    if ckpts:
        print(ckpts[-1])
    return EXIT_OK


def _load_model(path: str):
    from .training import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DatasetError(str(exc)) from exc


def cmd_sample(args) -> int:
    model, cfg, _ = _load_model(args.checkpoint)
    mc = cfg.model
    items = _load_images(Path(args.images), mc.image_height, mc.image_width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = np.stack([img for _, img in items]) if items else np.zeros((0, mc.image_height, mc.image_width, 3))
    layouts = model.sample_layouts(images, n_z=args.n_z, seed=args.seed, temperature=args.temperature)
    records = []
    render_dir = out / "renders"
    for (sid, img), lays in zip(items, layouts):
        for k, lay in enumerate(lays):
            records.append(layout_to_record(lay, sid, z_index=k))
            if args.render:
                render_dir.mkdir(exist_ok=True)
                render_layout(img, lay).save(render_dir / f"{sid}_z{k}.png")
    write_jsonl(out / "layouts.jsonl", records)
    manifest = RunManifest("sample", cfg.to_dict(), args.seed)
    manifest.artifacts = {"layouts": str(out / "layouts.jsonl")}
    if args.render:
        manifest.artifacts["renders"] = str(render_dir)
    manifest.extra = {"checkpoint": args.checkpoint, "n_z": args.n_z, "temperature": args.temperature}
    manifest.write(out)
    print(out / "layouts.jsonl")
    return EXIT_OK


def cmd_complete(args) -> int:
    import torch

    model, cfg, _ = _load_model(args.checkpoint)
    mc = cfg.model
    image = _load_image(Path(args.image), mc.image_height, mc.image_width)
    partial_path = Path(args.partial)
    if not partial_path.exists():
        raise DatasetError(f"partial layouts not found: {partial_path}")
    records = list(read_jsonl(partial_path))
    try:
        partials = [record_to_layout(r) for r in records]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{partial_path}: malformed layout record: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator().manual_seed(args.seed)
    results = []
    if partials:
        cond = model.encode_image(torch.as_tensor(image)[None]).repeat(len(partials) * args.n_z)
        reps = [p for p in partials for _ in range(args.n_z)]
        z = model.sample_z(cond, gen)
        done = model.complete(cond, reps, z, temperature=args.temperature, generator=gen)
        for i, lay in enumerate(done):
            src = records[i // args.n_z]
            results.append(layout_to_record(lay, src.get("id", str(i // args.n_z)), z_index=i % args.n_z))
    write_jsonl(out / "completions.jsonl", results)
    manifest = RunManifest("complete", cfg.to_dict(), args.seed)
    manifest.artifacts = {"completions": str(out / "completions.jsonl")}
    manifest.extra = {"checkpoint": args.checkpoint, "partial": str(partial_path), "n_z": args.n_z}
    manifest.write(out)
    print(out / "completions.jsonl")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, summarize

    model, cfg, _ = _load_model(args.checkpoint)
    root = _resolve_dataset(args.test)
    if args.split == "all":
        samples = list(read_dataset(root))
    else:
        train_set, val_set = _dataset_splits(root, cfg.val_fraction)
        samples = val_set if args.split == "val" else train_set
    if not samples:
        raise DatasetError(f"no test samples in {root} (split {args.split})")
    mc = cfg.model
    samples = [Sample(_fit(s.image, mc.image_height, mc.image_width), s.saliency, s.layout, s.id) for s in samples]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, samples, n_z=args.n_z, seed=args.seed, temperature=args.temperature,
                      csv_path=out / "per_sample.csv")
    (out / "report.json").write_text(report.to_json())
    gt, _ = summarize([s.layout for s in samples], [s.saliency for s in samples])
    (out / "ground_truth.json").write_text(gt.to_json())
    manifest = RunManifest("evaluate", cfg.to_dict(), args.seed)
    manifest.artifacts = {k: str(out / k) for k in ("report.json", "per_sample.csv", "ground_truth.json")}
    manifest.extra = {"checkpoint": args.checkpoint, "test": str(root), "n_z": args.n_z}
    manifest.write(out)
    print(report.to_json())
    return EXIT_OK


# Parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icvt", description="Image-conditioned layout generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", action="append", default=[], metavar="PATH|KEY=VALUE",
                        help="JSON config file or dotted key=value override; repeatable")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("make-dataset", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", help="output directory (default: under $ICVT_CACHE)")
    sp.add_argument("-n", type=int, default=1000, help="number of samples")
    sp.add_argument("--val-fraction", type=float, default=0.1)
    sp.set_defaults(func=cmd_make_dataset)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--dataset", help="dataset directory (or a name under $ICVT_CACHE)")
    sp.add_argument("--out", help="run directory for checkpoints and logs")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--max-iters", type=int, default=None)
    sp.set_defaults(func=cmd_train)

    def generation(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--n-z", type=int, default=1)
        sp.add_argument("--temperature", type=float, default=1.0)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("sample", help="generate layouts for images")
    generation(sp)
    sp.add_argument("--images", required=True, help="dataset dir, folder of PNGs, or one PNG")
    sp.add_argument("--render", action="store_true", help="also write class-coloured overlays")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("complete", help="complete partial layouts for one image")
    generation(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--partial", required=True, help="JSONL of partial layouts")
    sp.set_defaults(func=cmd_complete)

    sp = sub.add_parser("evaluate", help="score generated layouts on a test set")
    generation(sp)
    sp.add_argument("--test", required=True, help="dataset directory")
    sp.add_argument("--split", choices=("all", "train", "val"), default="all")
    sp.set_defaults(func=cmd_evaluate, n_z=5)
    return p


def main(argv: list[str] | None = None) -> int:
    from .training import NonFiniteLossError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if getattr(args, "n_z", 1) < 1:
        parser.error("--n-z must be at least 1")
    t0 = time.time()
    try:
        code = args.func(args)
    except (DatasetError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"icvt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, KeyError, ValueError) as exc:
        print(f"icvt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"icvt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    logger.info("%s finished in %.1fs", args.command, time.time() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
