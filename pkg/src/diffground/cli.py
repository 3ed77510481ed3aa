"""Command-line entry points: ground one image, evaluate a manifest, convert data.

Option precedence is CLI flags > config file (--config, JSON) > built-in
defaults; the merged snapshot is written alongside evaluation outputs so
every run is reconstructible. Validation failures exit with code 2 before
any backend is constructed; backend unavailability exits with code 3.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import (
    CACHE_DIR_ENV,
    DEFAULT_CHECKPOINT,
    Backend,
    BackendUnavailable,
    PretrainedBackend,
    PretrainedConfig,
    SyntheticBackend,
)
from .dataset import convert_refcoco, load_manifest, subset, write_manifest
from .errors import GroundingError
from .evaluation import PipelineConfig, evaluate, random_baseline, write_report
from .expression import ExpressionMode, process
from .geometry import BoundingBox, ImageSize, clip_to_image
from .isolation import crop_isolate, mask_isolate
from .scorer import Aggregation, ProposalViews, ScoringConfig, score_proposals, select
from .version import __version__

AGGREGATIONS = {
    "sum": Aggregation.SUM,
    "min": Aggregation.MIN,
    "mask": Aggregation.MASK_ONLY,
    "crop": Aggregation.CROP_ONLY,
}

DEFAULTS = {
    "backend": "pretrained",
    "checkpoint": DEFAULT_CHECKPOINT,
    "timesteps": "100:900:10",
    "samples": 1,
    "aggregation": "sum",
    "expr_mode": "full",
    "canvas": 512,
    "fill": "0.5,0.5,0.5",
    "seed": 0,
    "iou_thresh": 0.5,
    "resize": "stretch",
    "workers": 1,
    "offline": False,
    "subset": None,
    "subset_seed": 0,
}


def parse_timesteps(spec: str) -> tuple[int, ...]:
    """Parse 'start:end:count' (evenly spaced) or a comma list of timesteps."""
    spec = spec.strip()
    try:
        if ":" in spec:
            start_s, end_s, count_s = spec.split(":")
            start, end, count = int(start_s), int(end_s), int(count_s)
            if count < 1 or start < 1 or end < start:
                raise ValueError
            if count == 1:
                return ((start + end) // 2,)
            step = (end - start) / (count - 1)
            return tuple(sorted({int(round(start + i * step)) for i in range(count)}))
        return tuple(sorted({int(v) for v in spec.split(",")}))
    except ValueError:
        raise ValueError(f"bad timestep spec {spec!r}; use 'start:end:count' or 't1,t2,...'") from None


def parse_fill(spec: str) -> tuple[float, float, float]:
    try:
        parts = [float(v) for v in spec.split(",")]
        if len(parts) != 3 or any(not 0.0 <= v <= 1.0 for v in parts):
            raise ValueError
        return (parts[0], parts[1], parts[2])
    except ValueError:
        raise ValueError(f"bad fill {spec!r}; use three comma-separated values in [0,1]") from None


def _merge_options(args: argparse.Namespace) -> dict:
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ValueError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config file keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in DEFAULTS:
        if hasattr(args, key):
            merged[key] = getattr(args, key)
    return merged


def _resolved_config(opts: dict) -> tuple[PipelineConfig, dict]:
    """Validate merged options and build the pipeline config plus its snapshot."""
    if opts["backend"] not in ("pretrained", "synthetic"):
        raise ValueError(f"unknown backend {opts['backend']!r}")
    if opts["aggregation"] not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {opts['aggregation']!r}; choose from {sorted(AGGREGATIONS)}")
    if opts["expr_mode"] not in ("full", "core"):
        raise ValueError(f"unknown expression mode {opts['expr_mode']!r}")
    if opts["resize"] not in ("stretch", "letterbox"):
        raise ValueError(f"unknown resize mode {opts['resize']!r}")
    canvas = int(opts["canvas"])
    if canvas < 8 or canvas % 8 != 0:
        raise ValueError(f"canvas must be a multiple of 8 and at least 8, got {canvas}")
    if int(opts["workers"]) < 1:
        raise ValueError(f"workers must be >= 1, got {opts['workers']}")
    if not 0.0 < float(opts["iou_thresh"]) <= 1.0:
        raise ValueError(f"iou threshold must be in (0, 1], got {opts['iou_thresh']}")
    timesteps = opts["timesteps"]
    if isinstance(timesteps, str):
        timesteps = parse_timesteps(timesteps)
    fill = opts["fill"]
    if isinstance(fill, str):
        fill = parse_fill(fill)
    else:
        fill = tuple(float(v) for v in fill)
    scoring = ScoringConfig(
        timesteps=tuple(timesteps),
        samples_per_timestep=int(opts["samples"]),
        aggregation=AGGREGATIONS[opts["aggregation"]],
        seed=int(opts["seed"]),
        canvas=canvas,
    )
    cfg = PipelineConfig(
        scoring=scoring,
        expression_mode=ExpressionMode(opts["expr_mode"]),
        fill=fill,
        resize_mode=opts["resize"],
        iou_threshold=float(opts["iou_thresh"]),
        workers=int(opts["workers"]),
    )
    snapshot = dict(opts)
    snapshot["timesteps"] = list(scoring.timesteps)
    snapshot["fill"] = list(fill)
    return cfg, snapshot


def build_backend(opts: dict) -> Backend:
    if opts["backend"] == "synthetic":
        return SyntheticBackend(canvas=int(opts["canvas"]), seed=int(opts["seed"]))
    return PretrainedBackend(
        PretrainedConfig(
            checkpoint=str(opts["checkpoint"]),
            canvas=int(opts["canvas"]),
            offline=bool(opts["offline"]),
        )
    )


def _load_proposals_arg(args: argparse.Namespace, size: ImageSize) -> list[BoundingBox]:
    boxes: list[BoundingBox] = []
    if getattr(args, "proposals", None):
        path = Path(args.proposals)
        if not path.exists():
            raise ValueError(f"proposals file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"proposals file {path} is not valid JSON: {exc}") from exc
        for j, entry in enumerate(data):
            if isinstance(entry, dict):
                vals = [float(v) for v in entry["box"]]
                if entry.get("format", "xyxy") == "xywh":
                    box = BoundingBox.from_xywh(*vals)
                else:
                    box = BoundingBox(*vals)
            else:
                box = BoundingBox(*[float(v) for v in entry])
            boxes.append(box)
    for spec in getattr(args, "box", None) or []:
        vals = [float(v) for v in spec.split(",")]
        if len(vals) != 4:
            raise ValueError(f"--box needs 4 comma-separated values, got {spec!r}")
        boxes.append(BoundingBox(*vals))
    if not boxes:
        raise ValueError("no proposals given; use --proposals FILE or --box x0,y0,x1,y1")
    return [clip_to_image(b, size) for b in boxes]


def _annotate(image_path: str, boxes: list[BoundingBox], winner: int, out_path: str) -> None:
    from PIL import Image, ImageDraw

    with Image.open(image_path) as img:
        img = img.convert("RGB")
        draw = ImageDraw.Draw(img)
        for i, box in enumerate(boxes):
            if i == winner:
                continue
            draw.rectangle(box.as_tuple(), outline=(220, 60, 60), width=2)
        draw.rectangle(boxes[winner].as_tuple(), outline=(60, 220, 60), width=4)
        img.save(out_path)


def cmd_ground(args: argparse.Namespace) -> int:
    opts = _merge_options(args)
    cfg, _ = _resolved_config(opts)
    image_path = Path(args.image)
    if not image_path.exists():
        raise ValueError(f"image file not found: {image_path}")

    from .dataset import load_image

    image = load_image(image_path)
    boxes = _load_proposals_arg(args, image.size)

    backend = build_backend(opts)
    schedule = backend.schedule
    expr = process(args.expression, cfg.expression_mode)
    cond = backend.encode_text(expr.processed)
    mode = cfg.scoring.aggregation
    views = []
    for i, box in enumerate(boxes):
        mask = (
            mask_isolate(image, box, cfg.fill, cfg.scoring.canvas, cfg.resize_mode, proposal_index=i)
            if mode.needs_mask
            else None
        )
        crop = (
            crop_isolate(image, box, cfg.scoring.canvas, cfg.resize_mode, cfg.fill, proposal_index=i)
            if mode.needs_crop
            else None
        )
        views.append(ProposalViews(mask=mask, crop=crop))
    records = score_proposals(views, cond, cfg.scoring, backend, schedule)
    winner = select(records, mode)

    def fmt(v: float | None) -> str:
        return f"{v:.6f}" if v is not None else "-"

    print(f"expression: {expr.processed!r}" + (" (fallback to full)" if expr.fallback else ""))
    print(f"{'rank':>4} {'idx':>4} {'box':>34} {'e_mask':>10} {'e_crop':>10} {'e_total':>10}")
    for rank, rec in enumerate(sorted(records, key=lambda r: (r.e_total, r.proposal_index)), start=1):
        b = boxes[rec.proposal_index]
        box_s = f"({b.x_min:7.1f},{b.y_min:7.1f},{b.x_max:7.1f},{b.y_max:7.1f})"
        marker = "  <- selected" if rec.proposal_index == winner else ""
        print(
            f"{rank:>4} {rec.proposal_index:>4} {box_s:>34} "
            f"{fmt(rec.e_mask):>10} {fmt(rec.e_crop):>10} {fmt(rec.e_total):>10}{marker}"
        )
    if getattr(args, "annotate", None):
        _annotate(str(image_path), boxes, winner, args.annotate)
        print(f"annotated image written to {args.annotate}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    opts = _merge_options(args)
    cfg, snapshot = _resolved_config(opts)
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        raise ValueError(f"manifest file not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    if opts["subset"]:
        manifest = subset(manifest, int(opts["subset"]), int(opts["subset_seed"]))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True), encoding="utf-8")

    backend = build_backend(opts)
    result = evaluate(
        manifest,
        backend,
        cfg,
        jsonl_path=out_dir / "results.jsonl",
        resume=args.resume,
    )
    write_report([result], out_dir)

    if args.random_baseline:
        rb = random_baseline(manifest, seed=cfg.scoring.seed, iou_threshold=cfg.iou_threshold)
        print(f"random baseline: {100 * rb.mean:.2f}% +/- {100 * rb.std_error:.2f} (expectation {100 * rb.expectation:.2f}%)")
    print(
        f"{result.label} on {result.dataset}/{result.split}: "
        f"accuracy {100 * result.accuracy:.2f}% "
        f"({result.hits}/{len(result.instances)} hits, {result.error_count} errors)"
    )
    print(f"results: {out_dir / 'results.jsonl'}")
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    refs_dir = Path(args.refs_dir)
    if not refs_dir.is_dir():
        raise ValueError(f"refs directory not found: {refs_dir}")
    detections = Path(args.detections)
    if not detections.exists():
        raise ValueError(f"detections file not found: {detections}")
    manifest = convert_refcoco(
        refs_dir,
        detections,
        split=args.split,
        dataset=args.dataset,
        detector=args.detector,
        images_root=args.images_root,
        on_missing_detections=args.on_missing,
    )
    write_manifest(manifest, args.out)
    dropped = manifest.provenance.get("images_missing_detections", 0)
    if dropped:
        print(f"warning: {dropped} image ids lacked detections; their expressions were dropped")
    print(f"wrote {len(manifest.instances)} instances ({manifest.dataset}/{manifest.split}) to {args.out}")
    return 0


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    sup = argparse.SUPPRESS
    parser.add_argument("--config", help="JSON config file; CLI flags override it")
    parser.add_argument("--backend", choices=["pretrained", "synthetic"], default=sup,
                        help="denoiser backend (default: pretrained)")
    parser.add_argument("--checkpoint", default=sup,
                        help="checkpoint version tag (1-2, 1-4, 1-5, 2-1) or model-hub id")
    parser.add_argument("--timesteps", default=sup, help="'start:end:count' or comma list (default 100:900:10)")
    parser.add_argument("--samples", type=int, default=sup, help="noise samples per timestep (default 1)")
    parser.add_argument("--aggregation", choices=sorted(AGGREGATIONS), default=sup,
                        help="view-error aggregation (default sum)")
    parser.add_argument("--expr-mode", dest="expr_mode", choices=["full", "core"], default=sup,
                        help="expression processing mode (default full)")
    parser.add_argument("--canvas", type=int, default=sup, help="model canvas size (default 512)")
    parser.add_argument("--fill", default=sup, help="mask fill color 'r,g,b' in [0,1] (default 0.5,0.5,0.5)")
    parser.add_argument("--resize", choices=["stretch", "letterbox"], default=sup,
                        help="canvas resize mode (default stretch)")
    parser.add_argument("--seed", type=int, default=sup, help="global noise seed (default 0)")
    parser.add_argument("--iou-thresh", dest="iou_thresh", type=float, default=sup,
                        help="hit threshold on IoU (default 0.5)")
    parser.add_argument("--workers", type=int, default=sup, help="parallel instance workers (default 1)")
    parser.add_argument("--offline", action="store_true", default=sup,
                        help=f"forbid network fetches (cache dir via ${CACHE_DIR_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffground",
        description="Zero-shot visual grounding by diffusion noise-prediction scoring.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("ground", help="rank proposals for one image and expression")
    g.add_argument("--image", required=True, help="input image file")
    g.add_argument("--expression", required=True, help="referring expression")
    g.add_argument("--proposals", help="JSON file of proposal boxes")
    g.add_argument("--box", action="append", help="explicit proposal 'x0,y0,x1,y1' (repeatable)")
    g.add_argument("--annotate", help="write an annotated copy of the image here")
    _add_pipeline_flags(g)
    g.set_defaults(func=cmd_ground)

    e = sub.add_parser("evaluate", help="run a manifest and report Accuracy@IoU")
    e.add_argument("manifest", help="manifest JSON file")
    e.add_argument("--out", default="out", help="output directory (default ./out)")
    e.add_argument("--subset", type=int, default=argparse.SUPPRESS, help="evaluate a seeded subset of this size")
    e.add_argument("--subset-seed", dest="subset_seed", type=int, default=argparse.SUPPRESS,
                   help="seed for subset sampling (default 0)")
    e.add_argument("--resume", action="store_true", help="skip instance ids already in results.jsonl")
    e.add_argument("--random-baseline", dest="random_baseline", action="store_true",
                   help="also print the uniform-choice baseline on this manifest")
    _add_pipeline_flags(e)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("convert", help="convert RefCOCO-style annotations to a manifest")
    c.add_argument("--refs-dir", dest="refs_dir", required=True, help="directory with refs*.p and instances.json")
    c.add_argument("--detections", required=True, help="detections JSON keyed by image id")
    c.add_argument("--split", required=True, help="dataset split (e.g. val, testA, testB, test)")
    c.add_argument("--out", required=True, help="manifest output path")
    c.add_argument("--dataset", help="dataset name recorded in the manifest")
    c.add_argument("--detector", default="unknown", help="detector identifier recorded in the manifest")
    c.add_argument("--images-root", dest="images_root", help="prefix joined onto image file names")
    c.add_argument("--on-missing", dest="on_missing", choices=["error", "drop"], default="drop",
                   help="behavior when an image id lacks detections (default drop)")
    c.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except BackendUnavailable as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except (GroundingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
