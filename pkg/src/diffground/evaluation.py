"""Dataset evaluation: run the grounding pipeline, compute Accuracy@0.5, report.

For every manifest instance the pipeline processes the expression, encodes
it, builds the configured isolated views for each proposal, scores them,
selects a winner, and checks its IoU against the ground-truth box. An
instance that fails (bad image, degenerate proposal, ...) counts as a miss
with an error tag rather than shrinking the denominator; only backend
unavailability aborts a run.

Results stream to a JSONL file: the first line is a run header carrying the
config snapshot, backend descriptor, seed, and timestamp; every following
line is one per-instance record. The body lines contain no timestamps, so a
re-run with the same seed and a deterministic backend reproduces them
byte for byte. ``resume=True`` skips instance ids already present.

Instance-level parallelism is supported; records are emitted in manifest
order regardless of worker count, so parallel runs stay reproducible.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import DEFAULT_CHECKPOINT, Backend, BackendUnavailable
from .dataset import GroundingInstance, ImageCache, Manifest
from .errors import GroundingError
from .expression import ExpressionMode, NounPhraseExtractor, process
from .geometry import iou
from .isolation import MID_GRAY, crop_isolate, mask_isolate
from .schedule import NoiseSchedule
from .scorer import Aggregation, ProposalViews, ScoringConfig, score_proposals, select
from .version import __version__

log = logging.getLogger(__name__)

METHOD_LABELS = {
    Aggregation.CROP_ONLY: "Cropping",
    Aggregation.MASK_ONLY: "Masking",
    Aggregation.MIN: "VGDiffZero w/ Single IPM",
    Aggregation.SUM: "VGDiffZero",
}
_METHOD_ORDER = ["Cropping", "Masking", "VGDiffZero w/ Single IPM", "VGDiffZero"]
_SPLIT_ORDER = ["val", "testA", "testB", "test"]
MISSING_CELL = "—"


@dataclass(frozen=True)
class PipelineConfig:
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    expression_mode: ExpressionMode = ExpressionMode.FULL
    fill: tuple[float, float, float] = MID_GRAY
    resize_mode: str = "stretch"
    iou_threshold: float = 0.5
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "scoring": self.scoring.to_dict(),
            "expression_mode": self.expression_mode.value,
            "fill": list(self.fill),
            "resize_mode": self.resize_mode,
            "iou_threshold": self.iou_threshold,
        }

    def label(self) -> str:
        base = METHOD_LABELS[self.scoring.aggregation]
        if self.expression_mode is ExpressionMode.CORE:
            return f"{base} w/ core-exp"
        return base


@dataclass(frozen=True)
class InstanceResult:
    instance_id: str
    selected_index: int | None
    selected_box: tuple[float, float, float, float] | None
    iou: float
    hit: bool
    error: str | None = None
    expression: str | None = None
    fallback: bool = False
    proposal_errors: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "id": self.instance_id,
            "selected_index": self.selected_index,
            "selected_box": list(self.selected_box) if self.selected_box else None,
            "iou": self.iou,
            "hit": self.hit,
            "error": self.error,
            "expression": self.expression,
            "fallback": self.fallback,
            "proposal_errors": self.proposal_errors,
        }

    @classmethod
    def from_record(cls, rec: dict) -> InstanceResult:
        return cls(
            instance_id=rec["id"],
            selected_index=rec["selected_index"],
            selected_box=tuple(rec["selected_box"]) if rec.get("selected_box") else None,
            iou=rec["iou"],
            hit=rec["hit"],
            error=rec.get("error"),
            expression=rec.get("expression"),
            fallback=rec.get("fallback", False),
            proposal_errors=rec.get("proposal_errors", []),
        )


@dataclass
class EvalResult:
    dataset: str
    split: str
    label: str
    config: dict
    descriptor: dict
    instances: list[InstanceResult]
    wall_seconds: float = 0.0

    @property
    def hits(self) -> int:
        return sum(1 for r in self.instances if r.hit)

    @property
    def error_count(self) -> int:
        return sum(1 for r in self.instances if r.error is not None)

    @property
    def accuracy(self) -> float:
        if not self.instances:
            return 0.0
        return self.hits / len(self.instances)


def _evaluate_instance(
    instance: GroundingInstance,
    backend: Backend,
    schedule: NoiseSchedule,
    cfg: PipelineConfig,
    extractor: NounPhraseExtractor | None,
    cache: ImageCache,
) -> InstanceResult:
    try:
        expr = process(instance.expression, cfg.expression_mode, extractor)
        cond = backend.encode_text(expr.processed)
        image = cache.get(instance.image)
        mode = cfg.scoring.aggregation
        canvas = cfg.scoring.canvas
        views = []
        for i, prop in enumerate(instance.proposals):
            mask = (
                mask_isolate(image, prop.box, cfg.fill, canvas, cfg.resize_mode, proposal_index=i)
                if mode.needs_mask
                else None
            )
            crop = (
                crop_isolate(image, prop.box, canvas, cfg.resize_mode, cfg.fill, proposal_index=i)
                if mode.needs_crop
                else None
            )
            views.append(ProposalViews(mask=mask, crop=crop))
        records = score_proposals(views, cond, cfg.scoring, backend, schedule)
        chosen = select(records, mode)
        box = instance.proposals[chosen].box
        overlap = iou(box, instance.gt_box)
        return InstanceResult(
            instance_id=instance.instance_id,
            selected_index=chosen,
            selected_box=box.as_tuple(),
            iou=overlap,
            hit=overlap >= cfg.iou_threshold,
            expression=expr.processed,
            fallback=expr.fallback,
            proposal_errors=[r.summary() for r in records],
        )
    except BackendUnavailable:
        raise
    except (GroundingError, ValueError, OSError) as exc:
        log.warning("instance %s failed: %s", instance.instance_id, exc)
        return InstanceResult(
            instance_id=instance.instance_id,
            selected_index=None,
            selected_box=None,
            iou=0.0,
            hit=False,
            error=f"{type(exc).__name__}: {exc}",
        )


def _run_header(manifest: Manifest, backend: Backend, cfg: PipelineConfig) -> dict:
    return {
        "type": "header",
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "dataset": manifest.dataset,
        "split": manifest.split,
        "detector": manifest.detector,
        "instances": len(manifest.instances),
        "config": cfg.to_dict(),
        "descriptor": backend.descriptor.to_dict(),
        "seed": cfg.scoring.seed,
        "version": __version__,
    }


def _read_completed(jsonl_path: Path, header: dict) -> tuple[dict[str, InstanceResult], int]:
    """Parse completed records from a previous run.

    A trailing line that is unterminated or unparseable is a torn write from
    a crash; returns the records plus the offset where valid content ends so
    the caller can truncate before appending. Offsets are in characters,
    which equals bytes because records are written ASCII-escaped.
    """
    completed: dict[str, InstanceResult] = {}
    data = jsonl_path.read_text(encoding="utf-8")
    pos = 0
    header_seen = False
    valid_end = 0
    for line in data.splitlines(keepends=True):
        pos += len(line)
        if not line.endswith("\n"):
            log.warning("dropping torn trailing line in %s", jsonl_path)
            break
        body = line.rstrip("\n")
        if not header_seen:
            try:
                old_header = json.loads(body)
            except json.JSONDecodeError as exc:
                raise ValueError(f"cannot resume: corrupt header in {jsonl_path}") from exc
            for key in ("config", "descriptor", "dataset", "split", "seed"):
                if old_header.get(key) != header.get(key):
                    raise ValueError(f"cannot resume: {key} changed since previous run")
            header_seen = True
            valid_end = pos
            continue
        try:
            rec = json.loads(body)
        except json.JSONDecodeError:
            log.warning("dropping torn trailing line in %s", jsonl_path)
            break
        completed[rec["id"]] = InstanceResult.from_record(rec)
        valid_end = pos
    if not header_seen:
        raise ValueError(f"cannot resume: {jsonl_path} has no run header")
    return completed, valid_end


def evaluate(
    manifest: Manifest,
    backend: Backend,
    cfg: PipelineConfig | None = None,
    jsonl_path: str | Path | None = None,
    resume: bool = False,
    extractor: NounPhraseExtractor | None = None,
    image_cache: ImageCache | None = None,
    schedule: NoiseSchedule | None = None,
) -> EvalResult:
    """Run the full pipeline over a manifest and aggregate Accuracy@threshold."""
    cfg = cfg or PipelineConfig()
    schedule = schedule or backend.schedule
    cfg.scoring.validate(schedule)
    if backend.descriptor.canvas != cfg.scoring.canvas:
        raise ValueError(
            f"config canvas {cfg.scoring.canvas} != backend canvas {backend.descriptor.canvas}"
        )
    if not 0.0 < cfg.iou_threshold <= 1.0:
        raise ValueError(f"iou threshold must be in (0, 1], got {cfg.iou_threshold}")
    cache = image_cache or ImageCache()
    header = _run_header(manifest, backend, cfg)

    completed: dict[str, InstanceResult] = {}
    out_file = None
    if jsonl_path is not None:
        jsonl_path = Path(jsonl_path)
        jsonl_path.parent.mkdir(parents=True, exist_ok=True)
        if resume and jsonl_path.exists():
            compare = json.loads(json.dumps(header))  # normalize tuples for comparison
            completed, valid_end = _read_completed(jsonl_path, compare)
            with open(jsonl_path, "r+", encoding="utf-8") as f:
                f.truncate(valid_end)
            out_file = open(jsonl_path, "a", encoding="utf-8")
        else:
            out_file = open(jsonl_path, "w", encoding="utf-8")
            out_file.write(json.dumps(header, sort_keys=True) + "\n")
            out_file.flush()

    pending = [inst for inst in manifest.instances if inst.instance_id not in completed]
    started = time.monotonic()
    fresh: dict[str, InstanceResult] = {}

    def work(inst: GroundingInstance) -> InstanceResult:
        return _evaluate_instance(inst, backend, schedule, cfg, extractor, cache)

    try:
        if cfg.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results_iter = pool.map(work, pending)
                for result in results_iter:
                    fresh[result.instance_id] = result
                    if out_file is not None:
                        out_file.write(json.dumps(result.to_record(), sort_keys=True) + "\n")
                        out_file.flush()
        else:
            for inst in pending:
                result = work(inst)
                fresh[result.instance_id] = result
                if out_file is not None:
                    out_file.write(json.dumps(result.to_record(), sort_keys=True) + "\n")
                    out_file.flush()
    finally:
        if out_file is not None:
            out_file.close()

    ordered = []
    for inst in manifest.instances:
        if inst.instance_id in fresh:
            ordered.append(fresh[inst.instance_id])
        else:
            ordered.append(completed[inst.instance_id])

    label = cfg.label()
    if backend.descriptor.kind == "pretrained" and backend.descriptor.checkpoint != DEFAULT_CHECKPOINT:
        # distinguishes checkpoint-comparison rows in reports
        label = f"{label} (SD {backend.descriptor.checkpoint})"

    return EvalResult(
        dataset=manifest.dataset,
        split=manifest.split,
        label=label,
        config=cfg.to_dict(),
        descriptor=backend.descriptor.to_dict(),
        instances=ordered,
        wall_seconds=time.monotonic() - started,
    )


@dataclass(frozen=True)
class RandomBaselineResult:
    mean: float
    std_error: float
    trials: int
    expectation: float


def random_baseline_expectation(manifest: Manifest, iou_threshold: float = 0.5) -> float:
    """Closed-form expected accuracy of uniform proposal choice: mean of h_i/k_i."""
    ratios = []
    for inst in manifest.instances:
        hits = sum(1 for p in inst.proposals if iou(p.box, inst.gt_box) >= iou_threshold)
        ratios.append(hits / len(inst.proposals))
    return float(np.mean(ratios)) if ratios else 0.0


def random_baseline(
    manifest: Manifest, seed: int = 0, trials: int = 1000, iou_threshold: float = 0.5
) -> RandomBaselineResult:
    """Simulate uniformly random proposal selection; mean accuracy +/- standard error."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    n = len(manifest.instances)
    if n == 0:
        return RandomBaselineResult(0.0, 0.0, trials, 0.0)
    trial_hits = np.zeros(trials, dtype=np.float64)
    for inst in manifest.instances:
        hit_mask = np.array(
            [iou(p.box, inst.gt_box) >= iou_threshold for p in inst.proposals], dtype=bool
        )
        draws = rng.integers(0, len(inst.proposals), size=trials)
        trial_hits += hit_mask[draws]
    accs = trial_hits / n
    se = float(np.std(accs, ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return RandomBaselineResult(
        mean=float(accs.mean()),
        std_error=se,
        trials=trials,
        expectation=random_baseline_expectation(manifest, iou_threshold),
    )


def _ordered(values: list[str], canonical: list[str]) -> list[str]:
    known = [v for v in canonical if v in values]
    rest = [v for v in values if v not in canonical]
    return known + rest


def write_report(results: list[EvalResult], out_dir: str | Path, basename: str = "report") -> tuple[Path, Path]:
    """Emit accuracy tables (rows = methods, columns = splits) as CSV and markdown."""
    if not results:
        raise ValueError("no results to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cells: dict[tuple[str, str], float] = {}
    row_order: list[str] = []
    col_order: list[str] = []
    for r in results:
        cells[(r.label, r.split)] = r.accuracy
        if r.label not in row_order:
            row_order.append(r.label)
        if r.split not in col_order:
            col_order.append(r.split)
    rows = _ordered(row_order, _METHOD_ORDER)
    cols = _ordered(col_order, _SPLIT_ORDER)

    def cell(label: str, split: str) -> str:
        if (label, split) not in cells:
            return MISSING_CELL
        return f"{100.0 * cells[(label, split)]:.2f}"

    provenance_lines = []
    for r in results:
        d = r.descriptor
        s = r.config["scoring"]
        provenance_lines.append(
            f"{r.label} / {r.split}: backend={d['kind']} checkpoint={d['checkpoint']} "
            f"seed={s['seed']} timesteps={len(s['timesteps'])} samples={s['samples_per_timestep']} "
            f"expr={r.config['expression_mode']} instances={len(r.instances)} errors={r.error_count}"
        )

    csv_path = out_dir / f"{basename}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["Methods"] + cols)
        for label in rows:
            writer.writerow([label] + [cell(label, c) for c in cols])
    with open(csv_path, "a", encoding="utf-8") as f:
        for line in provenance_lines:
            f.write(f"# {line}\n")

    md_path = out_dir / f"{basename}.md"
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("| Methods | " + " | ".join(cols) + " |\n")
        f.write("|" + " --- |" * (len(cols) + 1) + "\n")
        for label in rows:
            f.write("| " + " | ".join([label] + [cell(label, c) for c in cols]) + " |\n")
        f.write("\nAccuracy (%), IoU threshold per run config.\n\nRun provenance:\n")
        for line in provenance_lines:
            f.write(f"- {line}\n")
    return csv_path, md_path
