"""Grounding benchmark ingestion: manifests, detections, RefCOCO conversion.

The manifest is the uniform on-disk format every other module consumes:

    {
      "dataset": str, "split": str, "detector": str,
      "instances": [
        {"id": str, "image": str, "width": int, "height": int,
         "expression": str, "gt_box": [x0, y0, x1, y1],
         "proposals": [{"box": [x0, y0, x1, y1], "score": float}, ...]}
      ]
    }

Detections files are keyed by image id and may carry boxes in corner
("xyxy") or origin-plus-size ("xywh") form:

    {"<image_id>": [{"box": [..4 floats..], "score": float, "format": "xyxy"|"xywh"}, ...]}

Proposals are never produced here; an upstream detector's output is
treated as data. Boxes are clipped to their image at load time; proposals
that collapse are dropped, and instances left with no proposals are dropped
with a logged warning.
"""

from __future__ import annotations

import copy
import json
import logging
import pickle
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GroundingError
from .geometry import BoundingBox, ClipCollapse, ImageSize, clip_to_image
from .isolation import SourceImage

log = logging.getLogger(__name__)


class SchemaError(GroundingError):
    pass


class MissingImage(GroundingError):
    pass


class MissingDetections(GroundingError):
    pass


class SubsetTooLarge(GroundingError):
    pass


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    score: float = 0.0


@dataclass(frozen=True)
class GroundingInstance:
    instance_id: str
    image: str
    size: ImageSize
    expression: str
    gt_box: BoundingBox
    proposals: tuple[Proposal, ...]
    split: str = ""


@dataclass
class Manifest:
    dataset: str
    split: str
    detector: str
    instances: list[GroundingInstance]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)


def _parse_box(values, where: str) -> BoundingBox:
    if not isinstance(values, (list, tuple)) or len(values) != 4:
        raise SchemaError(f"{where}: box must be a list of 4 numbers, got {values!r}")
    try:
        return BoundingBox(*[float(v) for v in values])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _parse_instance(entry: dict, split: str, index: int) -> GroundingInstance | None:
    where = f"instances[{index}]"
    if not isinstance(entry, dict):
        raise SchemaError(f"{where}: expected an object")
    for key in ("id", "image", "width", "height", "expression", "gt_box", "proposals"):
        if key not in entry:
            raise SchemaError(f"{where}: missing field {key!r}")
    try:
        size = ImageSize(width=int(entry["width"]), height=int(entry["height"]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    expression = entry["expression"]
    if not isinstance(expression, str) or not expression.strip():
        raise SchemaError(f"{where}: expression must be non-empty text")

    gt = _parse_box(entry["gt_box"], f"{where}.gt_box")
    try:
        gt = clip_to_image(gt, size)
    except ClipCollapse as exc:
        raise SchemaError(f"{where}.gt_box: ground truth lies outside its image") from exc

    proposals = []
    for j, p in enumerate(entry["proposals"]):
        pwhere = f"{where}.proposals[{j}]"
        if not isinstance(p, dict) or "box" not in p:
            raise SchemaError(f"{pwhere}: expected an object with a 'box' field")
        box = _parse_box(p["box"], pwhere)
        try:
            box = clip_to_image(box, size)
        except ClipCollapse:
            log.warning("dropping proposal fully outside image: %s %s", entry["id"], box.as_tuple())
            continue
        proposals.append(Proposal(box=box, score=float(p.get("score", 0.0))))
    if not proposals:
        return None
    return GroundingInstance(
        instance_id=str(entry["id"]),
        image=str(entry["image"]),
        size=size,
        expression=expression,
        gt_box=gt,
        proposals=tuple(proposals),
        split=split,
    )


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a manifest file."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest {path} is not valid JSON: {exc}") from exc
    return parse_manifest(data)


def parse_manifest(data: dict) -> Manifest:
    if not isinstance(data, dict):
        raise SchemaError("manifest root must be an object")
    for key in ("dataset", "split", "instances"):
        if key not in data:
            raise SchemaError(f"manifest missing field {key!r}")
    split = str(data["split"])
    instances = []
    dropped = 0
    seen_ids: set[str] = set()
    for i, entry in enumerate(data["instances"]):
        inst = _parse_instance(entry, split, i)
        if inst is None:
            dropped += 1
            log.warning("dropping instance with no surviving proposals: %s", entry.get("id"))
            continue
        if inst.instance_id in seen_ids:
            raise SchemaError(f"duplicate instance id {inst.instance_id!r}")
        seen_ids.add(inst.instance_id)
        instances.append(inst)
    provenance = dict(data.get("provenance", {}))
    if dropped:
        provenance["instances_dropped_no_proposals"] = dropped
    return Manifest(
        dataset=str(data["dataset"]),
        split=split,
        detector=str(data.get("detector", "unknown")),
        instances=instances,
        provenance=provenance,
    )


def manifest_to_dict(manifest: Manifest) -> dict:
    return {
        "dataset": manifest.dataset,
        "split": manifest.split,
        "detector": manifest.detector,
        "provenance": manifest.provenance,
        "instances": [
            {
                "id": inst.instance_id,
                "image": inst.image,
                "width": inst.size.width,
                "height": inst.size.height,
                "expression": inst.expression,
                "gt_box": list(inst.gt_box.as_tuple()),
                "proposals": [{"box": list(p.box.as_tuple()), "score": p.score} for p in inst.proposals],
            }
            for inst in manifest.instances
        ],
    }


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Serialize a manifest deterministically (same manifest, same bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest_to_dict(manifest), indent=1, sort_keys=True), encoding="utf-8")


def load_detections(path: str | Path) -> dict[str, list[Proposal]]:
    """Read a detections file into per-image proposal lists (unclipped)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read detections {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError("detections root must be an object keyed by image id")
    out: dict[str, list[Proposal]] = {}
    for image_id, entries in data.items():
        proposals = []
        for j, entry in enumerate(entries):
            where = f"detections[{image_id}][{j}]"
            if not isinstance(entry, dict) or "box" not in entry:
                raise SchemaError(f"{where}: expected an object with a 'box' field")
            fmt = entry.get("format", "xyxy")
            vals = entry["box"]
            if not isinstance(vals, (list, tuple)) or len(vals) != 4:
                raise SchemaError(f"{where}: box must be a list of 4 numbers")
            vals = [float(v) for v in vals]
            try:
                if fmt == "xyxy":
                    box = BoundingBox(*vals)
                elif fmt == "xywh":
                    box = BoundingBox.from_xywh(*vals)
                else:
                    raise SchemaError(f"{where}: unknown box format {fmt!r}")
            except ValueError as exc:
                raise SchemaError(f"{where}: {exc}") from exc
            proposals.append(Proposal(box=box, score=float(entry.get("score", 0.0))))
        out[str(image_id)] = proposals
    return out


def _find_refs_file(refs_dir: Path) -> Path:
    candidates = sorted(refs_dir.glob("refs*.p"))
    if not candidates:
        raise SchemaError(f"no refs*.p annotation file in {refs_dir}")
    return candidates[0]


def convert_refcoco(
    refs_dir: str | Path,
    detections_file: str | Path,
    split: str,
    dataset: str | None = None,
    detector: str = "unknown",
    images_root: str | None = None,
    on_missing_detections: str = "error",
) -> Manifest:
    """Build a manifest from RefCOCO-style annotations plus a detections file.

    Expects ``refs(*.p)`` (pickled ref list) and ``instances.json``
    (COCO images/annotations) inside refs_dir. Emits one instance per
    (expression, ground-truth box) pair in the chosen split.

    on_missing_detections: "error" raises MissingDetections on the first
    image id absent from the detections file; "drop" skips those instances
    and counts them in provenance.
    """
    if on_missing_detections not in ("error", "drop"):
        raise ValueError(f"on_missing_detections must be 'error' or 'drop', got {on_missing_detections!r}")
    refs_dir = Path(refs_dir)
    refs_path = _find_refs_file(refs_dir)
    instances_path = refs_dir / "instances.json"
    if not instances_path.exists():
        raise SchemaError(f"missing {instances_path}")

    with open(refs_path, "rb") as f:
        refs = pickle.load(f)
    coco = json.loads(instances_path.read_text(encoding="utf-8"))
    images = {img["id"]: img for img in coco.get("images", [])}
    annotations = {ann["id"]: ann for ann in coco.get("annotations", [])}

    available_splits = sorted({r.get("split", "") for r in refs})
    if split not in available_splits:
        raise SchemaError(f"split {split!r} not defined for this dataset; available: {available_splits}")

    detections = load_detections(detections_file)
    instances = []
    missing: list[str] = []
    for ref in sorted(refs, key=lambda r: r["ref_id"]):
        if ref.get("split") != split:
            continue
        image_id = ref["image_id"]
        img = images.get(image_id)
        ann = annotations.get(ref["ann_id"])
        if img is None or ann is None:
            raise SchemaError(f"ref {ref['ref_id']} points at unknown image {image_id} or annotation {ref['ann_id']}")
        key = str(image_id)
        if key not in detections:
            missing.append(key)
            if on_missing_detections == "error":
                raise MissingDetections(f"image id {key} absent from detections file")
            continue
        size = ImageSize(width=int(img["width"]), height=int(img["height"]))
        gt = clip_to_image(BoundingBox.from_xywh(*[float(v) for v in ann["bbox"]]), size)
        file_name = img.get("file_name", f"{image_id}.jpg")
        image_path = str(Path(images_root) / file_name) if images_root else file_name
        proposals = []
        for p in detections[key]:
            try:
                proposals.append(Proposal(box=clip_to_image(p.box, size), score=p.score))
            except ClipCollapse:
                continue
        if not proposals:
            log.warning("no surviving proposals for image %s; dropping its expressions", key)
            continue
        for sent in ref.get("sentences", []):
            instances.append(
                GroundingInstance(
                    instance_id=f"{ref['ref_id']}_{sent['sent_id']}",
                    image=image_path,
                    size=size,
                    expression=sent["sent"],
                    gt_box=gt,
                    proposals=tuple(proposals),
                    split=split,
                )
            )

    proposal_counts = [len(i.proposals) for i in instances]
    provenance = {
        "source": str(refs_path),
        "detections": str(Path(detections_file)),
        "expressions": len(instances),
        "proposals_per_instance_mean": float(np.mean(proposal_counts)) if proposal_counts else 0.0,
    }
    if missing:
        provenance["images_missing_detections"] = len(set(missing))
    log.info("converted %d instances for split %s (%d image ids lacked detections)", len(instances), split, len(set(missing)))
    return Manifest(
        dataset=dataset or refs_dir.name,
        split=split,
        detector=detector,
        instances=instances,
        provenance=provenance,
    )


def subset(manifest: Manifest, n: int, seed: int = 0) -> Manifest:
    """Deterministic seeded sample of n instances, original order preserved."""
    size = len(manifest.instances)
    if n < 1:
        raise ValueError(f"subset size must be >= 1, got {n}")
    if n > size:
        raise SubsetTooLarge(f"requested {n} of {size} instances")
    if n == size:
        chosen = manifest.instances[:]
    else:
        rng = np.random.default_rng(seed)
        indices = sorted(rng.choice(size, size=n, replace=False).tolist())
        chosen = [manifest.instances[i] for i in indices]
    provenance = copy.deepcopy(manifest.provenance)
    provenance["subset"] = {"n": n, "seed": seed, "of": size}
    return Manifest(
        dataset=manifest.dataset,
        split=manifest.split,
        detector=manifest.detector,
        instances=chosen,
        provenance=provenance,
    )


def load_image(path: str | Path) -> SourceImage:
    """Load an RGB image as a float pixel grid in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingImage(f"image file not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return SourceImage(pixels=arr)


class ImageCache:
    """Bounded LRU cache of decoded images, keyed by path; thread-safe."""

    def __init__(self, max_entries: int = 32):
        self.max_entries = max_entries
        self._lock = threading.Lock()
        self._entries: dict[str, SourceImage] = {}

    def get(self, path: str | Path) -> SourceImage:
        key = str(path)
        with self._lock:
            if key in self._entries:
                self._entries[key] = self._entries.pop(key)
                return self._entries[key]
        image = load_image(path)
        with self._lock:
            self._entries[key] = image
            while len(self._entries) > self.max_entries:
                self._entries.pop(next(iter(self._entries)))
        return image
