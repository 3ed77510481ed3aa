"""Shared builders for synthetic scenes and manifests used across test modules.

Scenes are flat-color rectangles on a gray background. With the synthetic
backend, a proposal whose region color matches the expression's #rrggbb
token is provably the lowest-error proposal in both views, which makes
end-to-end selection assertions exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from diffground import BoundingBox, SyntheticBackend

# Saturated, pairwise non-collinear colors (after the [0,1] -> [-1,1] shift).
PALETTE = [
    "#3366cc",
    "#cc3333",
    "#33cc66",
    "#cccc33",
    "#cc33cc",
    "#33cccc",
    "#e68a2e",
    "#8a2ee6",
    "#2e8a5c",
    "#b85c2e",
]

CELL = 64
GRID = 4
IMAGE_SIDE = CELL * GRID


def hex_to_unit_rgb(color: str) -> tuple[float, float, float]:
    h = color.lstrip("#")
    return tuple(int(h[i : i + 2], 16) / 255.0 for i in (0, 2, 4))


def assert_palette_separated(backend: SyntheticBackend, min_mismatch: float = 1e-3) -> None:
    """Guard the fixtures: every palette pair must be clearly distinguishable."""
    sigs = [backend.color_signature(hex_to_unit_rgb(c)) for c in PALETTE]
    for i in range(len(sigs)):
        for j in range(i + 1, len(sigs)):
            mismatch = 1.0 - float(np.dot(sigs[i], sigs[j]))
            assert mismatch > min_mismatch, f"palette colors {PALETTE[i]} and {PALETTE[j]} too close"


def make_scene(rng: np.random.Generator, n_proposals: int) -> tuple[np.ndarray, list[BoundingBox], list[str], int]:
    """Gray image with n flat-color cells; returns (uint8 pixels, boxes, colors, target index)."""
    assert 1 <= n_proposals <= len(PALETTE)
    pixels = np.full((IMAGE_SIDE, IMAGE_SIDE, 3), 128, dtype=np.uint8)
    cells = rng.choice(GRID * GRID, size=n_proposals, replace=False)
    color_ids = rng.choice(len(PALETTE), size=n_proposals, replace=False)
    boxes, colors = [], []
    for cell, cid in zip(cells, color_ids):
        row, col = divmod(int(cell), GRID)
        x0, y0 = col * CELL, row * CELL
        color = PALETTE[cid]
        r, g, b = (int(color[i : i + 2], 16) for i in (1, 3, 5))
        pixels[y0 : y0 + CELL, x0 : x0 + CELL] = (r, g, b)
        boxes.append(BoundingBox(x0, y0, x0 + CELL, y0 + CELL))
        colors.append(color)
    target = int(rng.integers(0, n_proposals))
    return pixels, boxes, colors, target


def write_scene_png(pixels: np.ndarray, path: Path) -> None:
    Image.fromarray(pixels, mode="RGB").save(path)


def planted_manifest_dict(
    tmp_path: Path,
    rng: np.random.Generator,
    n_instances: int,
    match_gt: bool = True,
    name: str = "planted",
    split: str = "val",
    min_proposals: int = 3,
    max_proposals: int = 10,
) -> dict:
    """Build a manifest whose expressions name a planted color.

    match_gt=True: the named proposal's box is the ground truth (expect 100%
    accuracy with the synthetic backend). match_gt=False: the expression
    names a different, disjoint proposal (expect 0%).
    """
    instances = []
    for i in range(n_instances):
        n = int(rng.integers(min_proposals, max_proposals + 1))
        pixels, boxes, colors, target = make_scene(rng, n)
        img_path = tmp_path / f"{name}_{i}.png"
        write_scene_png(pixels, img_path)
        if match_gt:
            named = target
        else:
            others = [j for j in range(n) if j != target]
            named = others[int(rng.integers(0, len(others)))]
        instances.append(
            {
                "id": f"{name}-{i}",
                "image": str(img_path),
                "width": IMAGE_SIDE,
                "height": IMAGE_SIDE,
                "expression": f"the {colors[named]} object",
                "gt_box": list(boxes[target].as_tuple()),
                "proposals": [{"box": list(b.as_tuple()), "score": 0.5} for b in boxes],
            }
        )
    return {"dataset": "synthetic-scenes", "split": split, "detector": "fixture", "instances": instances}


def write_manifest_json(manifest: dict, path: Path) -> Path:
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def singleton_manifest_dict(
    tmp_path: Path,
    widths: list[float],
    name: str = "hand",
    split: str = "val",
) -> dict:
    """One gray image; instance i has a single proposal (0,0,w_i,10) vs gt (0,0,10,10).

    IoU is w/10 for w <= 10 and 10/w for w > 10, so hit flags are hand-checkable.
    """
    img_path = tmp_path / f"{name}.png"
    write_scene_png(np.full((32, 32, 3), 128, dtype=np.uint8), img_path)
    instances = []
    for i, w in enumerate(widths):
        instances.append(
            {
                "id": f"{name}-{i}",
                "image": str(img_path),
                "width": 32,
                "height": 32,
                "expression": "the gray area",
                "gt_box": [0, 0, 10, 10],
                "proposals": [{"box": [0, 0, w, 10], "score": 1.0}],
            }
        )
    return {"dataset": "hand-built", "split": split, "detector": "fixture", "instances": instances}
