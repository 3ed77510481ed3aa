"""Isolated proposal views: masked (global context) and cropped (local context).

Masking keeps the full frame and paints everything outside the proposal with
a fill color (default mid-gray, which maps to zero after the encoder's
[-1, 1] shift). Cropping extracts the proposal region alone. Both views are
resized to a square model canvas.

Continuous boxes are snapped to the pixel grid with floor/ceil (grow to
cover) so thin regions never vanish. Resizing is plain bilinear with
half-pixel centers; ``letterbox`` mode preserves aspect ratio and pads with
the fill color.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import GroundingError
from .geometry import BoundingBox, ImageSize

MID_GRAY = (0.5, 0.5, 0.5)


class DegenerateRegion(GroundingError):
    """Pixel-snapped box covers zero pixels."""


class ViewKind(enum.Enum):
    MASK = "mask"
    CROP = "crop"


@dataclass(frozen=True)
class SourceImage:
    """H x W x 3 pixel grid with channel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixel grid, got shape {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"empty pixel grid {p.shape}")
        if not np.isfinite(p).all() or p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("pixel values must be finite and within [0, 1]")

    @property
    def size(self) -> ImageSize:
        return ImageSize(width=self.pixels.shape[1], height=self.pixels.shape[0])


@dataclass(frozen=True)
class IsolatedView:
    """A proposal rendered alone on the model canvas."""

    pixels: np.ndarray
    view_kind: ViewKind
    proposal_index: int | None = None

    @property
    def canvas(self) -> int:
        return self.pixels.shape[0]


def snap_box(box: BoundingBox, size: ImageSize) -> tuple[int, int, int, int]:
    """Snap a continuous box to integer pixel bounds: floor mins, ceil maxes.

    Returns (x0, y0, x1, y1) clamped to the pixel grid. Raises
    DegenerateRegion if no pixel survives.
    """
    x0 = max(int(np.floor(box.x_min)), 0)
    y0 = max(int(np.floor(box.y_min)), 0)
    x1 = min(int(np.ceil(box.x_max)), size.width)
    y1 = min(int(np.ceil(box.y_max)), size.height)
    if x0 >= x1 or y0 >= y1:
        raise DegenerateRegion(f"box {box.as_tuple()} snaps to zero pixels on {size.width}x{size.height} grid")
    return (x0, y0, x1, y1)


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel sample centers (no corner alignment).

    Same-size input is returned as an exact copy; constant images stay
    exactly constant because interpolation uses the lerp form.
    """
    src_h, src_w = pixels.shape[:2]
    if (src_h, src_w) == (out_h, out_w):
        return pixels.copy()
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (src_h / out_h) - 0.5, 0.0, src_h - 1.0)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (src_w / out_w) - 0.5, 0.0, src_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    p00 = pixels[y0][:, x0]
    p01 = pixels[y0][:, x1]
    p10 = pixels[y1][:, x0]
    p11 = pixels[y1][:, x1]
    top = p00 + (p01 - p00) * wx
    bottom = p10 + (p11 - p10) * wx
    return top + (bottom - top) * wy


def _to_canvas(pixels: np.ndarray, canvas: int, mode: str, fill: tuple[float, float, float]) -> np.ndarray:
    if mode == "stretch":
        return resize_bilinear(pixels, canvas, canvas)
    if mode == "letterbox":
        h, w = pixels.shape[:2]
        scale = canvas / max(h, w)
        new_h = max(int(round(h * scale)), 1)
        new_w = max(int(round(w * scale)), 1)
        resized = resize_bilinear(pixels, new_h, new_w)
        out = np.empty((canvas, canvas, 3), dtype=np.float64)
        out[:, :] = np.asarray(fill, dtype=np.float64)
        oy = (canvas - new_h) // 2
        ox = (canvas - new_w) // 2
        out[oy : oy + new_h, ox : ox + new_w] = resized
        return out
    raise ValueError(f"unknown resize mode {mode!r}, expected 'stretch' or 'letterbox'")


def _check_canvas(canvas: int) -> None:
    if canvas < 8:
        raise ValueError(f"canvas must be at least 8, got {canvas}")


def compose_masked(
    pixels: np.ndarray,
    rect: tuple[int, int, int, int],
    fill: tuple[float, float, float],
) -> np.ndarray:
    """Full-resolution composite: pixels inside rect kept, outside set to fill."""
    x0, y0, x1, y1 = rect
    out = np.empty_like(pixels)
    out[:, :] = np.asarray(fill, dtype=pixels.dtype)
    out[y0:y1, x0:x1] = pixels[y0:y1, x0:x1]
    return out


def mask_isolate(
    image: SourceImage,
    box: BoundingBox,
    fill: tuple[float, float, float] = MID_GRAY,
    canvas: int = 512,
    mode: str = "stretch",
    proposal_index: int | None = None,
) -> IsolatedView:
    """Masked view: full frame with everything outside the box painted fill."""
    _check_canvas(canvas)
    rect = snap_box(box, image.size)
    composite = compose_masked(image.pixels, rect, fill)
    return IsolatedView(
        pixels=_to_canvas(composite, canvas, mode, fill),
        view_kind=ViewKind.MASK,
        proposal_index=proposal_index,
    )


def crop_isolate(
    image: SourceImage,
    box: BoundingBox,
    canvas: int = 512,
    mode: str = "stretch",
    fill: tuple[float, float, float] = MID_GRAY,
    proposal_index: int | None = None,
) -> IsolatedView:
    """Cropped view: the snapped sub-image alone, resized to the canvas."""
    _check_canvas(canvas)
    x0, y0, x1, y1 = snap_box(box, image.size)
    region = image.pixels[y0:y1, x0:x1]
    return IsolatedView(
        pixels=_to_canvas(region, canvas, mode, fill),
        view_kind=ViewKind.CROP,
        proposal_index=proposal_index,
    )
