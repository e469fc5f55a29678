"""Raster types, placement geometry, alpha compositing and encoder-input prep.

Everything here is a pure function on immutable value types: images are
float arrays in [0, 1], a foreground is an RGB patch plus an opacity map,
and a placement is the (cx, cy, scale) pose of that patch on a canvas.
Compositing crops anything that falls outside the canvas; nothing wraps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "CanvasDomainError",
    "DEFAULT_ENCODER_SIZE",
    "ForegroundPatch",
    "Image",
    "InvalidPlacementError",
    "ParsingMap",
    "Placement",
    "composite",
    "load_foreground",
    "load_image",
    "load_parsing",
    "max_displacement",
    "prepare_encoder_input",
    "render_foreground_canvas",
    "resize_bilinear",
    "save_foreground",
    "save_image",
    "save_parsing",
]

DEFAULT_ENCODER_SIZE = 256


class InvalidPlacementError(ValueError):
    """A placement with a non-positive scale or non-finite center."""


class CanvasDomainError(ValueError):
    """A point that was required to lie on the canvas does not."""


def _round_half_up(x: float) -> int:
    # Python's round() ties to even; pixel placement needs x.5 -> x+1 so
    # that integer shifts of the center shift the raster support exactly.
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Image:
    """RGB raster with intensities in [0, 1], shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) array, got shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"empty image extent {d.shape}")
        if d.dtype != np.float32:
            object.__setattr__(self, "data", d.astype(np.float32))
            d = self.data
        if float(d.min()) < 0.0 or float(d.max()) > 1.0:
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> "Image":
        return cls(np.zeros((height, width, 3), dtype=np.float32))

    @classmethod
    def full(cls, width: int, height: int, color) -> "Image":
        data = np.empty((height, width, 3), dtype=np.float32)
        data[:] = np.asarray(color, dtype=np.float32)
        return cls(data)


@dataclass(frozen=True)
class ForegroundPatch:
    """Cut-out object: RGB patch, per-pixel opacity and its source-image pose.

    ``origin_center`` is the patch center in the coordinates of the image it
    was cut from; its implicit origin scale is 1 by definition.
    """

    rgb: Image
    alpha: np.ndarray
    origin_center: tuple[float, float]

    def __post_init__(self) -> None:
        a = self.alpha
        if a.shape != (self.rgb.height, self.rgb.width):
            raise ValueError(
                f"alpha extent {a.shape} != rgb extent "
                f"{(self.rgb.height, self.rgb.width)}"
            )
        if a.dtype != np.float32:
            object.__setattr__(self, "alpha", a.astype(np.float32))
            a = self.alpha
        if float(a.min()) < 0.0 or float(a.max()) > 1.0:
            raise ValueError("alpha values must lie in [0, 1]")
        if not np.any(a > 0):
            raise ValueError("foreground patch is fully transparent")

    @property
    def width(self) -> int:
        return self.rgb.width

    @property
    def height(self) -> int:
        return self.rgb.height

    origin_scale: float = field(default=1.0, init=False, repr=False)


@dataclass(frozen=True)
class ParsingMap:
    """Per-pixel scene-class labels plus a class -> display color palette."""

    labels: np.ndarray
    palette: np.ndarray

    def __post_init__(self) -> None:
        lab = self.labels
        if lab.ndim != 2:
            raise ValueError(f"labels must be 2-d, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            object.__setattr__(self, "labels", lab.astype(np.int32))
            lab = self.labels
        pal = np.asarray(self.palette, dtype=np.float32)
        if pal.ndim != 2 or pal.shape[1] != 3:
            raise ValueError(f"palette must be (n, 3), got {pal.shape}")
        object.__setattr__(self, "palette", pal)
        if lab.min() < 0 or lab.max() >= pal.shape[0]:
            raise ValueError("labels must index into the palette")

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def to_rgb(self) -> Image:
        """Render labels through the palette; this is the encoder's S input."""
        return Image(self.palette[self.labels].astype(np.float32))


@dataclass(frozen=True)
class Placement:
    """Pose (cx, cy, scale) of a foreground on a canvas.

    The center may lie partially or fully off-canvas; compositing crops.
    """

    cx: float
    cy: float
    scale: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise InvalidPlacementError(f"non-finite center ({self.cx}, {self.cy})")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise InvalidPlacementError(f"scale must be positive, got {self.scale}")

    def shifted(self, dx: float = 0.0, dy: float = 0.0, ds: float = 0.0) -> "Placement":
        return Placement(self.cx + dx, self.cy + dy, self.scale + ds)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers; identity sizes are a copy."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extent must be positive, got {out_h}x{out_w}")
    in_h, in_w = arr.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if arr.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    a = arr.astype(np.float64)
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(arr.dtype if arr.dtype == np.float64 else np.float32)


def _scaled_patch(fg: ForegroundPatch, scale: float) -> tuple[np.ndarray, np.ndarray]:
    sh = max(1, _round_half_up(fg.height * scale))
    sw = max(1, _round_half_up(fg.width * scale))
    return resize_bilinear(fg.rgb.data, sh, sw), resize_bilinear(fg.alpha, sh, sw)


def _blend_onto(canvas: np.ndarray, rgb: np.ndarray, alpha: np.ndarray, p: Placement) -> None:
    """Alpha-blend a pre-scaled patch onto ``canvas`` in place, cropping."""
    ch, cw = canvas.shape[:2]
    sh, sw = alpha.shape
    left = _round_half_up(p.cx - sw / 2.0)
    top = _round_half_up(p.cy - sh / 2.0)
    x0, y0 = max(left, 0), max(top, 0)
    x1, y1 = min(left + sw, cw), min(top + sh, ch)
    if x1 <= x0 or y1 <= y0:
        return
    a = alpha[y0 - top : y1 - top, x0 - left : x1 - left][..., None]
    f = rgb[y0 - top : y1 - top, x0 - left : x1 - left]
    region = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = a * f + (1.0 - a) * region


def composite(background: Image, fg: ForegroundPatch, p: Placement) -> Image:
    """Alpha-blend ``fg`` onto a copy of ``background`` at pose ``p``.

    The patch is resized by ``p.scale`` (bilinear, about its center),
    centered at (cx, cy) and blended as alpha*fg + (1-alpha)*bg. Anything
    outside the canvas is dropped; the background is never mutated, and
    pixels under zero opacity are bit-identical to the background.
    """
    rgb, alpha = _scaled_patch(fg, p.scale)
    out = background.data.copy()
    _blend_onto(out, rgb, alpha, p)
    return Image(out)


def render_foreground_canvas(
    fg: ForegroundPatch, p: Placement, canvas_w: int, canvas_h: int
) -> Image:
    """Composite the patch onto an all-black canvas; the encoder's F input."""
    if canvas_w < 1 or canvas_h < 1:
        raise ValueError(f"canvas extent must be positive, got {canvas_w}x{canvas_h}")
    rgb, alpha = _scaled_patch(fg, p.scale)
    out = np.zeros((canvas_h, canvas_w, 3), dtype=np.float32)
    _blend_onto(out, rgb, alpha, p)
    return Image(out)


def max_displacement(
    origin_center: tuple[float, float], canvas_w: int, canvas_h: int
) -> float:
    """Distance from ``origin_center`` to the farthest canvas corner."""
    ox, oy = origin_center
    if not (0.0 <= ox <= canvas_w and 0.0 <= oy <= canvas_h):
        raise CanvasDomainError(
            f"origin ({ox}, {oy}) outside canvas {canvas_w}x{canvas_h}"
        )
    corners = ((0.0, 0.0), (canvas_w, 0.0), (0.0, canvas_h), (canvas_w, canvas_h))
    return max(math.hypot(ox - x, oy - y) for x, y in corners)


def prepare_encoder_input(img: Image, size: int = DEFAULT_ENCODER_SIZE) -> Image:
    """Resize to the square encoder resolution; same-size input passes through."""
    out = resize_bilinear(img.data, size, size)
    return Image(np.clip(out, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# PNG I/O. Images are 8-bit RGB, foregrounds 8-bit RGBA, parsing maps
# indexed-color PNG whose palette carries the display colors.
# ---------------------------------------------------------------------------


def _to_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def save_image(img: Image, path) -> None:
    PILImage.fromarray(_to_u8(img.data), mode="RGB").save(path)


def load_image(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Image(arr)


def save_foreground(fg: ForegroundPatch, path, meta_path=None) -> None:
    """Write an RGBA PNG; origin metadata goes to ``meta_path`` if given."""
    rgba = np.dstack([_to_u8(fg.rgb.data), _to_u8(fg.alpha)])
    PILImage.fromarray(rgba, mode="RGBA").save(path)
    if meta_path is not None:
        Path(meta_path).write_text(
            json.dumps({"origin_center": list(fg.origin_center)}, sort_keys=True)
        )


def load_foreground(path, origin_center: tuple[float, float] | None = None) -> ForegroundPatch:
    """Read an RGBA PNG. Without metadata the origin defaults to the center."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
    rgb = Image(arr[..., :3])
    alpha = arr[..., 3]
    if origin_center is None:
        origin_center = (rgb.width / 2.0, rgb.height / 2.0)
    return ForegroundPatch(rgb, alpha, origin_center)


def save_parsing(pm: ParsingMap, path) -> None:
    if pm.labels.max() > 255:
        raise ValueError("indexed PNG supports at most 256 classes")
    im = PILImage.fromarray(pm.labels.astype(np.uint8), mode="P")
    im.putpalette(_to_u8(pm.palette).flatten().tolist())
    im.save(path)


def load_parsing(path) -> ParsingMap:
    with PILImage.open(path) as im:
        if im.mode != "P":
            raise ValueError(f"parsing map must be an indexed PNG, got mode {im.mode}")
        labels = np.asarray(im, dtype=np.int32)
        raw = im.getpalette()
    n = int(labels.max()) + 1
    palette = np.asarray(raw[: 3 * n], dtype=np.float32).reshape(n, 3) / 255.0
    return ParsingMap(labels, palette)
