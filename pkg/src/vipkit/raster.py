"""Prompt rasterization and alpha compositing.

Coverage is hard (no anti-aliasing): a pixel belongs to a prompt when its
center satisfies the shape predicate. Blending follows

    out = alpha * prompt + (1 - alpha) * image

on covered pixels only, rounded half-up per channel. Every other pixel is
copied through untouched.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
from PIL import Image, PngImagePlugin

from .geometry import (
    BBox,
    BinaryMask,
    EllipseSpec,
    Point,
    QuadraticBezier,
    bezier_flatten,
)
from .rle import decode_rle_mask, encode_rle_mask


class RasterError(ValueError):
    pass


class PromptKind(str, enum.Enum):
    RECTANGLE = "rectangle"
    ELLIPSE = "ellipse"
    POINT = "point"
    TRIANGLE = "triangle"
    MASK = "mask"
    MASK_CONTOUR = "mask_contour"
    ARROW = "arrow"
    SCRIBBLE = "scribble"


ALL_KINDS = tuple(PromptKind)


class Dot(NamedTuple):
    center: Point
    radius: float


class Triangle(NamedTuple):
    a: Point
    b: Point
    c: Point


class Arrow(NamedTuple):
    tail: Point
    head: Point


class Contour(NamedTuple):
    polylines: tuple[tuple[Point, ...], ...]


Geometry = Union[BBox, EllipseSpec, Dot, Triangle, BinaryMask, Contour, Arrow, QuadraticBezier]

_GEOMETRY_TYPE = {
    PromptKind.RECTANGLE: BBox,
    PromptKind.ELLIPSE: EllipseSpec,
    PromptKind.POINT: Dot,
    PromptKind.TRIANGLE: Triangle,
    PromptKind.MASK: BinaryMask,
    PromptKind.MASK_CONTOUR: Contour,
    PromptKind.ARROW: Arrow,
    PromptKind.SCRIBBLE: QuadraticBezier,
}

Color = tuple[int, int, int]


@dataclass(frozen=True)
class VisualPromptSpec:
    kind: PromptKind
    geometry: Geometry
    color: Color
    thickness: float = 2
    alpha: float = 1.0

    def __post_init__(self):
        kind = PromptKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not isinstance(self.geometry, _GEOMETRY_TYPE[kind]):
            raise RasterError(f"{kind.value} prompt needs {_GEOMETRY_TYPE[kind].__name__} geometry")
        color = tuple(int(c) for c in self.color)
        if len(color) != 3 or not all(0 <= c <= 255 for c in color):
            raise RasterError(f"invalid RGB color {self.color!r}")
        object.__setattr__(self, "color", color)
        if not self.thickness > 0:
            raise RasterError(f"thickness must be positive, got {self.thickness!r}")
        if not 0.5 <= self.alpha <= 1.0:
            raise RasterError(f"alpha {self.alpha!r} outside [0.5, 1]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "color": list(self.color),
            "thickness": self.thickness,
            "alpha": self.alpha,
            "geometry": _geometry_to_dict(self.kind, self.geometry),
        }

    @classmethod
    def from_dict(cls, d: dict) -> VisualPromptSpec:
        kind = PromptKind(d["kind"])
        return cls(
            kind=kind,
            geometry=_geometry_from_dict(kind, d["geometry"]),
            color=tuple(d["color"]),
            thickness=d["thickness"],
            alpha=d["alpha"],
        )


def _pt(p) -> list:
    return [p[0], p[1]]


def _geometry_to_dict(kind: PromptKind, g) -> dict:
    if kind is PromptKind.RECTANGLE:
        return {"bbox": list(g)}
    if kind is PromptKind.ELLIPSE:
        return {"center": _pt(g.center), "a": g.a, "b": g.b}
    if kind is PromptKind.POINT:
        return {"center": _pt(g.center), "radius": g.radius}
    if kind is PromptKind.TRIANGLE:
        return {"vertices": [_pt(p) for p in g]}
    if kind is PromptKind.MASK:
        return {"rle": encode_rle_mask(g)}
    if kind is PromptKind.MASK_CONTOUR:
        return {"polylines": [[_pt(p) for p in line] for line in g.polylines]}
    if kind is PromptKind.ARROW:
        return {"tail": _pt(g.tail), "head": _pt(g.head)}
    return {"anchors": [_pt(p) for p in g]}


def _geometry_from_dict(kind: PromptKind, d: dict):
    if kind is PromptKind.RECTANGLE:
        return BBox(*map(float, d["bbox"]))
    if kind is PromptKind.ELLIPSE:
        return EllipseSpec(Point(*d["center"]), float(d["a"]), float(d["b"]))
    if kind is PromptKind.POINT:
        return Dot(Point(*d["center"]), float(d["radius"]))
    if kind is PromptKind.TRIANGLE:
        return Triangle(*(Point(*p) for p in d["vertices"]))
    if kind is PromptKind.MASK:
        h, w = d["rle"]["size"]
        return decode_rle_mask(d["rle"], w, h)
    if kind is PromptKind.MASK_CONTOUR:
        return Contour(tuple(tuple(Point(*p) for p in line) for line in d["polylines"]))
    if kind is PromptKind.ARROW:
        return Arrow(Point(*d["tail"]), Point(*d["head"]))
    return QuadraticBezier(*(Point(*p) for p in d["anchors"]))


@dataclass(frozen=True, eq=False)
class ImageCanvas:
    """RGB image, ``pixels`` has shape ``(height, width, 3)`` and dtype uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise RasterError(f"canvas must be HxWx3, got {px.shape}")
        if px.dtype != np.uint8:
            raise RasterError(f"canvas must be uint8, got {px.dtype}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, width: int, height: int, color: Color = (0, 0, 0)) -> ImageCanvas:
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = color
        return cls(px)

    @classmethod
    def load(cls, path) -> ImageCanvas:
        with Image.open(path) as im:
            return cls(np.array(im.convert("RGB"), dtype=np.uint8))

    def save_png(self, path, text: dict[str, str] | None = None) -> None:
        info = PngImagePlugin.PngInfo()
        for k, v in (text or {}).items():
            info.add_text(k, str(v))
        Image.fromarray(self.pixels, mode="RGB").save(Path(path), format="PNG", pnginfo=info)

    def __eq__(self, other):
        if not isinstance(other, ImageCanvas):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class PromptLayer:
    pixels: np.ndarray  # (H, W, 3) uint8, prompt color on covered pixels
    coverage: np.ndarray  # (H, W) bool

    @property
    def width(self) -> int:
        return self.coverage.shape[1]

    @property
    def height(self) -> int:
        return self.coverage.shape[0]


class _Window(NamedTuple):
    rows: slice
    cols: slice
    cx: np.ndarray  # (1, w) pixel-center x
    cy: np.ndarray  # (h, 1) pixel-center y


def _window(x0: float, y0: float, x1: float, y1: float, W: int, H: int) -> _Window | None:
    c0 = max(0, math.floor(x0 - 1))
    r0 = max(0, math.floor(y0 - 1))
    c1 = min(W, math.ceil(x1 + 1))
    r1 = min(H, math.ceil(y1 + 1))
    if c0 >= c1 or r0 >= r1:
        return None
    cx = (np.arange(c0, c1, dtype=np.float64) + 0.5)[None, :]
    cy = (np.arange(r0, r1, dtype=np.float64) + 0.5)[:, None]
    return _Window(slice(r0, r1), slice(c0, c1), cx, cy)


def _stroke_segment(cov: np.ndarray, a: Point, b: Point, half: float) -> None:
    win = _window(min(a.x, b.x) - half, min(a.y, b.y) - half, max(a.x, b.x) + half, max(a.y, b.y) + half,
                  cov.shape[1], cov.shape[0])
    if win is None:
        return
    dx, dy = b.x - a.x, b.y - a.y
    px, py = win.cx - a.x, win.cy - a.y
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        d2 = px * px + py * py
    else:
        t = np.clip((px * dx + py * dy) / seg2, 0.0, 1.0)
        ex, ey = px - t * dx, py - t * dy
        d2 = ex * ex + ey * ey
    cov[win.rows, win.cols] |= d2 <= half * half


def _stroke_polyline(cov: np.ndarray, pts, half: float, closed: bool) -> None:
    pts = list(pts)
    if len(pts) == 1:
        _stroke_segment(cov, pts[0], pts[0], half)
        return
    pairs = list(zip(pts, pts[1:]))
    if closed and len(pts) > 2:
        pairs.append((pts[-1], pts[0]))
    for a, b in pairs:
        _stroke_segment(cov, a, b, half)


def _fill_triangle(cov: np.ndarray, a: Point, b: Point, c: Point) -> None:
    xs, ys = (a.x, b.x, c.x), (a.y, b.y, c.y)
    win = _window(min(xs), min(ys), max(xs), max(ys), cov.shape[1], cov.shape[0])
    if win is None:
        return

    def edge(p, q):
        return (q.x - p.x) * (win.cy - p.y) - (q.y - p.y) * (win.cx - p.x)

    e0, e1, e2 = edge(a, b), edge(b, c), edge(c, a)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    cov[win.rows, win.cols] |= inside


def arrow_head(arrow: Arrow, thickness: float) -> Triangle:
    """Equilateral head of side ``4 * thickness`` with its apex on the head point."""
    side = 4.0 * thickness
    dx, dy = arrow.head.x - arrow.tail.x, arrow.head.y - arrow.tail.y
    n = math.hypot(dx, dy)
    ux, uy = (dx / n, dy / n) if n > 0 else (0.0, 1.0)
    depth = side * math.sqrt(3) / 2
    bx, by = arrow.head.x - ux * depth, arrow.head.y - uy * depth
    px, py = -uy * side / 2, ux * side / 2
    return Triangle(arrow.head, Point(bx + px, by + py), Point(bx - px, by - py))


def coverage_of(spec: VisualPromptSpec, W: int, H: int) -> np.ndarray:
    cov = np.zeros((H, W), dtype=bool)
    g, t = spec.geometry, float(spec.thickness)
    half = t / 2
    kind = spec.kind
    if kind is PromptKind.RECTANGLE:
        win = _window(*g, W, H)
        if win is not None:
            inside = (win.cx >= g.x_min) & (win.cx <= g.x_max) & (win.cy >= g.y_min) & (win.cy <= g.y_max)
            edge_dist = np.minimum(np.minimum(win.cx - g.x_min, g.x_max - win.cx),
                                   np.minimum(win.cy - g.y_min, g.y_max - win.cy))
            cov[win.rows, win.cols] = inside & (edge_dist < t)
    elif kind is PromptKind.ELLIPSE:
        (ex, ey), a, b = g
        win = _window(ex - a - half, ey - b - half, ex + a + half, ey + b + half, W, H)
        if win is not None:
            dx, dy = win.cx - ex, win.cy - ey
            outer = (dx / (a + half)) ** 2 + (dy / (b + half)) ** 2 <= 1.0
            if a - half > 0 and b - half > 0:
                outer &= (dx / (a - half)) ** 2 + (dy / (b - half)) ** 2 > 1.0
            cov[win.rows, win.cols] = outer
    elif kind is PromptKind.POINT:
        (px, py), r = g
        win = _window(px - r, py - r, px + r, py + r, W, H)
        if win is not None:
            cov[win.rows, win.cols] = (win.cx - px) ** 2 + (win.cy - py) ** 2 <= r * r
    elif kind is PromptKind.TRIANGLE:
        _stroke_polyline(cov, g, half, closed=True)
    elif kind is PromptKind.MASK:
        if g.bits.shape != (H, W):
            raise RasterError(f"mask is {g.width}x{g.height}, canvas is {W}x{H}")
        cov[...] = g.bits
    elif kind is PromptKind.MASK_CONTOUR:
        for line in g.polylines:
            _stroke_polyline(cov, line, half, closed=True)
    elif kind is PromptKind.ARROW:
        _stroke_segment(cov, g.tail, g.head, half)
        _fill_triangle(cov, *arrow_head(g, t))
    elif kind is PromptKind.SCRIBBLE:
        _stroke_polyline(cov, bezier_flatten(g), half, closed=False)
    return cov


def draw_prompt(spec: VisualPromptSpec, W: int, H: int) -> PromptLayer:
    cov = coverage_of(spec, W, H)
    if not cov.any():
        raise RasterError(f"{spec.kind.value} prompt does not touch the {W}x{H} canvas")
    px = np.zeros((H, W, 3), dtype=np.uint8)
    px[cov] = spec.color
    return PromptLayer(px, cov)


def composite(canvas: ImageCanvas, layer: PromptLayer, alpha: float) -> ImageCanvas:
    if (layer.height, layer.width) != (canvas.height, canvas.width):
        raise RasterError(
            f"layer is {layer.width}x{layer.height}, canvas is {canvas.width}x{canvas.height}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise RasterError(f"alpha {alpha!r} outside [0, 1]")
    out = canvas.pixels.copy()
    cov = layer.coverage
    blended = alpha * layer.pixels[cov].astype(np.float64) + (1.0 - alpha) * canvas.pixels[cov].astype(np.float64)
    out[cov] = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return ImageCanvas(out)


def render_region_prompts(canvas: ImageCanvas, specs: list[VisualPromptSpec]) -> ImageCanvas:
    """Composite each prompt in order; later prompts land on top of earlier ones."""
    if not specs:
        raise RasterError("no prompts to render")
    for spec in specs:
        canvas = composite(canvas, draw_prompt(spec, canvas.width, canvas.height), spec.alpha)
    return canvas
