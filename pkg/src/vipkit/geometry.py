"""Coordinate primitives, mask queries and quadratic Bezier math.

Coordinates are continuous pixel coordinates with the origin at the top-left
corner and y pointing down. Pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``,
so its center sits at ``(i + 0.5, j + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import ndimage


class GeometryError(ValueError):
    pass


class Point(NamedTuple):
    x: float
    y: float

    def pixel(self) -> tuple[int, int]:
        """Integer (col, row) of the pixel containing this point."""
        return math.floor(self.x), math.floor(self.y)


class BBox(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BBox:
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> Point:
        return Point((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def validate(self) -> BBox:
        if not all(math.isfinite(v) for v in self):
            raise GeometryError(f"non-finite bbox {tuple(self)}")
        if self.x_min < 0 or self.y_min < 0:
            raise GeometryError(f"negative bbox coordinates {tuple(self)}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"empty bbox {tuple(self)}")
        return self

    def clamp(self, width: int, height: int) -> BBox:
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        ).validate()

    def contains(self, p: Point) -> bool:
        return self.x_min <= p.x <= self.x_max and self.y_min <= p.y <= self.y_max


class EllipseSpec(NamedTuple):
    """Axis-aligned ellipse; ``a`` is the horizontal semi-axis, ``b`` the vertical one."""

    center: Point
    a: float
    b: float


class QuadraticBezier(NamedTuple):
    p0: Point
    p1: Point
    p2: Point


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean grid of shape ``(height, width)``."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise GeometryError(f"mask must be 2-D, got shape {bits.shape}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @cached_property
    def set_indices(self) -> np.ndarray:
        # flat row-major indices of set pixels, cached because samplers hit it repeatedly
        return np.flatnonzero(self.bits)

    @cached_property
    def interior_distance(self) -> np.ndarray:
        """Distance from each pixel center to the nearest unset or off-image pixel center."""
        padded = np.pad(self.bits, 1, constant_values=False)
        return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]

    @property
    def area(self) -> int:
        return int(self.set_indices.size)

    def is_empty(self) -> bool:
        return self.area == 0

    def contains(self, p: Point) -> bool:
        i, j = p.pixel()
        return 0 <= i < self.width and 0 <= j < self.height and bool(self.bits[j, i])

    def tight_bbox(self) -> BBox:
        """Smallest box covering every set pixel (pixel edges, not centers)."""
        if self.is_empty():
            raise GeometryError("empty mask has no bounding box")
        rows, cols = np.divmod(self.set_indices, self.width)
        return BBox(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))


def bezier_eval(curve: QuadraticBezier, t: float) -> Point:
    if not 0.0 <= t <= 1.0:
        raise GeometryError(f"bezier parameter {t!r} outside [0, 1]")
    p0, p1, p2 = curve
    u = 1.0 - t
    w0, w1, w2 = u * u, 2.0 * t * u, t * t
    return Point(w0 * p0.x + w1 * p1.x + w2 * p2.x, w0 * p0.y + w1 * p1.y + w2 * p2.y)


def _split(curve: QuadraticBezier) -> tuple[QuadraticBezier, QuadraticBezier]:
    p0, p1, p2 = curve
    a = Point((p0.x + p1.x) / 2, (p0.y + p1.y) / 2)
    b = Point((p1.x + p2.x) / 2, (p1.y + p2.y) / 2)
    m = Point((a.x + b.x) / 2, (a.y + b.y) / 2)
    return QuadraticBezier(p0, a, m), QuadraticBezier(m, b, p2)


def _chord_deviation(curve: QuadraticBezier) -> float:
    # B(t) - lerp(p0, p2, t) = t(1-t)(2 p1 - p0 - p2), largest at t = 1/2
    p0, p1, p2 = curve
    return math.hypot(p1.x - (p0.x + p2.x) / 2, p1.y - (p0.y + p2.y) / 2) / 2


def bezier_flatten(curve: QuadraticBezier, tolerance: float = 0.25, max_depth: int = 16) -> list[Point]:
    """Polyline approximation by adaptive subdivision.

    Every segment stays within ``tolerance`` pixels of the true curve. The
    first and last points are exactly ``p0`` and ``p2``.
    """
    out = [curve.p0]

    def recurse(c: QuadraticBezier, depth: int):
        if depth >= max_depth or _chord_deviation(c) < tolerance:
            out.append(c.p2)
            return
        left, right = _split(c)
        recurse(left, depth + 1)
        recurse(right, depth + 1)

    recurse(curve, 0)
    return out


def sample_point_in_mask(mask: BinaryMask, rng: np.random.Generator) -> Point:
    """Center of a set pixel drawn uniformly over all set pixels."""
    idx = mask.set_indices
    if idx.size == 0:
        raise GeometryError("cannot sample from an empty mask")
    flat = int(idx[rng.integers(idx.size)])
    row, col = divmod(flat, mask.width)
    return Point(col + 0.5, row + 0.5)


def ellipse_from_bbox(box: BBox, enlarge: float = 1.0) -> EllipseSpec:
    if not 1.0 <= enlarge <= 1.5:
        raise GeometryError(f"enlarge ratio {enlarge!r} outside [1, 1.5]")
    return EllipseSpec(box.center, enlarge * (box.width / 2), enlarge * (box.height / 2))


# clockwise in screen coordinates (y down), starting west
_MOORE = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))
_MOORE_INDEX = {d: k for k, d in enumerate(_MOORE)}


def boundary_pixels(mask: BinaryMask) -> np.ndarray:
    """Set pixels with a 4-neighbour that is unset or off the image."""
    padded = np.pad(mask.bits, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask.bits & ~interior


def _trace(component: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    h, w = component.shape

    def fg(x, y):
        return 0 <= x < w and 0 <= y < h and component[y, x]

    contour = [start]
    cur, back = start, 0
    first_move = None
    for _ in range(16 * int(component.sum()) + 16):
        for k in range(1, 9):
            d = (back + k) % 8
            nxt = (cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1])
            if fg(*nxt):
                break
        else:
            return contour  # isolated pixel
        prev = (cur[0] + _MOORE[d - 1][0], cur[1] + _MOORE[d - 1][1])
        if first_move is None:
            first_move = (cur, nxt)
        elif (cur, nxt) == first_move:
            break
        contour.append(nxt)
        back = _MOORE_INDEX[(prev[0] - nxt[0], prev[1] - nxt[1])]
        cur = nxt
    # closing point repeats the start; closure is implicit
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    return contour


def mask_contour(mask: BinaryMask) -> list[list[Point]]:
    """Outer boundary of every 8-connected blob, as closed polylines of pixel centers.

    Blobs are ordered by their first pixel in raster order. Hole boundaries are
    not traced.
    """
    if mask.is_empty():
        raise GeometryError("cannot trace the contour of an empty mask")
    labels, n = ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=int))
    values, firsts = np.unique(labels.ravel(), return_index=True)
    polylines = []
    for label, first in sorted(zip(values.tolist(), firsts.tolist()), key=lambda vf: vf[1]):
        if label == 0:
            continue
        row, col = divmod(first, mask.width)
        traced = _trace(labels == label, (col, row))
        polylines.append([Point(x + 0.5, y + 0.5) for x, y in traced])
    return polylines
