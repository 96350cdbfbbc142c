"""Seeded resolution of region annotations into concrete visual prompts."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (
    BBox,
    BinaryMask,
    GeometryError,
    Point,
    QuadraticBezier,
    ellipse_from_bbox,
    mask_contour,
    sample_point_in_mask,
)
from .raster import (
    ALL_KINDS,
    Arrow,
    Color,
    Contour,
    Dot,
    PromptKind,
    Triangle,
    VisualPromptSpec,
    coverage_of,
)

PALETTE: dict[str, Color] = {
    "red": (255, 0, 0),
    "blue": (0, 0, 255),
    "green": (0, 255, 0),
    "yellow": (255, 255, 0),
    "purple": (128, 0, 128),
    "orange": (255, 165, 0),
}
_COLOR_NAMES = {rgb: name for name, rgb in PALETTE.items()}

KIND_NAMES = {
    PromptKind.RECTANGLE: "rectangle",
    PromptKind.ELLIPSE: "ellipse",
    PromptKind.POINT: "point",
    PromptKind.TRIANGLE: "triangle",
    PromptKind.MASK: "mask",
    PromptKind.MASK_CONTOUR: "mask contour",
    PromptKind.ARROW: "arrow",
    PromptKind.SCRIBBLE: "scribble",
}

BBOX_KINDS = (PromptKind.RECTANGLE, PromptKind.ELLIPSE, PromptKind.ARROW)

# thickness and point radius are specified at this reference resolution
REFERENCE_SIDE = 448
TRIANGLE_TRIES = 100


class PolicyError(ValueError):
    pass


def derive_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(seed, *keys)``.

    Streams for different key tuples do not depend on each other or on the
    order they are created in, which is what makes parallel generation
    reproducible.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


@dataclass(frozen=True)
class PromptPolicy:
    bbox_kinds: tuple[PromptKind, ...] = BBOX_KINDS
    mask_kinds: tuple[PromptKind, ...] = ALL_KINDS
    palette: tuple[str, ...] = tuple(PALETTE)
    random_rgb: bool = False
    thickness_range: tuple[int, int] = (2, 8)
    point_radius_range: tuple[float, float] = (4.0, 10.0)
    alpha_range: tuple[float, float] = (0.5, 1.0)
    enlarge_range: tuple[float, float] = (1.0, 1.5)
    arrow_length_range: tuple[float, float] = (0.2, 0.5)
    triangle_side_range: tuple[float, float] = (0.1, 0.3)

    def __post_init__(self):
        object.__setattr__(self, "bbox_kinds", tuple(PromptKind(k) for k in self.bbox_kinds))
        object.__setattr__(self, "mask_kinds", tuple(PromptKind(k) for k in self.mask_kinds))
        if not self.bbox_kinds or not self.mask_kinds:
            raise PolicyError("kind sets must be non-empty")
        extra = set(self.bbox_kinds) - set(BBOX_KINDS)
        if extra:
            raise PolicyError(f"box-only regions cannot use {sorted(k.value for k in extra)}")
        unknown = [c for c in self.palette if c not in PALETTE]
        if unknown:
            raise PolicyError(f"unknown palette colors {unknown}")
        if not self.palette and not self.random_rgb:
            raise PolicyError("palette is empty and random_rgb is off")
        for name in ("thickness_range", "point_radius_range", "alpha_range", "enlarge_range",
                     "arrow_length_range", "triangle_side_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise PolicyError(f"{name} is empty: ({lo}, {hi})")
        if self.thickness_range[0] < 1 or self.point_radius_range[0] <= 0:
            raise PolicyError("thickness and point radius must be positive")
        if not (0.5 <= self.alpha_range[0] and self.alpha_range[1] <= 1.0):
            raise PolicyError(f"alpha_range {self.alpha_range} not inside [0.5, 1]")
        if not (1.0 <= self.enlarge_range[0] and self.enlarge_range[1] <= 1.5):
            raise PolicyError(f"enlarge_range {self.enlarge_range} not inside [1, 1.5]")

    def only(self, kind: PromptKind | str) -> PromptPolicy:
        """Copy of this policy forced to one prompt kind."""
        kind = PromptKind(kind)
        bbox_kinds = (kind,) if kind in BBOX_KINDS else self.bbox_kinds
        return replace(self, bbox_kinds=bbox_kinds, mask_kinds=(kind,))

    # -- config file -------------------------------------------------------

    def to_config(self) -> str:
        """INI text with a single ``[policy]`` section; ranges are ``low, high``."""
        fields = {
            "bbox_kinds": ", ".join(k.value for k in self.bbox_kinds),
            "mask_kinds": ", ".join(k.value for k in self.mask_kinds),
            "palette": ", ".join(self.palette),
            "random_rgb": str(self.random_rgb).lower(),
            "thickness_range": _fmt_range(self.thickness_range),
            "point_radius_range": _fmt_range(self.point_radius_range),
            "alpha_range": _fmt_range(self.alpha_range),
            "enlarge_range": _fmt_range(self.enlarge_range),
            "arrow_length_range": _fmt_range(self.arrow_length_range),
            "triangle_side_range": _fmt_range(self.triangle_side_range),
        }
        return "[policy]\n" + "".join(f"{k} = {v}\n" for k, v in fields.items())

    @classmethod
    def from_config(cls, text: str) -> PromptPolicy:
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "policy" not in cp:
            raise PolicyError("config has no [policy] section")
        sec = cp["policy"]
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(sec) - known
        if unknown:
            raise PolicyError(f"unknown policy keys {sorted(unknown)}")
        kwargs = {}
        for key in ("bbox_kinds", "mask_kinds", "palette"):
            if key in sec:
                kwargs[key] = tuple(v.strip() for v in sec[key].split(",") if v.strip())
        if "random_rgb" in sec:
            kwargs["random_rgb"] = sec.getboolean("random_rgb")
        if "thickness_range" in sec:
            kwargs["thickness_range"] = tuple(int(v) for v in _parse_range(sec["thickness_range"]))
        for key in ("point_radius_range", "alpha_range", "enlarge_range", "arrow_length_range",
                    "triangle_side_range"):
            if key in sec:
                kwargs[key] = _parse_range(sec[key])
        try:
            return cls(**kwargs)
        except ValueError as e:
            raise PolicyError(str(e)) from e

    @classmethod
    def load(cls, path) -> PromptPolicy:
        return cls.from_config(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_config(), encoding="utf-8")


def _fmt_range(r) -> str:
    return f"{r[0]}, {r[1]}"


def _parse_range(s: str) -> tuple[float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise PolicyError(f"range needs two comma-separated values, got {s!r}")
    return float(parts[0]), float(parts[1])


# -- attribute draws -------------------------------------------------------


def _scale(W: int, H: int) -> float:
    return max(1.0, min(W, H) / REFERENCE_SIDE)


def _uniform(rng: np.random.Generator, r: tuple[float, float]) -> float:
    lo, hi = r
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def draw_color(policy: PromptPolicy, rng: np.random.Generator) -> Color:
    if policy.random_rgb and (not policy.palette or rng.random() < 0.5):
        return tuple(int(c) for c in rng.integers(0, 256, size=3))
    return PALETTE[policy.palette[int(rng.integers(len(policy.palette)))]]


def draw_colors(policy: PromptPolicy, rng: np.random.Generator, n: int) -> list[Color]:
    """``n`` distinct palette colors, so regions in one record stay distinguishable."""
    if n > len(policy.palette):
        raise PolicyError(f"{n} regions but only {len(policy.palette)} palette colors")
    picks = rng.choice(len(policy.palette), size=n, replace=False)
    return [PALETTE[policy.palette[int(i)]] for i in picks]


def _thickness(policy: PromptPolicy, rng: np.random.Generator, W: int, H: int) -> int:
    lo, hi = policy.thickness_range
    return max(1, round(int(rng.integers(lo, hi + 1)) * _scale(W, H)))


def _pick_kind(kinds: tuple[PromptKind, ...], rng: np.random.Generator) -> PromptKind:
    return kinds[int(rng.integers(len(kinds)))]


def _ellipse(box: BBox, policy: PromptPolicy, rng: np.random.Generator, W: int, H: int, thickness: int):
    # an enlarged ellipse around a box filling the canvas can miss it entirely
    ellipse = ellipse_from_bbox(box, _uniform(rng, policy.enlarge_range))
    probe = VisualPromptSpec(PromptKind.ELLIPSE, ellipse, (0, 0, 0), thickness)
    if not coverage_of(probe, W, H).any():
        ellipse = ellipse_from_bbox(box, 1.0)
    return ellipse


def _arrow_tail(head: Point, policy: PromptPolicy, rng: np.random.Generator, W: int, H: int) -> Point:
    length = _uniform(rng, policy.arrow_length_range) * min(W, H)
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    x = min(max(head.x + length * math.cos(angle), 0.5), W - 0.5)
    y = min(max(head.y + length * math.sin(angle), 0.5), H - 0.5)
    return Point(x, y)


def _place_dot(mask: BinaryMask, radius: float, rng: np.random.Generator) -> Dot:
    """Disk whose every covered pixel is set in the mask.

    Centers are drawn uniformly over set pixels whose distance to the nearest
    unset pixel exceeds the radius. When no pixel qualifies the radius shrinks
    to fit the deepest pixel; every set pixel fits a radius of 0.5.
    """
    depth = mask.interior_distance.ravel()[mask.set_indices]
    deepest = float(depth.max())
    if radius >= deepest:
        radius = max(0.5, deepest - 0.5)
    candidates = mask.set_indices[depth > radius]
    row, col = divmod(int(candidates[rng.integers(candidates.size)]), mask.width)
    return Dot(Point(col + 0.5, row + 0.5), radius)


def _equilateral(center: Point, side: float, rotation: float) -> Triangle:
    circ = side / math.sqrt(3)
    return Triangle(*(
        Point(center.x + circ * math.cos(rotation + k * 2 * math.pi / 3),
              center.y + circ * math.sin(rotation + k * 2 * math.pi / 3))
        for k in range(3)
    ))


def _sample_triangle(mask: BinaryMask, policy: PromptPolicy, rng: np.random.Generator) -> Triangle:
    base = math.sqrt(mask.area)
    tri = None
    for _ in range(TRIANGLE_TRIES):
        center = sample_point_in_mask(mask, rng)
        side = _uniform(rng, policy.triangle_side_range) * base
        tri = _equilateral(center, side, float(rng.uniform(0.0, 2 * math.pi / 3)))
        if all(mask.contains(p) for p in tri):
            return tri
    # shrink the last attempt toward its in-mask center; converges once
    # the circumradius drops below half a pixel
    center = Point((tri.a.x + tri.b.x + tri.c.x) / 3, (tri.a.y + tri.b.y + tri.c.y) / 3)
    while not all(mask.contains(p) for p in tri):
        tri = Triangle(*(Point(center.x + (p.x - center.x) / 2, center.y + (p.y - center.y) / 2) for p in tri))
    return tri


def _attributes(policy: PromptPolicy, rng: np.random.Generator, W: int, H: int, color: Color | None):
    if color is None:
        color = draw_color(policy, rng)
    thickness = _thickness(policy, rng, W, H)
    alpha = _uniform(rng, policy.alpha_range)
    return color, thickness, alpha


def sample_prompt_for_bbox(
    box: BBox,
    W: int,
    H: int,
    policy: PromptPolicy,
    rng: np.random.Generator,
    color: Color | None = None,
) -> VisualPromptSpec:
    """Rectangle, ellipse or arrow for a box-only region.

    The arrow head lands inside the box; the tail can be anywhere on the canvas.
    """
    box = box.clamp(W, H)
    kind = _pick_kind(policy.bbox_kinds, rng)
    color, thickness, alpha = _attributes(policy, rng, W, H, color)
    if kind is PromptKind.RECTANGLE:
        geometry = box
    elif kind is PromptKind.ELLIPSE:
        geometry = _ellipse(box, policy, rng, W, H, thickness)
    else:
        head = Point(float(rng.uniform(box.x_min, box.x_max)), float(rng.uniform(box.y_min, box.y_max)))
        geometry = Arrow(_arrow_tail(head, policy, rng, W, H), head)
    return VisualPromptSpec(kind, geometry, color, thickness, alpha)


def sample_prompt_for_mask(
    mask: BinaryMask,
    policy: PromptPolicy,
    rng: np.random.Generator,
    color: Color | None = None,
) -> VisualPromptSpec:
    """Any of the eight kinds for a region with a pixel mask.

    Arrow heads, points, triangle vertices and scribble anchors are all placed
    on set pixels of ``mask``.
    """
    if mask.is_empty():
        raise GeometryError("cannot place a prompt on an empty mask")
    W, H = mask.width, mask.height
    kind = _pick_kind(policy.mask_kinds, rng)
    color, thickness, alpha = _attributes(policy, rng, W, H, color)
    if kind is PromptKind.RECTANGLE:
        geometry = mask.tight_bbox()
    elif kind is PromptKind.ELLIPSE:
        geometry = _ellipse(mask.tight_bbox(), policy, rng, W, H, thickness)
    elif kind is PromptKind.POINT:
        radius = _uniform(rng, policy.point_radius_range) * _scale(W, H)
        geometry = _place_dot(mask, radius, rng)
    elif kind is PromptKind.TRIANGLE:
        geometry = _sample_triangle(mask, policy, rng)
    elif kind is PromptKind.MASK:
        geometry = mask
    elif kind is PromptKind.MASK_CONTOUR:
        geometry = Contour(tuple(tuple(line) for line in mask_contour(mask)))
    elif kind is PromptKind.ARROW:
        head = sample_point_in_mask(mask, rng)
        geometry = Arrow(_arrow_tail(head, policy, rng, W, H), head)
    else:
        geometry = QuadraticBezier(*(sample_point_in_mask(mask, rng) for _ in range(3)))
    return VisualPromptSpec(kind, geometry, color, thickness, alpha)


def color_name(color: Color) -> str:
    try:
        return _COLOR_NAMES[tuple(color)]
    except KeyError:
        raise PolicyError(f"color {tuple(color)} has no palette name") from None


def describe_prompt(spec: VisualPromptSpec) -> str:
    """Region tag text such as ``"red scribble"``."""
    return f"{color_name(spec.color)} {KIND_NAMES[spec.kind]}"
