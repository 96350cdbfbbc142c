"""Visual prompt overlays, region-level instruction data and benchmark grading."""

from .geometry import BBox, BinaryMask, EllipseSpec, Point, QuadraticBezier
from .raster import ImageCanvas, PromptKind, VisualPromptSpec, composite, draw_prompt, render_region_prompts
from .sampler import PromptPolicy, derive_stream, describe_prompt, sample_prompt_for_bbox, sample_prompt_for_mask

__version__ = "0.1.0"
