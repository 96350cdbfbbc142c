"""Region-level instruction data synthesis.

Input is a line-delimited JSON annotation file, one image per line::

    {"image": "imgs/cat.jpg", "image_id": "cat", "source": "refcocog",
     "regions": [{"bbox": [x, y, w, h]}, {"mask": {"size": [h, w], "counts": [...]}}],
     "template": "What is <within red box> holding?",
     "response": "It is holding a ball."}

Each input line yields ``replicas`` output records. Every replica draws
fresh prompts from a stream keyed on ``(seed, input index, replica)``, so
the output does not depend on worker count or scheduling.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .geometry import BBox, BinaryMask, GeometryError
from .raster import ImageCanvas, PromptKind, VisualPromptSpec, render_region_prompts
from .rle import MalformedAnnotation, decode_rle_mask, encode_rle_mask
from .sampler import (
    KIND_NAMES,
    PromptPolicy,
    color_name,
    derive_stream,
    describe_prompt,
    draw_colors,
    sample_prompt_for_bbox,
    sample_prompt_for_mask,
)

__all__ = [
    "MalformedAnnotation",
    "decode_rle_mask",
    "encode_rle_mask",
    "RegionAnnotation",
    "RegionTemplate",
    "InstructionRecord",
    "substitute_region_tags",
    "synthesize_dataset",
    "load_records",
    "curation_bundle",
]

log = logging.getLogger(__name__)

DEFAULT_REPLICAS = 8
RECORDS_FILE = "records.jsonl"
IMAGES_DIR = "images"

PLACEHOLDER_RE = re.compile(r"<(?:within [^<>]+|region(?:-\d+)?)>")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class RegionAnnotation:
    image_id: str
    region_index: int
    bbox: BBox | None = None
    mask: BinaryMask | None = None

    def __post_init__(self):
        if self.bbox is None and self.mask is None:
            raise MalformedAnnotation(f"region {self.region_index} of {self.image_id} has no geometry")

    @classmethod
    def from_json(cls, d: dict, image_id: str, region_index: int, W: int, H: int) -> RegionAnnotation:
        bbox = mask = None
        if d.get("bbox") is not None:
            try:
                bbox = BBox.from_xywh(*d["bbox"]).clamp(W, H)
            except (TypeError, GeometryError) as e:
                raise MalformedAnnotation(f"bad bbox {d['bbox']!r}: {e}") from e
        if d.get("mask") is not None:
            mask = decode_rle_mask(d["mask"], W, H)
        return cls(image_id, region_index, bbox, mask)


@dataclass(frozen=True)
class RegionTemplate:
    text: str

    def placeholders(self) -> list[str]:
        """Distinct placeholder tokens in order of first appearance."""
        seen: list[str] = []
        for m in PLACEHOLDER_RE.finditer(self.text):
            if m.group(0) not in seen:
                seen.append(m.group(0))
        return seen


def region_phrase(spec: VisualPromptSpec) -> str:
    return f"the object within the {describe_prompt(spec)}"


def substitute_region_tags(template: RegionTemplate | str, specs: list[VisualPromptSpec]) -> str:
    """Replace the k-th distinct placeholder with the phrase for ``specs[k]``.

    Repeated occurrences of one placeholder refer to the same region.
    """
    if isinstance(template, str):
        template = RegionTemplate(template)
    tokens = template.placeholders()
    if len(tokens) != len(specs):
        raise TemplateError(f"template has {len(tokens)} placeholders but {len(specs)} prompts were given")
    mapping = {tok: region_phrase(spec) for tok, spec in zip(tokens, specs)}
    return PLACEHOLDER_RE.sub(lambda m: mapping[m.group(0)], template.text)


def _substitute_with(mapping: dict[str, str], text: str) -> str:
    def repl(m):
        if m.group(0) not in mapping:
            raise TemplateError(f"response refers to {m.group(0)} which the template never introduces")
        return mapping[m.group(0)]

    return PLACEHOLDER_RE.sub(repl, text)


@dataclass
class InstructionRecord:
    image_path: str
    prompt_text: str
    response_text: str
    prompt_specs: list[dict]
    source_dataset: str
    source_image: str = ""
    input_index: int = 0
    replica: int = 0
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> InstructionRecord:
        return cls(**json.loads(line))

    def specs(self) -> list[VisualPromptSpec]:
        return [VisualPromptSpec.from_dict(d) for d in self.prompt_specs]

    def validate(self) -> None:
        specs = self.specs()
        if not specs:
            raise TemplateError("record carries no visual prompts")
        residual = PLACEHOLDER_RE.findall(self.prompt_text) + PLACEHOLDER_RE.findall(self.response_text)
        if residual:
            raise TemplateError(f"unsubstituted placeholders {residual}")
        for spec in specs:
            if region_phrase(spec) not in self.prompt_text:
                raise TemplateError(f"prompt text never references the {describe_prompt(spec)}")


@dataclass
class SynthSummary:
    inputs: int = 0
    records: int = 0
    skipped: int = 0
    errors: list[str] = field(default_factory=list)


def read_annotations(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def _sample_specs(regions: list[RegionAnnotation], W: int, H: int, policy: PromptPolicy,
                  rng) -> list[VisualPromptSpec]:
    # region tags need nameable colors, so records always draw from the palette
    colors = draw_colors(policy, rng, len(regions))
    specs = []
    for region, color in zip(regions, colors):
        if region.mask is not None:
            specs.append(sample_prompt_for_mask(region.mask, policy, rng, color))
        else:
            specs.append(sample_prompt_for_bbox(region.bbox, W, H, policy, rng, color))
    return specs


def _process(job) -> list[str]:
    index, raw, base_dir, out_dir, policy, seed, replicas = job
    image_ref = raw["image"]
    image_path = Path(image_ref)
    if not image_path.is_absolute():
        image_path = Path(base_dir) / image_path
    canvas = ImageCanvas.load(image_path)
    W, H = canvas.width, canvas.height
    image_id = str(raw.get("image_id", image_path.stem))
    regions = [RegionAnnotation.from_json(r, image_id, k, W, H) for k, r in enumerate(raw.get("regions", []))]
    if not regions:
        raise MalformedAnnotation("record has no regions")
    template = RegionTemplate(raw.get("template", ""))
    tokens = template.placeholders()
    if len(tokens) != len(regions):
        raise TemplateError(f"template has {len(tokens)} placeholders for {len(regions)} regions")
    response = raw.get("response", "")

    lines = []
    for replica in range(replicas):
        rng = derive_stream(seed, index, replica)
        specs = _sample_specs(regions, W, H, policy, rng)
        overlay = render_region_prompts(canvas, specs)
        rel = f"{IMAGES_DIR}/{index:06d}_{replica:02d}.png"
        overlay.save_png(Path(out_dir) / rel, text={"vipkit-seed": str(seed), "vipkit-replica": str(replica)})
        prompt_text = substitute_region_tags(template, specs)
        mapping = {tok: region_phrase(s) for tok, s in zip(tokens, specs)}
        record = InstructionRecord(
            image_path=rel,
            prompt_text=prompt_text,
            response_text=_substitute_with(mapping, response),
            prompt_specs=[s.to_dict() for s in specs],
            source_dataset=str(raw.get("source", "")),
            source_image=str(image_ref),
            input_index=index,
            replica=replica,
            seed=seed,
        )
        lines.append(record.to_json())
    return lines


def _safe_process(job) -> tuple[list[str], str | None]:
    try:
        return _process(job), None
    except Exception as e:  # one bad input never aborts the run
        return [], f"input {job[0]} ({job[1].get('image', '?')}): {type(e).__name__}: {e}"


def synthesize_dataset(
    annotations: Iterable[dict],
    out_dir,
    policy: PromptPolicy | None = None,
    seed: int = 0,
    replicas: int = DEFAULT_REPLICAS,
    workers: int = 1,
    base_dir=".",
) -> SynthSummary:
    """Render overlays and write ``records.jsonl`` under ``out_dir``.

    Records are written in input order, replicas in ascending order, whatever
    the worker count.
    """
    if replicas < 1:
        raise ValueError(f"replicas must be >= 1, got {replicas}")
    policy = policy or PromptPolicy()
    out_dir = Path(out_dir)
    (out_dir / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    jobs = [(i, raw, str(base_dir), str(out_dir), policy, seed, replicas) for i, raw in enumerate(annotations)]
    summary = SynthSummary(inputs=len(jobs))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_process, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_safe_process(job) for job in jobs]

    with open(out_dir / RECORDS_FILE, "w", encoding="utf-8") as f:
        for lines, err in results:
            if err is not None:
                summary.skipped += 1
                summary.errors.append(err)
                log.warning("skipped %s", err)
                continue
            for line in lines:
                f.write(line + "\n")
            summary.records += len(lines)
    log.info("wrote %d records from %d inputs (%d skipped)", summary.records, summary.inputs, summary.skipped)
    return summary


def load_records(path, validate: bool = True) -> list[InstructionRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = InstructionRecord.from_json(line)
            if validate:
                try:
                    rec.validate()
                except ValueError as e:
                    raise TemplateError(f"{path}:{n}: {e}") from e
            records.append(rec)
    return records


def curation_bundle(original_image: str, record: InstructionRecord, template: str, system_message: str) -> dict:
    """Request bundle for an external curator model.

    The curator sees the original and the overlaid image, the textual region
    tags (``<within red mask>`` style) and the dataset's ground truth.
    """
    tags = []
    for spec in record.specs():
        shape = "box" if spec.kind is PromptKind.RECTANGLE else KIND_NAMES[spec.kind]
        tags.append(f"<within {color_name(spec.color)} {shape}>")
    return {
        "system_message": system_message,
        "images": [original_image, record.image_path],
        "text_prompt": template,
        "region_tags": tags,
        "ground_truth": record.response_text,
    }
