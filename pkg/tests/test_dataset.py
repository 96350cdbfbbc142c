import json
from collections import Counter

import numpy as np
import pytest

from vipkit.dataset import (
    RECORDS_FILE,
    InstructionRecord,
    RegionTemplate,
    TemplateError,
    curation_bundle,
    load_records,
    substitute_region_tags,
    synthesize_dataset,
)
from vipkit.geometry import BBox, BinaryMask, Point
from vipkit.raster import Dot, ImageCanvas, PromptKind, VisualPromptSpec, coverage_of
from vipkit.rle import encode_rle_mask
from vipkit.sampler import PALETTE, PromptPolicy

RED, BLUE = PALETTE["red"], PALETTE["blue"]


def _rect(color):
    return VisualPromptSpec(PromptKind.RECTANGLE, BBox(0, 0, 4, 4), color)


def test_single_substitution():
    out = substitute_region_tags("What is <within red box>?", [_rect(RED)])
    assert out == "What is the object within the red rectangle?"


def test_two_placeholders_in_order():
    point = VisualPromptSpec(PromptKind.POINT, Dot(Point(2, 2), 1), BLUE)
    out = substitute_region_tags("Compare <region-1> with <region-2>.", [_rect(RED), point])
    assert out == "Compare the object within the red rectangle with the object within the blue point."


def test_repeated_placeholder_is_one_region():
    out = substitute_region_tags("Is <region> red? Describe <region>.", [_rect(RED)])
    assert out.count("the object within the red rectangle") == 2


def test_no_placeholders_no_prompts():
    assert substitute_region_tags("Describe the image.", []) == "Describe the image."


@pytest.mark.parametrize("n", [0, 2])
def test_count_mismatch(n):
    with pytest.raises(TemplateError):
        substitute_region_tags("What is <region>?", [_rect(RED)] * n)


def test_placeholder_listing():
    t = RegionTemplate("<region-2> then <within red box> then <region-2>")
    assert t.placeholders() == ["<region-2>", "<within red box>"]


def _write_inputs(image_dir, tmp_path, extra=()):
    rng = np.random.default_rng(3)
    bits = np.zeros((60, 80), bool)
    bits[10:40, 20:60] = True
    rows = [
        {"image": "imgs/img0.png", "image_id": "a", "source": "vg",
         "regions": [{"bbox": [5, 5, 30, 20]}], "template": "What is <region>?", "response": "A cup."},
        {"image": "imgs/img1.png", "image_id": "b", "source": "refcocog",
         "regions": [{"mask": encode_rle_mask(BinaryMask(bits))}, {"bbox": [50, 30, 20, 20]}],
         "template": "Is <region-1> left of <region-2>?", "response": "Yes, <region-1> is on the left."},
        {"image": "imgs/img2.png", "image_id": "c", "source": "vcr",
         "regions": [{"mask": encode_rle_mask(BinaryMask(rng.random((50, 50)) < 0.3))}],
         "template": "Describe <within red box>.", "response": "Noise."},
        *extra,
    ]
    path = tmp_path / "ann.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path, rows


def _synth(path, out, **kw):
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    return synthesize_dataset(rows, out, base_dir=path.parent, **kw)


def test_three_inputs_eight_replicas(image_dir, tmp_path):
    path, _ = _write_inputs(image_dir, tmp_path)
    summary = _synth(path, tmp_path / "out", seed=5)
    assert (summary.inputs, summary.records, summary.skipped) == (3, 24, 0)
    records = load_records(tmp_path / "out" / RECORDS_FILE)
    assert len(records) == 24
    assert Counter(r.input_index for r in records) == {0: 8, 1: 8, 2: 8}
    for r in records:
        assert (tmp_path / "out" / r.image_path).is_file()
        assert "<" not in r.prompt_text
    two = [r for r in records if r.input_index == 1]
    for r in two:
        s1, s2 = r.specs()
        assert s1.color != s2.color
        assert r.response_text.startswith("Yes, the object within the")


def test_replicas_differ(image_dir, tmp_path):
    path, _ = _write_inputs(image_dir, tmp_path)
    _synth(path, tmp_path / "out", seed=5)
    records = load_records(tmp_path / "out" / RECORDS_FILE)
    specs = {json.dumps(r.prompt_specs) for r in records if r.input_index == 2}
    assert len(specs) > 1


def test_deterministic_bytes(image_dir, tmp_path):
    path, _ = _write_inputs(image_dir, tmp_path)
    _synth(path, tmp_path / "a", seed=9)
    _synth(path, tmp_path / "b", seed=9)
    _synth(path, tmp_path / "c", seed=10)
    a = (tmp_path / "a" / RECORDS_FILE).read_bytes()
    assert a == (tmp_path / "b" / RECORDS_FILE).read_bytes()
    assert a != (tmp_path / "c" / RECORDS_FILE).read_bytes()
    for png in (tmp_path / "a" / "images").iterdir():
        assert png.read_bytes() == (tmp_path / "b" / "images" / png.name).read_bytes()


def test_parallel_matches_serial(image_dir, tmp_path):
    path, _ = _write_inputs(image_dir, tmp_path)
    _synth(path, tmp_path / "s", seed=1, workers=1)
    _synth(path, tmp_path / "p", seed=1, workers=3)
    assert (tmp_path / "s" / RECORDS_FILE).read_bytes() == (tmp_path / "p" / RECORDS_FILE).read_bytes()
    for png in (tmp_path / "s" / "images").iterdir():
        assert png.read_bytes() == (tmp_path / "p" / "images" / png.name).read_bytes()


def test_bad_image_is_skipped(image_dir, tmp_path):
    (image_dir / "broken.png").write_bytes(b"not a png")
    bad = {"image": "imgs/broken.png", "regions": [{"bbox": [0, 0, 5, 5]}], "template": "<region>"}
    path, _ = _write_inputs(image_dir, tmp_path, extra=[bad])
    summary = _synth(path, tmp_path / "out", seed=0, replicas=2)
    assert (summary.inputs, summary.records, summary.skipped) == (4, 6, 1)
    assert "input 3" in summary.errors[0]


def test_template_region_mismatch_is_skipped(image_dir, tmp_path):
    bad = {"image": "imgs/img0.png", "regions": [{"bbox": [0, 0, 5, 5]}], "template": "no tags"}
    path, _ = _write_inputs(image_dir, tmp_path, extra=[bad])
    summary = _synth(path, tmp_path / "out", seed=0, replicas=1)
    assert summary.skipped == 1 and summary.records == 3


def test_overlay_changes_only_covered_pixels(image_dir, tmp_path):
    path, rows = _write_inputs(image_dir, tmp_path)
    _synth(path, tmp_path / "out", seed=2)
    for r in load_records(tmp_path / "out" / RECORDS_FILE):
        src = ImageCanvas.load(tmp_path / rows[r.input_index]["image"])
        out = ImageCanvas.load(tmp_path / "out" / r.image_path)
        cov = np.zeros((src.height, src.width), bool)
        for spec in r.specs():
            cov |= coverage_of(spec, src.width, src.height)
        assert np.array_equal(out.pixels[~cov], src.pixels[~cov])


def test_mask_anchored_prompts_on_mask(image_dir, tmp_path):
    path, rows = _write_inputs(image_dir, tmp_path)
    _synth(path, tmp_path / "out", seed=4, policy=PromptPolicy().only("scribble"))
    for r in load_records(tmp_path / "out" / RECORDS_FILE):
        if r.input_index != 1:
            continue
        spec = r.specs()[0]
        assert spec.kind is PromptKind.SCRIBBLE
        for p in spec.geometry:
            assert 20 <= p.x < 60 and 10 <= p.y < 40


def test_record_validation_catches_residuals():
    rec = InstructionRecord("x.png", "What is <region>?", "", [_rect(RED).to_dict()], "vg")
    with pytest.raises(TemplateError):
        rec.validate()
    rec = InstructionRecord("x.png", "What is it?", "", [_rect(RED).to_dict()], "vg")
    with pytest.raises(TemplateError):
        rec.validate()
    rec = InstructionRecord("x.png", "What is the object within the red rectangle?", "", [_rect(RED).to_dict()], "vg")
    rec.validate()
    assert InstructionRecord.from_json(rec.to_json()) == rec


def test_curation_bundle():
    rec = InstructionRecord("out/1.png", "What is the object within the red rectangle?", "A cup.",
                            [_rect(RED).to_dict()], "vg")
    bundle = curation_bundle("in/1.png", rec, "What is <within red box>?", "You are a data curator.")
    assert bundle["images"] == ["in/1.png", "out/1.png"]
    assert bundle["region_tags"] == ["<within red box>"]
    assert bundle["ground_truth"] == "A cup."
