import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from vipkit.cli import main
from vipkit.geometry import BinaryMask
from vipkit.raster import ImageCanvas, VisualPromptSpec, coverage_of
from vipkit.rle import encode_rle_mask

WORKED = [("x = 3", 0.0), ("x = -1", 0.5), ("x = -5", 0.5), ("x = -5 or 5", 0.5), ("x = -1 or x = -5", 1.0)]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def image(tmp_path):
    rng = np.random.default_rng(0)
    p = tmp_path / "in.png"
    Image.fromarray(rng.integers(0, 256, (60, 80, 3), dtype=np.uint8)).save(p)
    return p


@pytest.fixture
def blob_rle():
    bits = np.zeros((60, 80), bool)
    bits[15:45, 20:60] = True
    return BinaryMask(bits), encode_rle_mask(BinaryMask(bits))


def test_render_rectangle_deterministic(capsys, tmp_path, image):
    ann = json.dumps({"bbox": [10, 10, 50, 30]})
    code, out = run(capsys, "render", "--image", image, "--annotation", ann, "--kind", "rectangle",
                    "--seed", 42, "--out", tmp_path / "a.png")
    assert code == 0
    line = json.loads(out)
    assert line["seed"] == 42 and line["kind"] == "rectangle"
    assert line["spec"]["geometry"]["bbox"] == [10, 10, 60, 40]
    run(capsys, "render", "--image", image, "--annotation", ann, "--kind", "rectangle", "--seed", 42,
        "--out", tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    spec = VisualPromptSpec.from_dict(line["spec"])
    src, dst = ImageCanvas.load(image), ImageCanvas.load(tmp_path / "a.png")
    cov = coverage_of(spec, 80, 60)
    assert np.array_equal(src.pixels[~cov], dst.pixels[~cov])
    assert not np.array_equal(src.pixels[cov], dst.pixels[cov])


def test_render_scribble_anchors_in_mask(capsys, tmp_path, image, blob_rle):
    mask, rle = blob_rle
    ann = tmp_path / "ann.json"
    ann.write_text(json.dumps({"mask": rle}))
    for seed in range(20):
        code, out = run(capsys, "render", "--image", image, "--annotation", ann, "--kind", "scribble",
                        "--seed", seed, "--out", tmp_path / f"s{seed}.png")
        assert code == 0
        anchors = json.loads(out)["spec"]["geometry"]["anchors"]
        assert len(anchors) == 3
        assert all(mask.bits[int(y), int(x)] for x, y in anchors)


def test_render_multiple_regions(capsys, tmp_path, image, blob_rle):
    _, rle = blob_rle
    ann = json.dumps({"regions": [{"bbox": [0, 0, 10, 10]}, {"mask": rle}]})
    code, out = run(capsys, "render", "--image", image, "--annotation", ann, "--out", tmp_path / "m.png")
    assert code == 0 and len(out.splitlines()) == 2


def test_render_mask_kind_needs_mask(capsys, tmp_path, image):
    code, _ = run(capsys, "render", "--image", image, "--annotation", '{"bbox": [0, 0, 5, 5]}',
                  "--kind", "scribble", "--out", tmp_path / "x.png")
    assert code == 2


def test_render_bad_annotation(capsys, tmp_path, image):
    code, _ = run(capsys, "render", "--image", image, "--annotation", "{nope", "--out", tmp_path / "x.png")
    assert code == 2
    code, _ = run(capsys, "render", "--image", image, "--annotation", '{"mask": {"counts": [1]}}',
                  "--out", tmp_path / "x.png")
    assert code == 2


def test_render_missing_image(capsys, tmp_path):
    code, _ = run(capsys, "render", "--image", tmp_path / "none.png", "--annotation", "{}", "--out", tmp_path / "x.png")
    assert code == 1


def _synth_inputs(tmp_path, n):
    rng = np.random.default_rng(1)
    (tmp_path / "imgs").mkdir()
    rows = []
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, (40, 50, 3), dtype=np.uint8)).save(tmp_path / "imgs" / f"{i}.png")
        rows.append({"image": f"imgs/{i}.png", "source": "vg", "regions": [{"bbox": [5, 5, 20, 20]}],
                     "template": "What is <region>?", "response": "Noise."})
    return jsonl(tmp_path / "ann.jsonl", rows)


def test_synth(capsys, tmp_path):
    src = _synth_inputs(tmp_path, 10)
    code, out = run(capsys, "synth", "--input", src, "--out", tmp_path / "out", "--seed", 3, "--concurrency", 1)
    assert code == 0
    summary = json.loads(out)
    assert summary["records"] == 80 and summary["seed"] == 3
    assert len((tmp_path / "out" / "records.jsonl").read_text().splitlines()) == 80
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["replicas"] == 8 and manifest["skipped"] == 0


def test_synth_bad_replicas(capsys, tmp_path):
    src = _synth_inputs(tmp_path, 1)
    code, _ = run(capsys, "synth", "--input", src, "--out", tmp_path / "o", "--replicas", 0)
    assert code == 1


def _bench_files(tmp_path, predictions):
    samples = jsonl(tmp_path / "samples.jsonl", [
        {"sample_id": f"s{i}", "question": "What is x?", "answer": "-1 <AND> -5", "capabilities": ["Math"]}
        for i in range(len(predictions))
    ])
    preds = jsonl(tmp_path / "preds.jsonl", [{"sample_id": f"s{i}", "prediction": p} for i, p in enumerate(predictions)])
    return samples, preds


def test_grade_and_report(capsys, tmp_path):
    samples, preds = _bench_files(tmp_path, [p for p, _ in WORKED])
    code, out = run(capsys, "grade", "--samples", samples, "--predictions", preds, "--out", tmp_path / "r.jsonl")
    assert code == 0 and json.loads(out)["graded"] == 5
    scores = [json.loads(l)["score"] for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert scores == [s for _, s in WORKED]
    code, out = run(capsys, "report", "--results", tmp_path / "r.jsonl", "--samples", samples,
                    "--out", tmp_path / "rep.json")
    assert code == 0
    assert "Math 50.0 (n=5)" in out and "All 50.0 (n=5)" in out
    assert json.loads((tmp_path / "rep.json").read_text())["overall"] == 50.0


def test_report_all_correct(capsys, tmp_path):
    samples, preds = _bench_files(tmp_path, ["-1 and -5"] * 3)
    run(capsys, "grade", "--samples", samples, "--predictions", preds, "--out", tmp_path / "r.jsonl")
    code, out = run(capsys, "report", "--results", tmp_path / "r.jsonl", "--samples", samples)
    assert code == 0 and "All 100.0" in out


def test_report_with_failures_exits_3(capsys, tmp_path):
    samples, _ = _bench_files(tmp_path, ["a", "b"])
    jsonl(tmp_path / "r.jsonl", [{"sample_id": "s0", "score": 1.0, "judge": "external"},
                                 {"sample_id": "s1", "score": None, "judge": "external", "error": "no score"}])
    code, out = run(capsys, "report", "--results", tmp_path / "r.jsonl", "--samples", samples)
    assert code == 3 and "failed 1: s1" in out


def test_grade_missing_prediction_is_data_error(capsys, tmp_path):
    samples, _ = _bench_files(tmp_path, ["a", "b"])
    preds = jsonl(tmp_path / "p.jsonl", [{"sample_id": "s0", "prediction": "x"}])
    code, _ = run(capsys, "grade", "--samples", samples, "--predictions", preds, "--out", tmp_path / "r.jsonl")
    assert code == 2


def test_external_judge_without_endpoint(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("JUDGE_ENDPOINT", raising=False)
    samples, preds = _bench_files(tmp_path, ["a"])
    code, _ = run(capsys, "grade", "--samples", samples, "--predictions", preds, "--judge", "external",
                  "--out", tmp_path / "r.jsonl")
    assert code == 3


def test_external_judge_unreachable(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("JUDGE_ENDPOINT", "http://127.0.0.1:9/v1/chat/completions")
    samples, preds = _bench_files(tmp_path, ["a"])
    code, out = run(capsys, "grade", "--samples", samples, "--predictions", preds, "--judge", "external",
                    "--max-retries", 1, "--timeout", 2, "--out", tmp_path / "r.jsonl")
    assert code == 3 and json.loads(out)["failed"] == 1


def test_repeat_local(capsys, tmp_path):
    samples, preds = _bench_files(tmp_path, [p for p, _ in WORKED])
    code, out = run(capsys, "repeat", "--samples", samples, "--predictions", preds, "--k", 5)
    assert code == 0
    assert json.loads(out)["variance"] == 0.0
    code, _ = run(capsys, "repeat", "--samples", samples, "--predictions", preds, "--k", 1)
    assert code == 2


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus"],
        ["render", "--image", "x.png"],
        ["synth", "--input", "a.jsonl", "--out", "o", "--flavour", "x"],
        ["synth", "--inp", "a.jsonl", "--out", "o"],
        ["render", "--image", "x", "--annotation", "{}", "--out", "o.png", "--seed", "-3"],
        ["grade", "--samples", "a", "--predictions", "b", "--out", "c", "--judge", "oracle"],
        ["grade", "--samples", "a", "--predictions", "b", "--out", "c", "--concurrency", "0"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 1


@pytest.mark.parametrize("cmd", ["render", "synth", "grade", "report", "repeat"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main([cmd, "--help"])
    assert e.value.code == 0
    assert "--" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "vipkit", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "render" in r.stdout
