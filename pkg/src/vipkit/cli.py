"""Command line entry point.

Machine-readable JSON lines go to stdout, logs to stderr.
Exit codes: 0 success, 1 usage, 2 data error, 3 judge error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bench
from .dataset import RECORDS_FILE, read_annotations, synthesize_dataset
from .geometry import BBox
from .raster import ALL_KINDS, ImageCanvas, PromptKind, render_region_prompts
from .rle import MalformedAnnotation, decode_rle_mask
from .sampler import PolicyError, PromptPolicy, derive_stream, sample_prompt_for_bbox, sample_prompt_for_mask

log = logging.getLogger("vipkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_JUDGE = 0, 1, 2, 3
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")
    sys.stdout.flush()


def _load_policy(path) -> PromptPolicy:
    return PromptPolicy.load(path) if path else PromptPolicy()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _read_annotation(arg: str) -> dict:
    try:
        is_file = Path(arg).is_file()
    except OSError:  # inline JSON longer than a path may be
        is_file = False
    text = Path(arg).read_text(encoding="utf-8") if is_file else arg
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedAnnotation(f"annotation is neither a file nor JSON: {e}") from e


def cmd_render(args) -> int:
    image = _require_file(args.image, "image")
    policy = _load_policy(args.policy)
    if args.kind:
        policy = policy.only(args.kind)
    canvas = ImageCanvas.load(image)
    W, H = canvas.width, canvas.height
    ann = _read_annotation(args.annotation)
    regions = ann.get("regions", [ann])
    rng = derive_stream(args.seed, 0, 0)
    specs = []
    for region in regions:
        if region.get("mask") is not None:
            mask = decode_rle_mask(region["mask"], W, H)
            specs.append(sample_prompt_for_mask(mask, policy, rng))
        elif region.get("bbox") is not None:
            if args.kind and PromptKind(args.kind) not in policy.bbox_kinds:
                raise PolicyError(f"{args.kind} needs a mask annotation")
            specs.append(sample_prompt_for_bbox(BBox.from_xywh(*region["bbox"]), W, H, policy, rng))
        else:
            raise MalformedAnnotation("region needs a bbox or a mask")
    overlay = render_region_prompts(canvas, specs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    overlay.save_png(out, text={"vipkit-seed": str(args.seed)})
    for spec in specs:
        _emit({"seed": args.seed, "out": str(out), "kind": spec.kind.value, "color": list(spec.color),
               "alpha": spec.alpha, "spec": spec.to_dict()})
    return EXIT_OK


def cmd_synth(args) -> int:
    src = _require_file(args.input, "annotation file")
    if args.replicas < 1:
        raise UsageError("--replicas must be >= 1")
    policy = _load_policy(args.policy)
    out = Path(args.out)
    annotations = list(read_annotations(src))
    summary = synthesize_dataset(
        annotations, out, policy=policy, seed=args.seed, replicas=args.replicas,
        workers=args.concurrency, base_dir=src.parent,
    )
    manifest = {
        "seed": args.seed,
        "replicas": args.replicas,
        "policy": policy.to_config(),
        "inputs": summary.inputs,
        "records": summary.records,
        "skipped": summary.skipped,
        "errors": summary.errors,
        "records_file": RECORDS_FILE,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("synth: %d inputs, %d records, %d skipped", summary.inputs, summary.records, summary.skipped)
    _emit({"seed": args.seed, "inputs": summary.inputs, "records": summary.records, "skipped": summary.skipped,
           "out": str(out)})
    return EXIT_OK


def _make_judge(args):
    if args.judge == "local":
        return "local"
    audit = Path(args.out).with_suffix(".audit.jsonl") if args.verbose else None
    return bench.JudgeEndpoint.from_env(max_retries=args.max_retries, timeout=args.timeout, audit_path=audit)


def cmd_grade(args) -> int:
    samples = bench.load_samples(_require_file(args.samples, "samples file"))
    predictions = bench.load_predictions(_require_file(args.predictions, "predictions file"))
    judge = _make_judge(args)
    try:
        results = bench.grade_samples(samples, predictions, judge, args.concurrency)
    finally:
        if judge != "local":
            judge.close()
    bench.save_results(results, args.out)
    failed = [r.sample_id for r in results if not r.ok]
    for r in results:
        if not r.ok:
            log.error("grading failed for %s: %s", r.sample_id, r.error)
    _emit({"graded": len(results) - len(failed), "failed": len(failed), "judge": args.judge, "out": args.out})
    return EXIT_JUDGE if failed else EXIT_OK


def cmd_report(args) -> int:
    samples = bench.load_samples(_require_file(args.samples, "samples file"))
    results = bench.load_results(_require_file(args.results, "results file"))
    report = bench.aggregate(results, samples)
    sys.stdout.write(report.to_text() + "\n")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_JUDGE if report.failed else EXIT_OK


def cmd_repeat(args) -> int:
    samples = bench.load_samples(_require_file(args.samples, "samples file"))
    predictions = bench.load_predictions(_require_file(args.predictions, "predictions file"))
    judge = _make_judge(args)
    try:
        variance, overalls = bench.grade_run_repeatability(samples, predictions, args.k, judge, args.concurrency)
    finally:
        if judge != "local":
            judge.close()
    _emit({"judge": args.judge, "k": args.k, "overall": overalls, "variance": variance})
    return EXIT_OK


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vipkit", description="Visual prompt overlays, instruction data and benchmark grading.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=_seed, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
        p.add_argument("--verbose", action="store_true", help="debug logging; external judge traffic is audited")

    p = sub.add_parser("render", help="overlay a sampled visual prompt on one image")
    p.add_argument("--image", required=True, help="PNG or JPEG input image")
    p.add_argument("--annotation", required=True,
                   help='JSON (inline or file): {"bbox": [x, y, w, h]} or {"mask": RLE} or {"regions": [...]}')
    p.add_argument("--kind", choices=[k.value for k in ALL_KINDS], help="force one prompt kind")
    p.add_argument("--policy", help="prompt policy INI file")
    p.add_argument("--out", required=True, help="output PNG path")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="synthesize region-level instruction records")
    p.add_argument("--input", required=True, help="annotation JSONL file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--policy", help="prompt policy INI file")
    p.add_argument("--replicas", type=int, default=8, help="prompt re-samplings per input (default 8)")
    p.add_argument("--concurrency", type=int, default=os.cpu_count() or 1, help="worker processes")
    common(p)
    p.set_defaults(func=cmd_synth)

    def judge_args(p):
        p.add_argument("--samples", required=True, help="benchmark samples JSONL")
        p.add_argument("--predictions", required=True, help="predictions JSONL keyed by sample_id")
        p.add_argument("--judge", choices=["local", "external"], default="local")
        p.add_argument("--concurrency", type=int, default=os.cpu_count() or 1, help="parallel judge requests")
        p.add_argument("--max-retries", type=int, default=3)
        p.add_argument("--timeout", type=float, default=60.0, help="judge request timeout in seconds")

    p = sub.add_parser("grade", help="score predictions against ground truth")
    judge_args(p)
    p.add_argument("--out", required=True, help="results JSONL path")
    common(p, seed=False)
    p.set_defaults(func=cmd_grade)

    p = sub.add_parser("report", help="aggregate graded results per capability")
    p.add_argument("--results", required=True, help="results JSONL from grade")
    p.add_argument("--samples", required=True, help="benchmark samples JSONL")
    p.add_argument("--out", help="write the JSON summary here")
    common(p, seed=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("repeat", help="variance of the overall score over K grading runs")
    judge_args(p)
    p.add_argument("--k", type=int, default=5, help="number of runs (>= 2)")
    p.add_argument("--out", default="repeat_results.jsonl", help="audit file stem for --verbose")
    common(p, seed=False)
    p.set_defaults(func=cmd_repeat)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "concurrency", 1) < 1:
        parser.error("--concurrency must be >= 1")
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except bench.JudgeError as e:
        log.error("judge error: %s", e)
        return EXIT_JUDGE
    except (ValueError, OSError, KeyError, TypeError) as e:
        # GeometryError, RasterError, PolicyError, MalformedAnnotation and bench data errors land here
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
