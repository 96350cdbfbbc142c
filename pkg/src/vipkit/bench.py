"""Benchmark grading: judge prompt, local oracle, external judge, report.

Ground truths use a flat ``<AND>`` / ``<OR>`` grammar. Scores live on the
eleven-value grid 0.0, 0.1, ..., 1.0 and reports scale means by 100.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import httpx

log = logging.getLogger(__name__)

CAPABILITIES = ("Rec", "OCR", "Know", "Math", "Rel", "Lang")
PROMPT_VARIANTS = ("bbox", "human")
SCORE_GRID = tuple(k / 10 for k in range(11))

JUDGE_TEMPLATE = "judge_prompt_v1.txt"
JUDGE_TEMPLATE_SHA256 = "ca1865b6fe91ec5bd08da2fcdf7f3cff7fcb7f6366a4a3e99fe3e9eb267c8b11"

AND, OR = "<AND>", "<OR>"
_NUMBER_RE = re.compile(r"(?<![\d.])-?\d+(?:\.\d+)?")


class GTParseError(ValueError):
    pass


class BenchDataError(ValueError):
    pass


class JudgeError(RuntimeError):
    pass


@dataclass(frozen=True)
class GTExpression:
    connective: str | None  # "AND", "OR" or None for a single literal
    literals: tuple[str, ...]

    def __str__(self):
        if self.connective is None:
            return self.literals[0]
        return f" <{self.connective}> ".join(self.literals)


def parse_gt(text: str) -> GTExpression:
    if not text or not text.strip():
        raise GTParseError("empty ground truth")
    has_and, has_or = AND in text, OR in text
    if has_and and has_or:
        raise GTParseError(f"ground truth mixes <AND> and <OR>: {text!r}")
    if not (has_and or has_or):
        return GTExpression(None, (text.strip(),))
    token = AND if has_and else OR
    literals = tuple(part.strip() for part in text.split(token))
    if any(not lit for lit in literals):
        raise GTParseError(f"empty element in ground truth {text!r}")
    return GTExpression("AND" if has_and else "OR", literals)


@dataclass(frozen=True)
class BenchSample:
    sample_id: str
    question: str
    answer: str
    capabilities: tuple[str, ...]
    prompt_variant: str = "bbox"

    def __post_init__(self):
        caps = tuple(self.capabilities)
        object.__setattr__(self, "capabilities", caps)
        if not caps:
            raise BenchDataError(f"sample {self.sample_id} has no capability tags")
        unknown = [c for c in caps if c not in CAPABILITIES]
        if unknown:
            raise BenchDataError(f"sample {self.sample_id} has unknown capabilities {unknown}")
        if self.prompt_variant not in PROMPT_VARIANTS:
            raise BenchDataError(f"sample {self.sample_id} has unknown prompt variant {self.prompt_variant!r}")
        parse_gt(self.answer)

    @property
    def ground_truth(self) -> GTExpression:
        return parse_gt(self.answer)

    @classmethod
    def from_dict(cls, d: dict) -> BenchSample:
        caps = d["capabilities"]
        if isinstance(caps, str):
            caps = [c.strip() for c in caps.split(",") if c.strip()]
        return cls(str(d["sample_id"]), d["question"], d["answer"], tuple(caps), d.get("prompt_variant", "bbox"))

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "question": self.question,
            "answer": self.answer,
            "capabilities": list(self.capabilities),
            "prompt_variant": self.prompt_variant,
        }


@dataclass
class GradeResult:
    sample_id: str
    score: float | None
    judge: str  # "local" or "external"
    raw_judge_text: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.score is not None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> GradeResult:
        return cls(str(d["sample_id"]), d.get("score"), d.get("judge", "local"),
                   d.get("raw_judge_text", ""), d.get("error"))


def snap_score(x: float) -> float:
    """Round half-up onto the 0.1 grid, clamped to [0, 1]."""
    k = math.floor(x * 10 + 0.5)
    return min(max(k, 0), 10) / 10


# -- judge prompt ----------------------------------------------------------


def judge_template() -> str:
    return resources.files("vipkit").joinpath("resources", JUDGE_TEMPLATE).read_text(encoding="utf-8")


def template_checksum() -> str:
    return hashlib.sha256(judge_template().encode("utf-8")).hexdigest()


def build_judge_prompt(sample: BenchSample, prediction: str) -> str:
    """Few-shot grading prompt whose last table row is the sample, score left blank."""
    if not prediction or not prediction.strip():
        raise BenchDataError(f"empty prediction for sample {sample.sample_id}")
    row = " | ".join([sample.question, str(sample.ground_truth), prediction, ""])
    return judge_template() + row


# -- local oracle ----------------------------------------------------------


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def local_grade(sample: BenchSample, prediction: str) -> GradeResult:
    """Substring oracle: AND gives partial credit per element present, OR and
    single literals are all-or-nothing."""
    gt = sample.ground_truth
    pred = _normalize(prediction)
    hits = [_normalize(lit) in pred for lit in gt.literals]
    if gt.connective == "AND":
        score = snap_score(sum(hits) / len(hits))
    else:
        score = 1.0 if any(hits) else 0.0
    return GradeResult(sample.sample_id, score, "local")


# -- external judge --------------------------------------------------------


def parse_judge_score(text: str) -> float | None:
    """Last decimal number in the reply, snapped to the grid; None if absent or out of [0, 1]."""
    matches = _NUMBER_RE.findall(text or "")
    if not matches:
        return None
    value = float(matches[-1])
    if not 0.0 <= value <= 1.0:
        return None
    return snap_score(value)


RETRY_STATUSES = {408, 429, 500, 502, 503, 504}


class JudgeEndpoint:
    """Chat-completion style HTTP judge.

    ``max_retries`` bounds both transport retries per request and re-asks on
    unparseable replies. Backoff doubles from ``backoff`` seconds.
    """

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        audit_path=None,
        transport: httpx.BaseTransport | None = None,
    ):
        if max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        self.url = url
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self.audit_path = Path(audit_path) if audit_path else None
        self._audit_lock = threading.Lock()
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None, **kwargs) -> JudgeEndpoint:
        env = os.environ if env is None else env
        url = env.get("JUDGE_ENDPOINT")
        if not url:
            raise JudgeError("JUDGE_ENDPOINT is not set")
        return cls(url, env.get("JUDGE_MODEL", "gpt-4"), env.get("JUDGE_API_KEY"), **kwargs)

    def close(self):
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _audit(self, payload: dict, response: dict | str):
        if self.audit_path is None:
            return
        with self._audit_lock, open(self.audit_path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"request": payload, "response": response}, ensure_ascii=False) + "\n")

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "n": 1,
        }
        last_error = None
        for attempt in range(self.max_retries):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.url, json=payload)
            except httpx.TransportError as e:
                last_error = f"{type(e).__name__}: {e}"
                log.warning("judge request failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code in RETRY_STATUSES:
                last_error = f"HTTP {resp.status_code}"
                log.warning("judge returned %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise JudgeError(f"judge returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise JudgeError(f"malformed judge response: {e}") from e
            self._audit(payload, body)
            return text
        raise JudgeError(f"judge unreachable after {self.max_retries} attempts ({last_error})")


def external_grade(sample: BenchSample, prediction: str, judge: JudgeEndpoint) -> GradeResult:
    """Grade one sample with the external judge.

    Unparseable replies are re-asked up to ``judge.max_retries`` times and then
    recorded as a failed result. Transport exhaustion raises JudgeError.
    """
    prompt = build_judge_prompt(sample, prediction)
    reply = ""
    for _ in range(judge.max_retries):
        reply = judge.complete(prompt)
        score = parse_judge_score(reply)
        if score is not None:
            return GradeResult(sample.sample_id, score, "external", reply)
    return GradeResult(sample.sample_id, None, "external", reply,
                       error=f"no score in judge reply after {judge.max_retries} attempts")


Judge = Union[str, JudgeEndpoint]


def _grade_one(sample: BenchSample, prediction: str, judge: Judge) -> GradeResult:
    if judge == "local":
        return local_grade(sample, prediction)
    if not prediction.strip():
        # nothing to send; the oracle scores an empty answer 0.0
        return local_grade(sample, prediction)
    try:
        return external_grade(sample, prediction, judge)
    except JudgeError as e:
        return GradeResult(sample.sample_id, None, "external", error=str(e))


def grade_samples(
    samples: Sequence[BenchSample],
    predictions: Mapping[str, str],
    judge: Judge = "local",
    concurrency: int = 1,
) -> list[GradeResult]:
    """Results in the order of ``samples``; failures come back with ``score=None``."""
    missing = [s.sample_id for s in samples if s.sample_id not in predictions]
    if missing:
        raise BenchDataError(f"no prediction for samples {missing}")
    if judge != "local" and not isinstance(judge, JudgeEndpoint):
        raise ValueError(f"judge must be 'local' or a JudgeEndpoint, got {judge!r}")
    if judge == "local" or concurrency <= 1:
        return [_grade_one(s, predictions[s.sample_id], judge) for s in samples]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(lambda s: _grade_one(s, predictions[s.sample_id], judge), samples))


# -- aggregation -----------------------------------------------------------


@dataclass
class BenchReport:
    scores: dict[str, float | None]  # capability -> mean * 100
    counts: dict[str, int]
    overall: float | None
    total: int
    failed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "counts": self.counts,
            "overall": self.overall,
            "total": self.total,
            "failed": self.failed,
        }

    def to_text(self) -> str:
        lines = []
        for cap in CAPABILITIES:
            s = self.scores[cap]
            lines.append(f"{cap} {'n/a' if s is None else f'{s:.1f}'} (n={self.counts[cap]})")
        lines.append(f"All {'n/a' if self.overall is None else f'{self.overall:.1f}'} (n={self.total})")
        if self.failed:
            lines.append(f"failed {len(self.failed)}: {', '.join(self.failed)}")
        return "\n".join(lines)


def _mean100(values: list[float]) -> float | None:
    return 100.0 * math.fsum(values) / len(values) if values else None


def aggregate(results: Iterable[GradeResult], samples: Sequence[BenchSample]) -> BenchReport:
    """Per-capability and overall means.

    A sample tagged with several capabilities counts once under each tag and
    once in the overall column. Failed gradings are listed, not averaged.
    """
    by_id = {r.sample_id: r for r in results}
    missing = [s.sample_id for s in samples if s.sample_id not in by_id]
    if missing:
        raise BenchDataError(f"missing results for samples {missing}")
    per_cap: dict[str, list[float]] = {c: [] for c in CAPABILITIES}
    counts = {c: 0 for c in CAPABILITIES}
    everything, failed = [], []
    # sorted so the float sums do not depend on input order
    for s in sorted(samples, key=lambda s: s.sample_id):
        r = by_id[s.sample_id]
        for cap in s.capabilities:
            counts[cap] += 1
        if not r.ok:
            failed.append(s.sample_id)
            continue
        everything.append(r.score)
        for cap in s.capabilities:
            per_cap[cap].append(r.score)
    return BenchReport(
        scores={c: _mean100(v) for c, v in per_cap.items()},
        counts=counts,
        overall=_mean100(everything),
        total=len(samples),
        failed=failed,
    )


def grade_run_repeatability(
    samples: Sequence[BenchSample],
    predictions: Mapping[str, str],
    k: int,
    judge: Judge = "local",
    concurrency: int = 1,
) -> tuple[float, list[float]]:
    """Population variance of the overall score across ``k`` grading runs."""
    if k < 2:
        raise ValueError(f"repeatability needs at least 2 runs, got {k}")
    overalls = []
    for _ in range(k):
        report = aggregate(grade_samples(samples, predictions, judge, concurrency), samples)
        if report.overall is None:
            raise BenchDataError("a grading run produced no scored samples")
        overalls.append(report.overall)
    return statistics.pvariance(overalls), overalls


# -- files -----------------------------------------------------------------


def _read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise BenchDataError(f"{path}:{n}: {e}") from e
    return rows


def load_samples(path) -> list[BenchSample]:
    samples = []
    for d in _read_jsonl(path):
        try:
            samples.append(BenchSample.from_dict(d))
        except KeyError as e:
            raise BenchDataError(f"sample record missing field {e}") from e
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise BenchDataError("duplicate sample_id in samples file")
    return samples


def load_predictions(path) -> dict[str, str]:
    try:
        return {str(d["sample_id"]): str(d["prediction"]) for d in _read_jsonl(path)}
    except KeyError as e:
        raise BenchDataError(f"prediction record missing field {e}") from e


def save_results(results: Iterable[GradeResult], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(r.to_json() + "\n")


def load_results(path) -> list[GradeResult]:
    return [GradeResult.from_dict(d) for d in _read_jsonl(path)]
