"""Quality filters for pure-reasoning and tool-use (image) trajectories."""

from __future__ import annotations

import ast
import re
from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .backends.embed import cosine
from .errors import BackendError, ConfigError
from .protocol import format_check
from .sandbox.images import ImageThresholds, validate_image

PASS, FAIL, SKIPPED = "pass", "fail", "skipped"

REASONING_DIMS = (
    "wait_tokens",
    "phrase_repetition",
    "multiline_anomaly",
    "numeric_repetition",
    "think_format",
    "semantic_redundancy",
)
TWI_DIMS = (
    "format",
    "reasoning_answer_consistency",
    "image_validity",
    "image_text_alignment",
    "key_information",
    "redundancy",
)
ALL_DIMS = REASONING_DIMS + TWI_DIMS
# failures here route the sample instead of rejecting it
SOFT_DIMS = frozenset({"image_text_alignment", "key_information"})
# a failure here stops the remaining dimensions
SHORT_CIRCUIT = frozenset({"format", "image_validity"})

DEFAULT_FILLERS = ("wait", "hmm", "hmmm", "let me think", "let me see", "uh", "um")


@dataclass(frozen=True)
class Verdict:
    status: str
    evidence: str = ""

    @property
    def failed(self) -> bool:
        return self.status == FAIL

    def to_dict(self) -> dict:
        return {"status": self.status, "evidence": self.evidence}


@dataclass(frozen=True)
class FilterThresholds:
    wait_token_max: int = 8
    wait_window_chars: int = 200
    wait_window_count: int = 3
    ngram_len: int = 4
    ngram_repeat_max: int = 10
    blankline_run_max: int = 20
    short_line_words: int = 4
    empty_line_run_max: int = 5
    numeric_run_max: int = 6
    numeric_block_min: int = 3
    similarity_max: float = 0.95
    redundancy_iou_max: float = 0.9
    perceptual_sim_max: float = 0.98
    judge_pass_min: float = 0.5
    fillers: tuple[str, ...] = DEFAULT_FILLERS

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0 and f.name != "judge_pass_min":
                raise ConfigError(f"{f.name} must be positive")
        for name in ("similarity_max", "redundancy_iou_max", "perceptual_sim_max", "judge_pass_min"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.numeric_block_min < 1 or self.ngram_len < 1:
            raise ConfigError("block and n-gram lengths must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FilterThresholds":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown filter thresholds {sorted(unknown)}")
        d = dict(d)
        if "fillers" in d:
            d["fillers"] = tuple(d["fillers"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fillers"] = list(self.fillers)
        return d


@dataclass
class FilterReport:
    sample_id: str
    verdicts: dict[str, Verdict]
    overall: str
    replicate: int = 0
    mode: str = "twi"

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "replicate": self.replicate,
            "mode": self.mode,
            "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()},
            "overall": self.overall,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterReport":
        verdicts = {k: Verdict(v["status"], v.get("evidence", "")) for k, v in d["verdicts"].items()}
        return cls(d["sample_id"], verdicts, d["overall"], int(d.get("replicate", 0)), d.get("mode", "twi"))


def aggregate(verdicts: Mapping[str, Verdict]) -> str:
    failed = [d for d, v in verdicts.items() if v.failed]
    if any(d not in SOFT_DIMS for d in failed):
        return "reject"
    return "route_candidate" if failed else "keep"


def _ok(evidence: str = "") -> Verdict:
    return Verdict(PASS, evidence)


# --------------------------------------------------------------------------- text checks

def detect_wait_tokens(text: str, th: FilterThresholds = FilterThresholds()) -> Verdict:
    if not th.fillers:
        return _ok("empty lexicon")
    alts = "|".join(re.escape(f).replace(r"\ ", r"\s+") for f in sorted(th.fillers, key=len, reverse=True))
    hits = [(m.start(), m.end()) for m in re.finditer(rf"\b(?:{alts})\b", text, re.IGNORECASE)]
    if len(hits) > th.wait_token_max:
        return Verdict(FAIL, f"{len(hits)} filler tokens > {th.wait_token_max}")
    k = th.wait_window_count
    for i in range(len(hits) - k + 1):
        if hits[i + k - 1][1] - hits[i][0] <= th.wait_window_chars:
            return Verdict(FAIL, f"{k} filler tokens within {th.wait_window_chars} chars at offset {hits[i][0]}")
    return _ok(f"{len(hits)} filler tokens")


_QUOTED = re.compile(r'"[^"\n]*"|“[^”\n]*”')


def detect_phrase_repetition(text: str, th: FilterThresholds = FilterThresholds(), problem: str = "") -> Verdict:
    """Word n-gram counts, ignoring quoted spans and verbatim copies of the problem."""
    if problem.strip():
        text = text.replace(problem, " ")
    words = re.findall(r"\w+", _QUOTED.sub(" ", text).lower())
    n = th.ngram_len
    if len(words) < n:
        return _ok("too short")
    counts = Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))
    gram, count = counts.most_common(1)[0]
    if count > th.ngram_repeat_max:
        return Verdict(FAIL, f"{' '.join(gram)!r} occurs {count} times > {th.ngram_repeat_max}")
    return _ok(f"max n-gram count {count}")


def detect_multiline_anomaly(text: str, th: FilterThresholds = FilterThresholds()) -> Verdict:
    short_run = empty_run = 0
    worst_short = worst_empty = 0
    for line in text.split("\n"):
        words = len(line.split())
        short_run = short_run + 1 if words < th.short_line_words else 0
        empty_run = empty_run + 1 if not line.strip() else 0
        worst_short = max(worst_short, short_run)
        worst_empty = max(worst_empty, empty_run)
    if worst_short > th.blankline_run_max:
        return Verdict(FAIL, f"{worst_short} consecutive short lines > {th.blankline_run_max}")
    if worst_empty > th.empty_line_run_max:
        return Verdict(FAIL, f"{worst_empty} consecutive empty lines > {th.empty_line_run_max}")
    return _ok(f"longest short-line run {worst_short}")


_NUMBER = re.compile(r"\d+(?:\.\d+)?")


def detect_numeric_repetition(text: str, th: FilterThresholds = FilterThresholds(), max_block: int = 64) -> Verdict:
    """A block of >= numeric_block_min numbers repeated back to back more than numeric_run_max times."""
    nums = _NUMBER.findall(text)
    need = th.numeric_run_max  # repeats beyond the first occurrence, times block length
    for size in range(th.numeric_block_min, min(max_block, len(nums) // 2) + 1):
        run = 0
        for j in range(len(nums) - size):
            run = run + 1 if nums[j] == nums[j + size] else 0
            # run >= size*need means the block occurs need+1 times in a row
            if run >= size * need:
                start = j - run + 1
                block = " ".join(nums[start : start + size])
                return Verdict(FAIL, f"block [{block}] repeats more than {th.numeric_run_max} times")
    return _ok(f"{len(nums)} numbers")


def split_steps(text: str) -> list[str]:
    """Reasoning steps are paragraphs separated by blank lines."""
    return [p.strip() for p in re.split(r"\n\s*\n", text) if p.strip()]


def semantic_redundancy(steps: Sequence[str], embedder, th: FilterThresholds = FilterThresholds()) -> Verdict:
    if embedder is None:
        return Verdict(SKIPPED, "no embedder")
    if len(steps) < 3:
        return _ok("fewer than 3 steps")
    try:
        vecs = embedder.embed(list(steps))
    except BackendError as exc:
        return Verdict(SKIPPED, f"embedder failed: {exc}")
    worst, where = -1.0, None
    for i in range(len(vecs)):
        for j in range(i + 2, len(vecs)):
            sim = cosine(vecs[i], vecs[j])
            if sim > worst:
                worst, where = sim, (i, j)
    if worst > th.similarity_max:
        return Verdict(FAIL, f"steps {where[0]} and {where[1]} cosine {worst:.4f} > {th.similarity_max}")
    return _ok(f"max non-adjacent cosine {worst:.4f}")


# --------------------------------------------------------------------------- trajectory helpers

def _think(turn) -> str:
    return turn.parsed.think if turn.parsed is not None else ""


def reasoning_text(traj) -> str:
    """All assistant output with tags removed: think blocks and the final answer."""
    parts = []
    for t in traj.turns:
        if t.parsed is None:
            parts.append(t.raw)
            continue
        if t.parsed.think:
            parts.append(t.parsed.think)
        if t.parsed.answer_text:
            parts.append(t.parsed.answer_text)
    return "\n\n".join(parts)


def check_think_format(traj) -> Verdict:
    for t in traj.turns:
        if not format_check(t.raw):
            return Verdict(FAIL, f"turn {t.index} breaks the output format")
    if not traj.turns:
        return Verdict(FAIL, "no assistant turns")
    if traj.terminal != "answered" or traj.final_answer is None:
        return Verdict(FAIL, f"trajectory ends without an answer ({traj.terminal})")
    return _ok()


def reasoning_filter_pipeline(traj, embedder=None, th: FilterThresholds = FilterThresholds()) -> FilterReport:
    text = reasoning_text(traj)
    verdicts = {
        "wait_tokens": detect_wait_tokens(text, th),
        "phrase_repetition": detect_phrase_repetition(text, th, traj.question),
        "multiline_anomaly": detect_multiline_anomaly(text, th),
        "numeric_repetition": detect_numeric_repetition(text, th),
        "think_format": check_think_format(traj),
        "semantic_redundancy": semantic_redundancy(split_steps("\n\n".join(_think(t) for t in traj.turns)), embedder, th),
    }
    return FilterReport(traj.sample_id, verdicts, aggregate(verdicts), traj.replicate, "reasoning")


# --------------------------------------------------------------------------- image checks

_RECT = re.compile(r"[\(\[]\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*[\)\]]")


def extract_rectangles(code: str) -> list[tuple[int, int, int, int]]:
    """Integer 4-tuples in code that look like (left, top, right, bottom) boxes."""
    rects = []
    for m in _RECT.finditer(code):
        x1, y1, x2, y2 = map(int, m.groups())
        if x2 > x1 and y2 > y1:
            rects.append((x1, y1, x2, y2))
    return rects


def iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _thumb(path, size: int = 32) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L").resize((size, size), Image.BILINEAR), dtype=np.float64).ravel()


def perceptual_similarity(path_a, path_b) -> float:
    """Pearson correlation of 32x32 grayscale thumbnails; flat images compare by mean."""
    a, b = _thumb(path_a), _thumb(path_b)
    sa, sb = a.std(), b.std()
    if sa < 1e-9 or sb < 1e-9:
        return 1.0 if abs(a.mean() - b.mean()) < 1.0 and sa < 1e-9 and sb < 1e-9 else 0.0
    return float(np.corrcoef(a, b)[0, 1])


def check_twi_format(traj) -> Verdict:
    base = check_think_format(traj)
    if base.failed:
        return base
    for t in traj.tool_turns:
        try:
            ast.parse(t.parsed.tool_call.code)
        except SyntaxError as exc:
            return Verdict(FAIL, f"turn {t.index} code does not parse: {exc.msg} (line {exc.lineno})")
    return _ok()


def check_image_validity(traj, image_th: ImageThresholds = ImageThresholds()) -> Verdict:
    seen = set()
    checked = 0
    for t in traj.turns:
        paths = [r.path for r in t.injected_images]
        if t.execution is not None:
            paths += [a.path for a in t.execution.artifacts]
        for p in paths:
            if p in seen:
                continue
            seen.add(p)
            v = validate_image(p, image_th)
            checked += 1
            if not v.valid:
                return Verdict(FAIL, f"turn {t.index}: {p} is {v.reason}")
    return _ok(f"{checked} images valid")


def _missing_or(verdict, th: FilterThresholds, label: str) -> Verdict:
    if verdict.missing:
        return Verdict(SKIPPED, f"{label}: judge gave no score ({verdict.rationale})")
    if verdict.score < th.judge_pass_min:
        return Verdict(FAIL, f"{label}: score {verdict.score:.2f} < {th.judge_pass_min}")
    return _ok(f"{label}: score {verdict.score:.2f}")


def check_consistency(traj, judge, th: FilterThresholds) -> Verdict:
    if judge is None:
        return Verdict(SKIPPED, "judges off")
    reasoning = "\n\n".join(_think(t) for t in traj.turns if _think(t))
    v = judge.judge_reasoning_answer(traj.question, reasoning, traj.final_answer or "", sample_id=traj.sample_id)
    return _missing_or(v, th, "reasoning-answer")


def check_alignment(traj, judge, th: FilterThresholds) -> Verdict:
    if judge is None:
        return Verdict(SKIPPED, "judges off")
    turns = traj.turns
    judged = 0
    for pos, t in enumerate(turns):
        for ref in t.injected_images:
            nxt = _think(turns[pos + 1]) if pos + 1 < len(turns) else ""
            reasoning = "\n\n".join(x for x in (_think(t), nxt) if x)
            v = _missing_or(judge.judge_alignment(reasoning, ref, sample_id=traj.sample_id), th, f"turn {t.index}")
            if v.status != PASS:
                return v
            judged += 1
    return _ok(f"{judged} images aligned")


def check_key_information(traj, judge, th: FilterThresholds) -> Verdict:
    if judge is None:
        return Verdict(SKIPPED, "judges off")
    images = traj.injected_images
    if not images:
        return Verdict(FAIL, "no intermediate image reaches the final turn")
    return _missing_or(judge.judge_key_information(traj.question, images[-1], sample_id=traj.sample_id), th, "final image")


def check_redundancy(traj, th: FilterThresholds) -> Verdict:
    per_turn = [(t.index, extract_rectangles(t.parsed.tool_call.code), t.injected_images) for t in traj.tool_turns]
    for i in range(len(per_turn)):
        for j in range(i + 1, len(per_turn)):
            (ti, rects_i, imgs_i), (tj, rects_j, imgs_j) = per_turn[i], per_turn[j]
            for a in rects_i:
                for b in rects_j:
                    v = iou(a, b)
                    if v > th.redundancy_iou_max:
                        return Verdict(FAIL, f"turns {ti} and {tj} crop {a} and {b}, IoU {v:.3f}")
            for ra in imgs_i:
                for rb in imgs_j:
                    s = perceptual_similarity(ra.path, rb.path)
                    if s > th.perceptual_sim_max:
                        return Verdict(FAIL, f"turns {ti} and {tj} images similarity {s:.4f}")
    return _ok(f"{len(per_turn)} tool turns distinct")


def twi_filter_pipeline(
    traj,
    judge=None,
    th: FilterThresholds = FilterThresholds(),
    image_th: ImageThresholds = ImageThresholds(),
) -> FilterReport:
    """Six dimensions in fixed order; ``judge=None`` skips the judge-backed ones."""
    checks = (
        ("format", lambda: check_twi_format(traj)),
        ("reasoning_answer_consistency", lambda: check_consistency(traj, judge, th)),
        ("image_validity", lambda: check_image_validity(traj, image_th)),
        ("image_text_alignment", lambda: check_alignment(traj, judge, th)),
        ("key_information", lambda: check_key_information(traj, judge, th)),
        ("redundancy", lambda: check_redundancy(traj, th)),
    )
    verdicts: dict[str, Verdict] = {}
    stopped = None
    for dim, run in checks:
        if stopped:
            verdicts[dim] = Verdict(SKIPPED, f"stopped after {stopped} failure")
            continue
        verdicts[dim] = run()
        if verdicts[dim].failed and dim in SHORT_CIRCUIT:
            stopped = dim
    return FilterReport(traj.sample_id, verdicts, aggregate(verdicts), traj.replicate, "twi")


def summary_rows(reports: Sequence[FilterReport]) -> list[tuple]:
    """(dimension, fail, pass, skipped) for each dimension seen, plus overall counts."""
    dims = [d for d in ALL_DIMS if any(d in r.verdicts for r in reports)]
    rows = []
    for d in dims:
        c = Counter(r.verdicts[d].status for r in reports if d in r.verdicts)
        rows.append((d, c[FAIL], c[PASS], c[SKIPPED]))
    overall = Counter(r.overall for r in reports)
    for key in ("keep", "route_candidate", "reject"):
        rows.append((f"overall:{key}", overall[key], "", ""))
    return rows


def summary_tsv(reports: Sequence[FilterReport]) -> str:
    lines = ["dimension\tfail\tpass\tskipped"]
    lines += ["\t".join(str(x) for x in row) for row in summary_rows(reports)]
    return "\n".join(lines) + "\n"


__all__ = [
    "ALL_DIMS", "FAIL", "FilterReport", "FilterThresholds", "PASS", "REASONING_DIMS", "SKIPPED", "TWI_DIMS",
    "Verdict", "aggregate", "check_think_format", "detect_multiline_anomaly", "detect_numeric_repetition",
    "detect_phrase_repetition", "detect_wait_tokens", "extract_rectangles", "iou", "perceptual_similarity",
    "reasoning_filter_pipeline", "semantic_redundancy", "split_steps", "summary_tsv", "twi_filter_pipeline",
]
