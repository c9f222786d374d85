"""Model-as-judge scoring: prompt templates, score parsing and judge pools."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from itertools import cycle
from pathlib import Path
from typing import Iterable, Mapping

from PIL import Image

from ..errors import BackendError
from ..protocol import ImageRef, Message
from .chat import ChatClient, ChatRequest

log = logging.getLogger(__name__)

KINDS = ("think_answer", "crop_correctness", "reasoning_answer", "image_text_alignment", "key_information")
_SCORE = re.compile(r"score\s*[:=]\s*(-?\d+(?:\.\d*)?|-?\.\d+)", re.IGNORECASE)


@dataclass(frozen=True)
class JudgeVerdict:
    score: float | None
    rationale: str = ""
    judge_id: str = ""

    @property
    def missing(self) -> bool:
        return self.score is None


def parse_score(text: str) -> float | None:
    """Last ``SCORE: x`` in ``text`` clamped to [0, 1]; None if there is none."""
    found = _SCORE.findall(text or "")
    if not found:
        return None
    value = float(found[-1])
    if not 0.0 <= value <= 1.0:
        log.warning("judge score %s outside [0, 1]; clamping", value)
        value = min(1.0, max(0.0, value))
    return value


def load_template(kind: str) -> str:
    return resources.files("twirl.backends").joinpath("templates", f"{kind}.txt").read_text(encoding="utf-8")


def _readable(path: str) -> str | None:
    try:
        with Image.open(path) as im:
            im.verify()
        return None
    except Exception as exc:
        return f"unreadable image {path}: {type(exc).__name__}"


class Judge:
    """Base judge. Subclasses implement :meth:`score`."""

    judge_id = "judge"

    def score(self, kind: str, fields: dict, images: tuple[ImageRef, ...] = (), sample_id: str | None = None) -> JudgeVerdict:
        raise NotImplementedError

    def _with_images(self, kind, fields, images, sample_id) -> JudgeVerdict:
        for ref in images:
            problem = _readable(ref.path)
            if problem:
                return JudgeVerdict(None, problem, self.judge_id)
        return self.score(kind, fields, tuple(images), sample_id)

    def judge_think_answer(self, think: str, answer: str, *, sample_id=None) -> JudgeVerdict:
        return self.score("think_answer", {"think": think, "answer": answer}, (), sample_id)

    def judge_crop_correctness(self, question: str, last_image: ImageRef, *, sample_id=None) -> JudgeVerdict:
        return self._with_images("crop_correctness", {"question": question}, (last_image,), sample_id)

    def judge_reasoning_answer(self, question: str, reasoning: str, answer: str, *, sample_id=None) -> JudgeVerdict:
        fields = {"question": question, "reasoning": reasoning, "answer": answer}
        return self.score("reasoning_answer", fields, (), sample_id)

    def judge_alignment(self, reasoning: str, image: ImageRef, *, sample_id=None) -> JudgeVerdict:
        return self._with_images("image_text_alignment", {"reasoning": reasoning}, (image,), sample_id)

    def judge_key_information(self, question: str, image: ImageRef, *, sample_id=None) -> JudgeVerdict:
        return self._with_images("key_information", {"question": question}, (image,), sample_id)


class LLMJudge(Judge):
    """Judge backed by a chat endpoint; re-asks once when no score line comes back."""

    def __init__(self, client: ChatClient, model: str, judge_id: str | None = None, templates: Mapping[str, str] | None = None):
        self.client = client
        self.model = model
        self.judge_id = judge_id or model
        self.templates = dict(templates or {})

    def _template(self, kind: str) -> str:
        if kind not in self.templates:
            self.templates[kind] = load_template(kind)
        return self.templates[kind]

    def score(self, kind, fields, images=(), sample_id=None) -> JudgeVerdict:
        prompt = self._template(kind).format(**fields)
        messages = [Message("user", prompt, tuple(images))]
        text = ""
        for attempt in range(2):
            try:
                text = self.client.chat(ChatRequest(self.model, messages, {"temperature": 0.0})).text
            except BackendError as exc:
                return JudgeVerdict(None, f"judge call failed: {exc}", self.judge_id)
            value = parse_score(text)
            if value is not None:
                return JudgeVerdict(value, text.strip(), self.judge_id)
            messages = messages + [
                Message("assistant", text),
                Message("user", "Your reply had no score line. End with a line of the form SCORE: x.xx"),
            ]
        return JudgeVerdict(None, f"unparseable judge output: {text[:200]!r}", self.judge_id)


class ScriptedJudge(Judge):
    """Deterministic judge for tests.

    ``scripts`` maps a judge kind to a float, raw reply text (parsed like a
    real response), a list of either (consumed in order, cycling), or a
    callable ``(fields) -> float | str``. Kinds not listed score ``default``.
    """

    def __init__(self, scripts: Mapping[str, object] | None = None, default: float | str | None = 1.0, judge_id: str = "scripted"):
        self.judge_id = judge_id
        self.default = default
        self._scripts = {}
        for kind, value in (scripts or {}).items():
            self._scripts[kind] = cycle(value) if isinstance(value, (list, tuple)) else value
        self.calls: list[tuple[str, dict]] = []

    def score(self, kind, fields, images=(), sample_id=None) -> JudgeVerdict:
        self.calls.append((kind, dict(fields)))
        verdict = None
        for _ in range(2):  # an unparseable reply earns one re-ask
            value = self._scripts.get(kind, self.default)
            if isinstance(value, cycle):
                value = next(value)
            if callable(value):
                value = value(fields)
            verdict = _to_verdict(value, self.judge_id)
            if not (verdict.missing and isinstance(value, str)):
                break
        return verdict


def _to_verdict(value, judge_id: str) -> JudgeVerdict:
    if value is None:
        return JudgeVerdict(None, "no scripted score", judge_id)
    if isinstance(value, str):
        parsed = parse_score(value)
        return JudgeVerdict(parsed, value if parsed is not None else f"unparseable judge output: {value!r}", judge_id)
    return JudgeVerdict(min(1.0, max(0.0, float(value))), "scripted", judge_id)


class ReplayJudge(Judge):
    """Scores looked up by ``(kind, sample_id)`` from a JSONL script.

    Rows look like ``{"sample_id": ..., "kind": ..., "score": 0.0}``;
    anything not listed scores ``default``.
    """

    def __init__(self, table: Mapping[tuple[str, str], float], default: float | None = 1.0, judge_id: str = "replay"):
        self.table = dict(table)
        self.default = default
        self.judge_id = judge_id

    @classmethod
    def from_jsonl(cls, path, default: float | None = 1.0) -> "ReplayJudge":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    table[(row["kind"], row["sample_id"])] = row["score"]
        return cls(table, default, judge_id=f"replay:{Path(path).name}")

    def score(self, kind, fields, images=(), sample_id=None) -> JudgeVerdict:
        return _to_verdict(self.table.get((kind, sample_id), self.default), self.judge_id)


class JudgePool(Judge):
    """Averages the non-missing verdicts of several judges (expectation over the pool)."""

    def __init__(self, judges: Iterable[Judge], judge_id: str = "pool"):
        self.judges = list(judges)
        if not self.judges:
            raise ValueError("judge pool is empty")
        self.judge_id = judge_id

    def score(self, kind, fields, images=(), sample_id=None) -> JudgeVerdict:
        verdicts = [j.score(kind, fields, images, sample_id) for j in self.judges]
        scores = [v.score for v in verdicts if not v.missing]
        if not scores:
            return JudgeVerdict(None, "; ".join(v.rationale for v in verdicts), self.judge_id)
        return JudgeVerdict(sum(scores) / len(scores), f"mean of {len(scores)} judges", self.judge_id)

