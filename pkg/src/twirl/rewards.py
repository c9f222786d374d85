"""Trajectory rewards: the tool-use composite reward and the multi-task scientific reward."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ConfigError, DomainError, MissingScoreError, RoutingError
from .protocol import format_check

VARIANTS = ("final", "hacked")
N_MAX = 8

# weights of the revised reward and of the original (hackable) one
FINAL_WEIGHTS = {"acc": 0.5, "con": 0.3, "tool": 0.1, "bonus": 0.1}
HACKED_WEIGHTS = {"acc": 0.5, "con": 0.3, "tool": 0.2}


# --------------------------------------------------------------------------- answers

def extract_boxed(text: str) -> str | None:
    """Contents of the last ``\\boxed{...}``, honouring nested braces."""
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth, out = 1, []
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return "".join(out).strip()
        out.append(ch)
        i += 1
    return None


def _to_number(s: str) -> float | None:
    s = s.replace(",", "").replace(" ", "")
    try:
        return float(s)
    except ValueError:
        pass
    try:
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        return None


@dataclass(frozen=True)
class AnswerMatcher:
    """Normalized answer equality.

    Boxed content is extracted first; then whitespace, case, surrounding ``$``
    and a trailing period are dropped. If both sides parse as numbers they
    compare with a relative tolerance.
    """

    rel_tol: float = 1e-6

    def normalize(self, text: str) -> str:
        boxed = extract_boxed(text)
        s = boxed if boxed is not None else text
        s = s.strip().strip("$").strip()
        s = s.rstrip(".").strip()
        return re.sub(r"\s+", " ", s).lower()

    def __call__(self, predicted: str | None, gold: str) -> bool:
        if predicted is None or not predicted.strip():
            return False
        p, g = self.normalize(predicted), self.normalize(gold)
        if p == g:
            return True
        a, b = _to_number(p), _to_number(g)
        if a is not None and b is not None:
            return a == b or math.isclose(a, b, rel_tol=self.rel_tol, abs_tol=0.0)
        return False


DEFAULT_MATCHER = AnswerMatcher()


def answer_reward(predicted: str | None, gold: str, matcher: AnswerMatcher = DEFAULT_MATCHER) -> int:
    if not gold or not str(gold).strip():
        raise ValueError("gold answer must be nonempty")
    return int(matcher(predicted, str(gold)))


# --------------------------------------------------------------------------- components

def format_reward(raw_turns: Sequence[str]) -> int:
    return int(bool(raw_turns) and all(format_check(t) for t in raw_turns))


def tool_efficiency_reward(n: int, n_max: int = N_MAX, variant: str = "final") -> float:
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    if n_max < 2:
        raise DomainError("n_max must be >= 2")
    if n < 0 or n > n_max:
        raise DomainError(f"tool-call count {n} outside [0, {n_max}]")
    if n == 0:
        return 0.0 if variant == "final" else 1.0
    if n == 1:
        return 1.0
    return 0.5 * (1.0 + math.cos((n - 1) * math.pi / (n_max - 1)))


def tool_bonus(n: int) -> int:
    if n < 0:
        raise DomainError("tool-call count must be non-negative")
    return int(n >= 1)


def consistency(r_think: float, r_crop: float | None) -> float:
    return r_think if r_crop is None else 0.5 * (r_think + r_crop)


def _check_unit(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise DomainError(f"{name}={value} outside [0, 1]")


def composite_reward(
    r_fmt: int,
    r_acc: int,
    r_con: float,
    r_tool: float,
    r_bonus: int = 0,
    variant: str = "final",
    accuracy_gate: bool = True,
) -> float:
    """Combine component scores.

    Both variants return -1 when the format gate fails. The final variant
    also returns 0 for a wrong answer unless ``accuracy_gate`` is off.
    """
    if r_fmt not in (0, 1) or r_acc not in (0, 1) or r_bonus not in (0, 1):
        raise DomainError("r_fmt, r_acc and r_bonus must be 0 or 1")
    _check_unit("r_con", r_con)
    _check_unit("r_tool", r_tool)
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    if r_fmt == 0:
        return -1.0
    if variant == "hacked":
        w = HACKED_WEIGHTS
        return w["acc"] * r_acc + w["con"] * r_con + w["tool"] * r_tool
    if accuracy_gate and r_acc == 0:
        return 0.0
    w = FINAL_WEIGHTS
    return w["acc"] * r_acc + w["con"] * r_con + w["tool"] * r_tool + w["bonus"] * r_bonus


@dataclass
class RewardBreakdown:
    sample_id: str
    variant: str
    r_fmt: int
    r_acc: int
    r_think: float | None
    r_crop: float | None
    r_con: float | None
    r_tool: float
    r_bonus: int
    n: int
    total: float | None
    replicate: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        components = {k: v for k, v in asdict(self).items() if k.startswith("r_") or k == "n"}
        return {
            "sample_id": self.sample_id,
            "replicate": self.replicate,
            "variant": self.variant,
            "components": components,
            "total": self.total,
            "flags": list(self.flags),
        }


# --------------------------------------------------------------------------- trajectory scoring

@dataclass(frozen=True)
class ConsistencyScores:
    r_think: float | None
    r_crop: float | None
    r_con: float | None
    evidence: str = ""

    @property
    def missing(self) -> bool:
        return self.r_con is None


def consistency_reward(traj, judge) -> ConsistencyScores:
    """Think-answer entailment plus, when an image was injected, crop sufficiency.

    A trajectory with no final answer gets 0 without calling any judge. A
    judge that cannot produce a score leaves ``r_con`` as None.
    """
    final = traj.final_turn
    if traj.final_answer is None or final is None or final.parsed is None:
        return ConsistencyScores(0.0, None, 0.0, "no final answer")
    v_think = judge.judge_think_answer(final.parsed.think, traj.final_answer, sample_id=traj.sample_id)
    images = traj.injected_images
    v_crop = judge.judge_crop_correctness(traj.question, images[-1], sample_id=traj.sample_id) if images else None
    missing = [v.rationale for v in (v_think, v_crop) if v is not None and v.missing]
    r_think = v_think.score
    r_crop = v_crop.score if v_crop is not None else None
    if missing:
        return ConsistencyScores(r_think, r_crop, None, "; ".join(missing))
    return ConsistencyScores(r_think, r_crop, consistency(r_think, r_crop))


def score_trajectory(
    traj,
    judge,
    variant: str = "final",
    n_max: int = N_MAX,
    matcher: AnswerMatcher = DEFAULT_MATCHER,
    accuracy_gate: bool = True,
) -> RewardBreakdown:
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    r_fmt = format_reward(traj.assistant_raw)
    r_acc = answer_reward(traj.final_answer, traj.gold, matcher)
    n = min(traj.n, n_max)
    r_tool = tool_efficiency_reward(n, n_max, variant)
    r_bonus = tool_bonus(n)
    flags = []
    # skip the judges when a gate already decides the total
    gated = r_fmt == 0 or (variant == "final" and accuracy_gate and r_acc == 0)
    if gated:
        cons = ConsistencyScores(None, None, None, "not needed")
    else:
        cons = consistency_reward(traj, judge)
    total = None
    if gated:
        total = composite_reward(r_fmt, r_acc, 0.0, r_tool, r_bonus, variant, accuracy_gate)
    elif cons.missing:
        flags.append(f"judge_missing: {cons.evidence}")
    else:
        total = composite_reward(r_fmt, r_acc, cons.r_con, r_tool, r_bonus, variant, accuracy_gate)
    return RewardBreakdown(
        traj.sample_id, variant, r_fmt, r_acc, cons.r_think, cons.r_crop, cons.r_con,
        r_tool, r_bonus, traj.n, total, traj.replicate, flags,
    )


# --------------------------------------------------------------------------- scientific reward

Verifier = Callable[[object, str], float]


def final_answer_text(y: str) -> str:
    """The answer part of a response: text after ``</think>`` when present."""
    tail = y.rsplit("</think>", 1)[-1]
    return tail.strip()


def verify_boxed_exact(sample, y: str) -> float:
    boxed = extract_boxed(final_answer_text(y))
    return float(boxed is not None and DEFAULT_MATCHER(boxed, sample.gold))


_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(.*?)\s*$")


def _split_quantity(text: str) -> tuple[float, str] | None:
    m = _QUANTITY.match(text.replace("\\,", "").replace("~", " "))
    if not m:
        return None
    unit = re.sub(r"\\(?:mathrm|text)\{([^}]*)\}", r"\1", m.group(2))
    unit = unit.replace(" ", "").replace("\\", "").replace("{", "").replace("}", "")
    return float(m.group(1)), unit.lower()


def verify_numeric_units(sample, y: str, rel_tol: float = 1e-6) -> float:
    """Number within tolerance and the same unit string (e.g. ``9.8 m/s^2``)."""
    ans = extract_boxed(final_answer_text(y))
    pred = _split_quantity(ans) if ans is not None else None
    gold = _split_quantity(sample.gold)
    if pred is None or gold is None:
        return 0.0
    same_number = pred[0] == gold[0] or math.isclose(pred[0], gold[0], rel_tol=rel_tol)
    return float(same_number and pred[1] == gold[1])


_LETTER = re.compile(r"(?:^|[\s(\[{:])([A-Ea-e])(?:[)\]}.:,\s]|$)")


def _choice_letter(text: str) -> str | None:
    boxed = extract_boxed(text)
    found = _LETTER.findall(boxed if boxed is not None else text)
    return found[-1].upper() if found else None


def verify_mc_letter(sample, y: str) -> float:
    pred, gold = _choice_letter(final_answer_text(y)), _choice_letter(sample.gold)
    return float(pred is not None and pred == gold)


VERIFIERS: dict[str, Verifier] = {
    "boxed_exact": verify_boxed_exact,
    "numeric_units": verify_numeric_units,
    "mc_letter": verify_mc_letter,
}


@dataclass(frozen=True)
class TaskRewardConfig:
    task_type: str
    lambda_f: float
    lambda_r: float
    lambda_j: float
    rule_weights: tuple[float, ...] = ()
    rule_verifier_ids: tuple[str, ...] = ()
    judge_ids: tuple[str, ...] = ()
    require_boxed: bool = True

    def __post_init__(self):
        lams = (self.lambda_f, self.lambda_r, self.lambda_j)
        if any(x < 0 for x in lams) or not any(x > 0 for x in lams):
            raise ConfigError(f"{self.task_type}: lambdas must be non-negative with at least one positive")
        if len(self.rule_weights) != len(self.rule_verifier_ids):
            raise ConfigError(f"{self.task_type}: rule_weights and rule_verifier_ids differ in length")
        if self.lambda_j > 0 and not self.judge_ids:
            raise ConfigError(f"{self.task_type}: lambda_j > 0 needs at least one judge id")

    @classmethod
    def from_dict(cls, task_type: str, d: Mapping) -> "TaskRewardConfig":
        allowed = {"lambda_f", "lambda_r", "lambda_j", "rule_weights", "rule_verifier_ids", "judge_ids", "require_boxed"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"{task_type}: unknown reward keys {sorted(unknown)}")
        return cls(
            task_type,
            float(d.get("lambda_f", 0.0)),
            float(d.get("lambda_r", 0.0)),
            float(d.get("lambda_j", 0.0)),
            tuple(float(x) for x in d.get("rule_weights", ())),
            tuple(d.get("rule_verifier_ids", ())),
            tuple(d.get("judge_ids", ())),
            bool(d.get("require_boxed", True)),
        )


def _closed(task, verifiers=("boxed_exact",), weights=(1.0,)):
    return TaskRewardConfig(task, 0.1, 0.7, 0.2, weights, verifiers, ("reference",))


# Placeholder weights; production runs should pass an explicit table.
DEFAULT_TASK_TABLE: dict[str, TaskRewardConfig] = {
    "math": _closed("math"),
    "physics": _closed("physics", ("boxed_exact", "numeric_units"), (0.5, 0.5)),
    "chemistry": _closed("chemistry", ("boxed_exact", "numeric_units"), (0.5, 0.5)),
    "astronomy": _closed("astronomy", ("boxed_exact", "numeric_units"), (0.5, 0.5)),
    "geography": _closed("geography"),
    "biology": _closed("biology"),
    "multiple_choice": _closed("multiple_choice", ("mc_letter",)),
    "open_ended": TaskRewardConfig("open_ended", 0.1, 0.3, 0.6, (1.0,), ("boxed_exact",), ("reference",), False),
}


def load_task_table(data: Mapping[str, Mapping]) -> dict[str, TaskRewardConfig]:
    return {task: TaskRewardConfig.from_dict(task, spec) for task, spec in data.items()}


def scientific_format(y: str, require_boxed: bool = True) -> float:
    if not format_check(y):
        return 0.0
    return float(not require_boxed or extract_boxed(final_answer_text(y)) is not None)


def scientific_reward(
    sample,
    y: str,
    table: Mapping[str, TaskRewardConfig] = DEFAULT_TASK_TABLE,
    verifiers: Mapping[str, Verifier] = VERIFIERS,
    judges: Mapping[str, Callable[[object, str], float | None]] | None = None,
) -> float:
    """Task-conditioned sum of format, weighted rule checks and mean judge score."""
    cfg = table.get(sample.task_type)
    if cfg is None:
        raise RoutingError(f"no reward config for task type {sample.task_type!r}")
    judges = judges or {}
    total = cfg.lambda_f * scientific_format(y, cfg.require_boxed)
    if cfg.lambda_r:
        rule = 0.0
        for weight, vid in zip(cfg.rule_weights, cfg.rule_verifier_ids):
            if vid not in verifiers:
                raise ConfigError(f"unknown rule verifier {vid!r}")
            rule += weight * verifiers[vid](sample, y)
        total += cfg.lambda_r * rule
    if cfg.lambda_j:
        scores = []
        for jid in cfg.judge_ids:
            if jid not in judges:
                raise ConfigError(f"unknown judge {jid!r}")
            s = judges[jid](sample, y)
            if s is None:
                raise MissingScoreError(f"judge {jid!r} gave no score for {sample.sample_id!r}")
            scores.append(min(1.0, max(0.0, float(s))))
        total += cfg.lambda_j * sum(scores) / len(scores)
    return total


def reference_judge(sample, y: str) -> float:
    """Offline stand-in judge: 1.0 when the final answer matches gold."""
    return float(DEFAULT_MATCHER(final_answer_text(y), sample.gold))


def summarize(totals: Iterable[float | None]) -> dict:
    vals = [t for t in totals if t is not None]
    if not vals:
        return {"count": 0, "mean": None, "min": None, "max": None}
    return {"count": len(vals), "mean": sum(vals) / len(vals), "min": min(vals), "max": max(vals)}
