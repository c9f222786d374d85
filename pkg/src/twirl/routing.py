"""Adaptive routing, pass-rate stratification and loss-mask annotation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .errors import AnnotationError, DomainError
from .filters import FilterReport
from .protocol import REASONING_SYSTEM_PROMPT, Message, ParsedAssistantOutput, serialize_assistant_output
from .rewards import DEFAULT_MATCHER, AnswerMatcher, answer_reward
from .rollout import Trajectory, Turn

DECISIONS = ("keep_twi", "convert_reasoning", "drop")
BUCKETS = ("rl_hard", "sft_pool", "discard_all_fail")
MIN_RESIDUAL_CHARS = 20
HARD_THRESHOLD = 0.4


@dataclass
class RoutedSample:
    origin_id: str
    decision: str
    converted_trajectory: Trajectory | None = None
    reason: str = ""

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")
        if self.decision == "convert_reasoning" and self.converted_trajectory is None:
            raise ValueError("convert_reasoning needs a converted trajectory")


def strip_tool_turns(traj: Trajectory) -> Trajectory | None:
    """Text-only version of ``traj``: the think blocks spliced into the final turn.

    Returns None when the remaining reasoning is too short to be worth
    training on. A trajectory with no tool turns only has its system
    prompt swapped, so converting twice changes nothing.
    """
    if not traj.tool_turns:
        if traj.messages and traj.messages[0].role == "system" and traj.messages[0].text != REASONING_SYSTEM_PROMPT:
            return replace(traj, messages=[Message("system", REASONING_SYSTEM_PROMPT)] + traj.messages[1:], loss_mask=[])
        return traj
    final = traj.final_turn
    if traj.final_answer is None or final is None or final.parsed is None or final.is_tool_call:
        raise AnnotationError(f"{traj.sample_id}: cannot convert an unanswered trajectory")
    thinks = [t.parsed.think.strip() for t in traj.turns if t.parsed is not None and t.parsed.think.strip()]
    residual = "\n\n".join(thinks)
    if len(residual) < MIN_RESIDUAL_CHARS:
        return None
    parsed = ParsedAssistantOutput(residual, None, final.parsed.answer_text, True, True)
    raw = serialize_assistant_output(parsed)
    # the tool schema goes too: the result is a plain reasoning sample
    messages = [Message("system", REASONING_SYSTEM_PROMPT), traj.messages[1], Message("assistant", raw)]
    return Trajectory(
        sample_id=traj.sample_id,
        messages=messages,
        turns=[Turn(0, raw, parsed)],
        terminal="answered",
        n=0,
        final_answer=traj.final_answer,
        replicate=traj.replicate,
        question=traj.question,
        gold=traj.gold,
        task_type=traj.task_type,
        images=traj.images,
        extra=dict(traj.extra),
    )


def route_sample(traj: Trajectory, report: FilterReport) -> RoutedSample:
    if report.overall == "reject":
        raise DomainError(f"{traj.sample_id}: rejected samples cannot be routed")
    if report.overall == "keep":
        return RoutedSample(traj.sample_id, "keep_twi", traj)
    if report.overall != "route_candidate":
        raise DomainError(f"unknown filter outcome {report.overall!r}")
    converted = strip_tool_turns(traj)
    if converted is None:
        return RoutedSample(traj.sample_id, "drop", None, f"residual reasoning under {MIN_RESIDUAL_CHARS} chars")
    return RoutedSample(traj.sample_id, "convert_reasoning", converted)


@dataclass
class DifficultyBucket:
    sample_id: str
    k: int
    passes: int
    bucket: str
    threshold: float = HARD_THRESHOLD
    mode: str = "curriculum"

    @property
    def pass_rate(self) -> float:
        return self.passes / self.k

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "k": self.k,
            "passes": self.passes,
            "pass_rate": self.pass_rate,
            "bucket": self.bucket,
            "threshold": self.threshold,
            "mode": self.mode,
        }


@dataclass
class Stratified:
    bucket: DifficultyBucket
    correct: list[Trajectory] = field(default_factory=list)


def stratify(
    trajectories: Sequence[Trajectory],
    gold: str | None = None,
    matcher: AnswerMatcher = DEFAULT_MATCHER,
    hard_threshold: float = HARD_THRESHOLD,
    mode: str = "curriculum",
) -> Stratified:
    """Bucket one sample by the pass rate of its ``k`` rollouts.

    ``mode="all_fail"`` adds the rule that a sample nobody solved is
    discarded; otherwise pass_rate < hard_threshold marks it hard.
    """
    if mode not in ("curriculum", "all_fail"):
        raise DomainError(f"unknown stratify mode {mode!r}")
    if not trajectories:
        raise DomainError("stratify needs at least one trajectory")
    ids = {t.sample_id for t in trajectories}
    if len(ids) != 1:
        raise DomainError(f"trajectories span several samples: {sorted(ids)}")
    sample_id = trajectories[0].sample_id
    correct = [t for t in trajectories if answer_reward(t.final_answer, gold if gold is not None else t.gold, matcher)]
    k, passes = len(trajectories), len(correct)
    if mode == "all_fail" and passes == 0:
        bucket = "discard_all_fail"
    elif passes / k < hard_threshold:
        bucket = "rl_hard"
    else:
        bucket = "sft_pool"
    return Stratified(DifficultyBucket(sample_id, k, passes, bucket, hard_threshold, mode), correct)


def annotate_loss_mask(traj: Trajectory) -> Trajectory:
    """Mask over ``traj.messages``: 1 on the last tool-call turn and the final answer turn."""
    final = traj.final_turn
    if traj.terminal != "answered" or final is None or final.is_tool_call or traj.final_answer is None:
        raise AnnotationError(f"{traj.sample_id}: loss mask needs an answered trajectory")
    tool_positions = [i for i, t in enumerate(traj.turns) if t.is_tool_call]
    keep = {len(traj.turns) - 1}
    if tool_positions:
        keep.add(tool_positions[-1])
    assistant_idx = [i for i, m in enumerate(traj.messages) if m.role == "assistant"]
    if len(assistant_idx) != len(traj.turns):
        raise AnnotationError(f"{traj.sample_id}: {len(assistant_idx)} assistant messages for {len(traj.turns)} turns")
    mask = [0] * len(traj.messages)
    for turn_pos in keep:
        mask[assistant_idx[turn_pos]] = 1
    traj.loss_mask = mask
    return traj


def assistant_mask(traj: Trajectory) -> list[int]:
    """The loss mask restricted to assistant messages, one bit per turn."""
    return [bit for bit, m in zip(traj.loss_mask, traj.messages) if m.role == "assistant"]


def group_by_sample(trajectories: Iterable[Trajectory]) -> dict[str, list[Trajectory]]:
    groups: dict[str, list[Trajectory]] = {}
    for t in trajectories:
        groups.setdefault(t.sample_id, []).append(t)
    return groups
