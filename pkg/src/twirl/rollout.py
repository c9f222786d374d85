"""Multi-turn episodes: model call, parse, execute, inject, repeat."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from PIL import Image

from .backends.policy import ModelBackend
from .corpus import ArtifactStore, read_jsonl, relativize, resolve, write_jsonl
from .errors import BackendError, ConfigError, ParseError, SessionError
from .protocol import (
    DEFAULT_EXEC_TIMEOUT,
    DEFAULT_TOOLS,
    ImageRef,
    Message,
    ParsedAssistantOutput,
    ToolSpec,
    inject_tool_response,
    nudge_message,
    parse_assistant_output,
    render_system_prompt,
    render_user_turn,
)
from .sandbox import ExecutionResult, SandboxManager

log = logging.getLogger(__name__)

MAX_TURNS = 8
TERMINALS = ("answered", "max_turns", "aborted")
FINAL_TURN_NOTE = "Tool call limit reached. Give your final answer now without calling any tool."


@dataclass(frozen=True)
class Sample:
    sample_id: str
    question: str
    images: tuple[ImageRef, ...] = ()
    gold: str = ""
    task_type: str = "math"

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "Sample":
        images = []
        for item in d.get("images", ()):
            if isinstance(item, str):
                item = {"path": item}
            path = resolve(item["path"], base_dir)
            if "width" in item and "height" in item:
                images.append(ImageRef(path, int(item["width"]), int(item["height"])))
            else:
                with Image.open(path) as im:
                    images.append(ImageRef(path, *im.size))
        return cls(str(d["sample_id"]), d["question"], tuple(images), str(d.get("gold", "")), d.get("task_type", "math"))

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "question": self.question,
            "images": [r.to_dict() for r in self.images],
            "gold": self.gold,
            "task_type": self.task_type,
        }


@dataclass(frozen=True)
class Turn:
    """One assistant turn and what it caused.

    ``execution`` is set exactly when the turn's tool call was run. The only
    unexecuted tool call is the last turn of a ``max_turns`` trajectory.
    """

    index: int
    raw: str
    parsed: ParsedAssistantOutput | None = None
    error: str | None = None
    execution: ExecutionResult | None = None
    injected_images: tuple[ImageRef, ...] = ()

    @property
    def is_tool_call(self) -> bool:
        return self.parsed is not None and self.parsed.tool_call is not None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "raw": self.raw,
            "parsed": self.parsed.to_dict() if self.parsed else None,
            "error": self.error,
            "execution": self.execution.to_dict() if self.execution else None,
            "injected_images": [r.to_dict() for r in self.injected_images],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Turn":
        return cls(
            index=int(d["index"]),
            raw=d["raw"],
            parsed=ParsedAssistantOutput.from_dict(d["parsed"]) if d.get("parsed") else None,
            error=d.get("error"),
            execution=ExecutionResult.from_dict(d["execution"]) if d.get("execution") else None,
            injected_images=tuple(ImageRef.from_dict(r) for r in d.get("injected_images", ())),
        )


_CORE_KEYS = {
    "sample_id", "replicate", "question", "gold", "task_type", "images", "messages",
    "turns", "terminal", "n", "final_answer", "loss_mask", "error",
}


@dataclass
class Trajectory:
    sample_id: str
    messages: list[Message]
    turns: list[Turn]
    terminal: str
    n: int = 0
    final_answer: str | None = None
    loss_mask: list[int] = field(default_factory=list)
    replicate: int = 0
    question: str = ""
    gold: str = ""
    task_type: str = ""
    images: tuple[ImageRef, ...] = ()
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def assistant_raw(self) -> list[str]:
        return [t.raw for t in self.turns]

    @property
    def tool_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.is_tool_call]

    @property
    def injected_images(self) -> list[ImageRef]:
        return [ref for t in self.turns for ref in t.injected_images]

    @property
    def final_turn(self) -> Turn | None:
        return self.turns[-1] if self.turns else None

    @property
    def sample(self) -> Sample:
        return Sample(self.sample_id, self.question, self.images, self.gold, self.task_type)

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "replicate": self.replicate,
            "task_type": self.task_type,
            "question": self.question,
            "gold": self.gold,
            "images": [r.to_dict() for r in self.images],
            "messages": [m.to_dict() for m in self.messages],
            "turns": [t.to_dict() for t in self.turns],
            "terminal": self.terminal,
            "n": self.n,
            "final_answer": self.final_answer,
            "loss_mask": list(self.loss_mask),
            "error": self.error,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            sample_id=str(d["sample_id"]),
            messages=[Message.from_dict(m) for m in d["messages"]],
            turns=[Turn.from_dict(t) for t in d.get("turns", ())],
            terminal=d["terminal"],
            n=int(d.get("n", 0)),
            final_answer=d.get("final_answer"),
            loss_mask=list(d.get("loss_mask", ())),
            replicate=int(d.get("replicate", 0)),
            question=d.get("question", ""),
            gold=str(d.get("gold", "")),
            task_type=d.get("task_type", ""),
            images=tuple(ImageRef.from_dict(r) for r in d.get("images", ())),
            error=d.get("error"),
            extra={k: v for k, v in d.items() if k not in _CORE_KEYS},
        )

    def map_paths(self, fn: Callable[[str], str]) -> "Trajectory":
        """Copy with every stored file path passed through ``fn``; message text is left verbatim."""
        d = self.to_dict()
        for ref in d["images"]:
            ref["path"] = fn(ref["path"])
        for m in d["messages"]:
            for ref in m["image_refs"]:
                ref["path"] = fn(ref["path"])
        for t in d["turns"]:
            for ref in t["injected_images"]:
                ref["path"] = fn(ref["path"])
            if t["execution"]:
                for art in t["execution"]["artifacts"]:
                    art["path"] = fn(art["path"])
        return Trajectory.from_dict(d)

    def referenced_paths(self) -> list[str]:
        paths = [r.path for r in self.images]
        paths += [r.path for m in self.messages for r in m.image_refs]
        for t in self.turns:
            paths += [r.path for r in t.injected_images]
            if t.execution:
                paths += [a.path for a in t.execution.artifacts]
        return paths


@dataclass
class RolloutConfig:
    max_turns: int = MAX_TURNS
    exec_timeout: float = DEFAULT_EXEC_TIMEOUT
    on_parse_error: str = "nudge"  # nudge | abort
    max_nudges: int = 2
    tools: Sequence[ToolSpec] = DEFAULT_TOOLS
    record_wall_time: bool = True  # off for byte-identical replays

    def __post_init__(self):
        if self.max_turns < 1:
            raise ConfigError("max_turns must be >= 1")
        if self.on_parse_error not in ("nudge", "abort"):
            raise ConfigError(f"on_parse_error must be nudge or abort, not {self.on_parse_error!r}")
        if self.exec_timeout <= 0:
            raise ConfigError("exec_timeout must be positive")


def run_episode(
    sample: Sample,
    backend: ModelBackend,
    sandbox: SandboxManager,
    config: RolloutConfig | None = None,
    replicate: int = 0,
    store: ArtifactStore | None = None,
) -> Trajectory:
    """Run one episode to an answer, the turn cap, or an abort.

    After the ``max_turns``-th execution the model gets one more turn to
    answer; a tool call there ends the episode as ``max_turns`` without
    being executed. With a ``store``, every image the sandbox produced is
    copied out before the session is torn down and the trajectory's image
    references point at the copies.
    """
    config = config or RolloutConfig()
    tool_names = tuple(t.name for t in config.tools)
    messages = [Message("system", render_system_prompt(config.tools)), render_user_turn(sample.question, sample.images)]
    turns: list[Turn] = []
    n = nudges = 0
    terminal, final_answer, error = "aborted", None, None
    path_map: dict[str, str] = {}
    handle = None
    try:
        handle = sandbox.open_session(f"{sample.sample_id}#{replicate}")
        while True:
            idx = len(turns)
            try:
                raw = backend.complete(list(messages), sample_id=sample.sample_id, replicate=replicate, turn_index=idx)
            except BackendError as exc:
                error = f"backend: {exc}"
                break
            messages.append(Message("assistant", raw))
            try:
                parsed, perr = parse_assistant_output(raw, tool_names), None
            except ParseError as exc:
                parsed, perr = None, str(exc)
            if parsed is None or (parsed.tool_call is None and not parsed.answer_text):
                turns.append(Turn(idx, raw, parsed, perr or "empty answer"))
                if config.on_parse_error == "abort" or nudges >= config.max_nudges:
                    error = f"parse: {perr or 'empty answer'}"
                    break
                nudges += 1
                messages.append(nudge_message())
                continue
            if parsed.tool_call is None:
                turns.append(Turn(idx, raw, parsed))
                terminal, final_answer = "answered", parsed.answer_text
                break
            if n >= config.max_turns:
                turns.append(Turn(idx, raw, parsed))
                terminal = "max_turns"
                break
            result = sandbox.execute(handle, parsed.tool_call.code, config.exec_timeout)
            if not config.record_wall_time:
                result = replace(result, wall_time=0.0)
            if store is not None:
                path_map.update(store.absorb(a.path for a in result.artifacts))
            n += 1
            msg = inject_tool_response(result, FINAL_TURN_NOTE if n >= config.max_turns else None)
            messages.append(msg)
            turns.append(Turn(idx, raw, parsed, None, result, msg.image_refs))
    except SessionError as exc:
        error = f"sandbox: {exc}"
    finally:
        if handle is not None:
            sandbox.close_session(handle)

    traj = Trajectory(
        sample_id=sample.sample_id,
        messages=messages,
        turns=turns,
        terminal=terminal,
        n=n,
        final_answer=final_answer,
        replicate=replicate,
        question=sample.question,
        gold=sample.gold,
        task_type=sample.task_type,
        images=sample.images,
        error=error,
    )
    if path_map:
        traj = traj.map_paths(lambda p: path_map.get(p, p))
    return traj


def _aborted(sample: Sample, replicate: int, config: RolloutConfig, error: str) -> Trajectory:
    messages = [Message("system", render_system_prompt(config.tools)), render_user_turn(sample.question, sample.images)]
    return Trajectory(
        sample.sample_id, messages, [], "aborted", replicate=replicate, question=sample.question,
        gold=sample.gold, task_type=sample.task_type, images=sample.images, error=error,
    )


def run_batch(
    samples: Sequence[Sample],
    k: int,
    backend: ModelBackend,
    sandbox: SandboxManager,
    config: RolloutConfig | None = None,
    workers: int = 1,
    store: ArtifactStore | None = None,
) -> list[Trajectory]:
    """``k`` independent episodes per sample, ordered by (sample_id, replicate).

    Any failure inside one episode yields an aborted trajectory for it; the
    batch itself never fails part-way.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    config = config or RolloutConfig()
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique within a batch")
    jobs = sorted(((s, r) for s in samples for r in range(k)), key=lambda job: (job[0].sample_id, job[1]))

    def one(job):
        sample, rep = job
        try:
            return run_episode(sample, backend, sandbox, config, rep, store)
        except Exception as exc:  # keep the batch alive
            log.exception("episode %s#%d failed", sample.sample_id, rep)
            return _aborted(sample, rep, config, f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        return [one(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))


def read_samples(path) -> list[Sample]:
    base = Path(path).resolve().parent
    return [Sample.from_dict(row, base) for row in read_jsonl(path)]


def read_trajectories(path) -> list[Trajectory]:
    base = Path(path).resolve().parent
    return [Trajectory.from_dict(row).map_paths(lambda p: resolve(p, base)) for row in read_jsonl(path)]


def write_trajectories(path, trajectories: Iterable[Trajectory], store: ArtifactStore | None = None) -> int:
    """Write JSONL; with a store, referenced files are copied into it first so paths are relocatable."""
    base = Path(path).resolve().parent

    def rows():
        for traj in trajectories:
            if store is not None:
                mapping = store.absorb(traj.referenced_paths())
                traj = traj.map_paths(lambda p: mapping.get(p, p))
            yield traj.map_paths(lambda p: relativize(p, base)).to_dict()

    return write_jsonl(path, rows())
