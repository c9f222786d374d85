"""Prompt templates, the tool-call wire format, and assistant-output parsing."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import ConfigError, ParseError

if TYPE_CHECKING:
    from .sandbox import ExecutionResult

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
TOOL_CALL_OPEN, TOOL_CALL_CLOSE = "<tool_call>", "</tool_call>"
TOOL_RESPONSE_OPEN, TOOL_RESPONSE_CLOSE = "<tool_response>", "</tool_response>"
TOOLS_OPEN, TOOLS_CLOSE = "<tools>", "</tools>"

PYTHON_TOOL_NAME = "python"
DEFAULT_IMAGE_DIR = "/mnt/data/images/temp"
DEFAULT_EXEC_TIMEOUT = 60.0
STDERR_LIMIT = 2000

ROLES = ("system", "user", "assistant", "tool_response")

# Anything that looks like one of our tags, in any spelling or case.
_TAGLIKE = re.compile(r"<\s*/?\s*(?:think|tool_call|tool_response|tools)\s*>", re.IGNORECASE)


@dataclass(frozen=True)
class ImageRef:
    path: str
    width: int
    height: int

    def __post_init__(self):
        if not self.path:
            raise ValueError("image path must be nonempty")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError(f"image {self.path!r} has non-positive size {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {"path": self.path, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRef":
        return cls(d["path"], int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Message:
    role: str
    text: str
    image_refs: tuple[ImageRef, ...] = ()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool_response" and not self.image_refs and not self.text.strip():
            raise ValueError("tool_response message needs text or images")

    def to_dict(self) -> dict:
        return {"role": self.role, "text": self.text, "image_refs": [r.to_dict() for r in self.image_refs]}

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(d["role"], d["text"], tuple(ImageRef.from_dict(r) for r in d.get("image_refs", ())))


@dataclass(frozen=True)
class ToolCall:
    name: str
    code: str

    def payload(self) -> dict:
        return {"name": self.name, "arguments": {"code": self.code}}


@dataclass(frozen=True)
class ParsedAssistantOutput:
    think: str = ""
    tool_call: ToolCall | None = None
    answer_text: str = ""
    format_ok: bool = False
    has_think: bool = False

    def to_dict(self) -> dict:
        return {
            "think": self.think,
            "tool_call": self.tool_call.payload() if self.tool_call else None,
            "answer_text": self.answer_text,
            "format_ok": self.format_ok,
            "has_think": self.has_think,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedAssistantOutput":
        tc = d.get("tool_call")
        return cls(
            think=d.get("think", ""),
            tool_call=ToolCall(tc["name"], tc["arguments"]["code"]) if tc else None,
            answer_text=d.get("answer_text", ""),
            format_ok=bool(d.get("format_ok")),
            has_think=bool(d.get("has_think")),
        )


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict = field(default_factory=dict)
    required: tuple[str, ...] = ()

    def to_json(self) -> str:
        # "required" sits beside "parameters", as in the published prompt.
        fn = {"name": self.name, "description": self.description, "parameters": self.parameters}
        if self.required:
            fn["required"] = list(self.required)
        return json.dumps({"type": "function", "function": fn}, ensure_ascii=False)


_PYTHON_TOOL_DESCRIPTION = (
    "Use this tool to execute Python code in your chain of thought.\n\n"
    "When you send a message containing Python code to python, it will be executed in a "
    "stateful Jupyter notebook environment. python will respond with the output of the "
    "execution or time out after {timeout} seconds. The drive at '{image_dir}' can be used "
    "to save the temporary image files. Internet access for this session is disabled. "
    "Do not make external web requests or API calls as they will fail.\n\n"
    "Reasoning & Image Manipulation & Drawing Auxiliary Graphics (Optional but Encouraged):\n"
    "- You have the capability to write executable Python code to perform image manipulations "
    "(e.g., cropping to a Region of Interest (ROI), resizing, rotation, adjusting contrast) or "
    "perform calculation for better reasoning.\n"
    "- You have the capability to write Python code to add auxiliary graphics (such as "
    "segments, circles, rectangles, labels, etc.) to the image, to help illustrate your "
    "reasoning process.\n"
    "- The code will be executed in a secure sandbox, and its output will be provided back "
    "to you for further analysis.\n"
    "- At the end of the code, print the path of the processed image (processed_path) or the "
    "relevant result for further processing within the sandbox environment."
)


def python_tool(
    name: str = PYTHON_TOOL_NAME,
    timeout: float = DEFAULT_EXEC_TIMEOUT,
    image_dir: str = DEFAULT_IMAGE_DIR,
) -> ToolSpec:
    return ToolSpec(
        name=name,
        description=_PYTHON_TOOL_DESCRIPTION.format(timeout=float(timeout), image_dir=image_dir),
        parameters={
            "type": "object",
            "properties": {"code": {"type": "string", "description": "The Python code to execute"}},
        },
        required=("code",),
    )


DEFAULT_TOOLS: tuple[ToolSpec, ...] = (python_tool(),)

_SYSTEM_HEADER = (
    "You are a helpful assistant.\n"
    "\n"
    "# Tools\n"
    "You may call one or more functions to assist with the user query.\n"
    "You are provided with function signatures within <tools></tools> XML tags:\n"
    "\n"
)
_SYSTEM_FOOTER = (
    "\n"
    "For each function call, return a json object with function name and arguments within "
    "<tool_call></tool_call> XML tags:\n"
    "<tool_call>\n"
    '{"name": <function-name>, "arguments": <args-json-object>}\n'
    "</tool_call>"
)

REASONING_SYSTEM_PROMPT = "You are a helpful assistant."


def render_system_prompt(tool_registry: Sequence[ToolSpec] = DEFAULT_TOOLS) -> str:
    if not tool_registry:
        raise ConfigError("tool registry is empty")
    tools = "\n".join(t.to_json() for t in tool_registry)
    return f"{_SYSTEM_HEADER}{TOOLS_OPEN}\n{tools}\n{TOOLS_CLOSE}\n{_SYSTEM_FOOTER}"


def metadata_block(ref: ImageRef) -> str:
    return f"image path: {ref.path}\nimage width: {ref.width}\nimage height: {ref.height}"


def render_user_turn(question: str, images: Iterable[ImageRef] = ()) -> Message:
    images = tuple(images)
    for ref in images:
        if not isinstance(ref, ImageRef):
            raise TypeError(f"expected ImageRef, got {type(ref).__name__}")
    parts = [question] + [metadata_block(ref) for ref in images]
    return Message("user", "\n".join(parts), images)


def parse_assistant_output(raw: str, tool_names: Iterable[str] = (PYTHON_TOOL_NAME,)) -> ParsedAssistantOutput:
    """Split one assistant turn into think / tool call / answer.

    Raises ParseError for unbalanced, nested or duplicated tags and for a
    tool-call body that is not ``{"name": ..., "arguments": {"code": ...}}``.
    Softer deviations (prose around the tool call, a turn with no think
    block, stray tag spellings) parse but come back with ``format_ok=False``.
    """
    counts = {t: raw.count(t) for t in (THINK_OPEN, THINK_CLOSE, TOOL_CALL_OPEN, TOOL_CALL_CLOSE)}
    if counts[THINK_OPEN] != counts[THINK_CLOSE]:
        raise ParseError("structure", "unbalanced think tags")
    if counts[TOOL_CALL_OPEN] != counts[TOOL_CALL_CLOSE]:
        raise ParseError("structure", "unbalanced tool_call tags")
    if counts[THINK_OPEN] > 1:
        raise ParseError("structure", "more than one think block")
    if counts[TOOL_CALL_OPEN] > 1:
        raise ParseError("structure", "more than one tool_call block")

    has_think = counts[THINK_OPEN] == 1
    prefix, think, rest = "", "", raw
    if has_think:
        t0, t1 = raw.index(THINK_OPEN), raw.index(THINK_CLOSE)
        if t1 < t0:
            raise ParseError("structure", "</think> before <think>")
        inner = raw[t0 + len(THINK_OPEN):t1]
        if TOOL_CALL_OPEN in inner or TOOL_CALL_CLOSE in inner:
            raise ParseError("structure", "tool_call nested inside think")
        prefix, think, rest = raw[:t0], inner.strip(), raw[t1 + len(THINK_CLOSE):]

    if TOOL_CALL_OPEN not in rest:
        if counts[TOOL_CALL_OPEN]:
            raise ParseError("structure", "tool_call precedes think")
        answer = rest.strip()
        ok = has_think and not prefix.strip() and bool(answer) and not _TAGLIKE.search(answer)
        return ParsedAssistantOutput(think=think, answer_text=answer, format_ok=ok, has_think=has_think)

    c0, c1 = rest.index(TOOL_CALL_OPEN), rest.index(TOOL_CALL_CLOSE)
    if c1 < c0:
        raise ParseError("structure", "</tool_call> before <tool_call>")
    mid, body, suffix = rest[:c0], rest[c0 + len(TOOL_CALL_OPEN):c1], rest[c1 + len(TOOL_CALL_CLOSE):]
    call = _decode_tool_payload(body, tuple(tool_names))
    ok = (
        has_think
        and not prefix.strip()
        and not mid.strip()
        and not suffix.strip()
        and not _TAGLIKE.search(prefix + mid + suffix)
    )
    return ParsedAssistantOutput(think=think, tool_call=call, format_ok=ok, has_think=has_think)


def _decode_tool_payload(body: str, tool_names: tuple[str, ...]) -> ToolCall:
    try:
        payload = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ParseError("tool_payload", f"invalid JSON: {exc.msg}") from None
    if not isinstance(payload, dict) or not isinstance(payload.get("name"), str):
        raise ParseError("tool_payload", "payload must be an object with a string name")
    args = payload.get("arguments")
    if not isinstance(args, dict) or not isinstance(args.get("code"), str) or not args["code"].strip():
        raise ParseError("tool_payload", "arguments.code must be a nonempty string")
    if payload["name"] not in tool_names:
        raise ParseError("tool_payload", f"unknown tool {payload['name']!r}")
    return ToolCall(payload["name"], args["code"])


def format_check(raw: str) -> bool:
    try:
        return parse_assistant_output(raw).format_ok
    except ParseError:
        return False


def serialize_assistant_output(parsed: ParsedAssistantOutput) -> str:
    """Canonical rendering; a well-formed parse always re-serializes to a format_check-clean string."""
    head = f"{THINK_OPEN}{parsed.think}{THINK_CLOSE}\n" if (parsed.has_think or parsed.tool_call) else ""
    if parsed.tool_call is not None:
        body = json.dumps(parsed.tool_call.payload(), ensure_ascii=False)
        return f"{head}{TOOL_CALL_OPEN}\n{body}\n{TOOL_CALL_CLOSE}"
    return f"{head}{parsed.answer_text}"


def render_tool_call(code: str, think: str = "", name: str = PYTHON_TOOL_NAME) -> str:
    return serialize_assistant_output(ParsedAssistantOutput(think=think, tool_call=ToolCall(name, code), has_think=True))


def inject_tool_response(result: "ExecutionResult", note: str | None = None) -> Message:
    """Wrap an execution result as the next user-side message.

    Only images whose verdict is ok are attached; each rejected image leaves a
    one-line note so the model knows why it is missing.
    """
    lines: list[str] = []
    stdout = result.stdout.rstrip("\n")
    if stdout:
        lines.append(stdout)
    if result.status == "error":
        stderr = result.stderr.rstrip("\n")[-STDERR_LIMIT:]
        lines.append(f"Error:\n{stderr}" if stderr else "Error: execution failed")
    elif result.status == "timeout":
        lines.append("Execution timed out.")

    refs: list[ImageRef] = []
    for art in result.artifacts:
        v = art.verdict
        if v.valid:
            ref = ImageRef(art.path, v.width, v.height)
            refs.append(ref)
            lines.append(metadata_block(ref))
        else:
            lines.append(f"[image omitted: {art.path} ({v.reason})]")
    if not lines:
        lines.append("(no output)")
    if note:
        lines.append(note)
    body = "\n".join(lines)
    return Message("tool_response", f"{TOOL_RESPONSE_OPEN}\n{body}\n{TOOL_RESPONSE_CLOSE}", tuple(refs))


def nudge_message(text: str = "format error, respond in the required format") -> Message:
    return Message("tool_response", f"{TOOL_RESPONSE_OPEN}\n{text}\n{TOOL_RESPONSE_CLOSE}")
