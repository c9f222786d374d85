"""Policy-model backends: live chat endpoint, scripted replay and a fuzzer."""

from __future__ import annotations

import json
import random
from typing import Mapping, Protocol, Sequence

from ..errors import BackendError
from ..protocol import Message, render_tool_call
from .chat import ChatClient, ChatRequest


class ModelBackend(Protocol):
    def complete(self, messages: Sequence[Message], *, sample_id: str, replicate: int, turn_index: int) -> str: ...


class ChatPolicy:
    """Policy served over the chat protocol; sampling parameters pass straight through."""

    def __init__(self, client: ChatClient, model: str, sampling: Mapping | None = None):
        self.client = client
        self.model = model
        self.sampling = dict(sampling or {})

    def complete(self, messages, *, sample_id, replicate, turn_index) -> str:
        resp = self.client.chat(ChatRequest(self.model, list(messages), self.sampling))
        return resp.text


class ReplayPolicy:
    """Scripted assistant turns keyed by sample and turn index.

    ``scripts`` maps ``sample_id`` or ``(sample_id, replicate)`` to a list of
    raw assistant outputs. A replicate-specific script wins over the plain
    one. Running past the end of a script is a backend failure.

    ``$IMAGE_0``, ``$IMAGE_1`` ... in a scripted turn are replaced by the
    paths of the sample's input images, so scripts stay relocatable.
    """

    def __init__(self, scripts: Mapping):
        self.scripts = dict(scripts)

    @classmethod
    def from_jsonl(cls, path) -> "ReplayPolicy":
        scripts = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                key = row["sample_id"] if row.get("replicate") is None else (row["sample_id"], int(row["replicate"]))
                scripts[key] = list(row["turns"])
        return cls(scripts)

    def complete(self, messages, *, sample_id, replicate, turn_index) -> str:
        script = self.scripts.get((sample_id, replicate), self.scripts.get(sample_id))
        if script is None:
            raise BackendError("remote", f"no replay script for {sample_id!r}")
        if turn_index >= len(script):
            raise BackendError("remote", f"replay script for {sample_id!r} has no turn {turn_index}")
        text = script[turn_index]
        if "$IMAGE_" in text:
            refs = next((m.image_refs for m in messages if m.role == "user"), ())
            # longest index first so $IMAGE_1 does not clobber $IMAGE_10
            for i in sorted(range(len(refs)), reverse=True):
                text = text.replace(f"$IMAGE_{i}", json.dumps(refs[i].path)[1:-1])
        return text


_IMAGE_CODE = """import os
import numpy as np
from PIL import Image
p = os.path.join(WORKDIR, "{name}.png")
{body}
Image.fromarray(arr).save(p)
print(p)"""

_BODIES = {
    "textured": "arr = np.random.default_rng({k}).integers(0, 255, ({h}, {w}, 3), dtype=np.uint8)",
    "blank": "arr = np.full(({h}, {w}, 3), 255, dtype=np.uint8)",
    "solid": "arr = np.full(({h}, {w}, 3), 90, dtype=np.uint8)",
    "tiny": "arr = np.random.default_rng({k}).integers(0, 255, (8, 8, 3), dtype=np.uint8)",
}


class RandomPolicy:
    """Fuzzing policy emitting arbitrary mixes of tool calls, answers and junk.

    Output depends only on ``(seed, sample_id, replicate, turn_index)``.
    Image-writing code saves under ``WORKDIR`` so it works with every
    sandbox backend.
    """

    def __init__(self, seed: int = 0, tool_weight: float = 0.75, junk_weight: float = 0.08):
        self.seed = seed
        self.tool_weight = tool_weight
        self.junk_weight = junk_weight

    def complete(self, messages, *, sample_id, replicate, turn_index) -> str:
        rng = random.Random(f"{self.seed}|{sample_id}|{replicate}|{turn_index}")
        u = rng.random()
        if u < self.junk_weight:
            return rng.choice(
                [
                    "",
                    "<think>unclosed thought",
                    "<tool_call>{not json}</tool_call>",
                    "<think>a</think>\n<tool_call>{\"name\": \"python\", \"arguments\": {\"code\": \"1\"}}</tool_call>"
                    "<tool_call>{\"name\": \"python\", \"arguments\": {\"code\": \"2\"}}</tool_call>",
                ]
            )
        if u < self.junk_weight + self.tool_weight:
            kind = rng.choice(["textured", "textured", "blank", "solid", "tiny", "error", "print", "multi"])
            k = rng.randrange(1 << 30)
            if kind == "error":
                code = "raise ValueError('bad crop box')"
            elif kind == "print":
                code = f"print({k} % 97)"
            elif kind == "multi":
                parts = [_IMAGE_CODE.format(name=f"m{k}_{i}", body=_BODIES[b].format(k=k + i, h=48, w=64)) for i, b in enumerate(("textured", "blank"))]
                code = "\n".join(parts)
            else:
                h, w = rng.randrange(32, 96), rng.randrange(32, 96)
                code = _IMAGE_CODE.format(name=f"t{turn_index}_{k}", body=_BODIES[kind].format(k=k, h=h, w=w))
            return render_tool_call(code, think=f"step {turn_index}: inspect region {k % 1000}")
        return f"<think>enough evidence after {turn_index} turns</think>\nThe answer is \\boxed{{{rng.randrange(10)}}}."
