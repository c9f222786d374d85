"""Per-episode interpreter sessions and artifact discovery."""

from __future__ import annotations

import logging
import re
import shutil
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import SessionError
from ..protocol import DEFAULT_EXEC_TIMEOUT, DEFAULT_IMAGE_DIR
from .backends import HttpBackend, InProcessBackend, SubprocessBackend
from .images import ImageThresholds, ImageVerdict, validate_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}
_PRINTED_PATH = re.compile(r"[\w./~-]*\.(?:png|jpe?g|bmp|gif|webp|tiff?)\b", re.IGNORECASE)
_UNSAFE = re.compile(r"[^\w.-]+")


@dataclass
class SandboxConfig:
    image_root: str = DEFAULT_IMAGE_DIR
    backend: str = "subprocess"  # subprocess | inprocess | http
    http_url: str | None = None
    retain_artifacts: bool = False
    allow_network: bool = False
    memory_limit_mb: int | None = None
    cpu_time_limit: int | None = None
    interrupt_grace: float = 5.0
    python: str = sys.executable
    thresholds: ImageThresholds = field(default_factory=ImageThresholds)

    def make_backend(self):
        if self.backend == "subprocess":
            return SubprocessBackend(
                python=self.python,
                allow_network=self.allow_network,
                interrupt_grace=self.interrupt_grace,
                memory_limit_mb=self.memory_limit_mb,
                cpu_time_limit=self.cpu_time_limit,
            )
        if self.backend == "inprocess":
            return InProcessBackend()
        if self.backend == "http":
            if not self.http_url:
                raise SessionError("spawn", "http sandbox backend needs http_url")
            return HttpBackend(self.http_url)
        raise SessionError("spawn", f"unknown sandbox backend {self.backend!r}")


@dataclass
class SessionHandle:
    session_id: str
    episode_id: str
    workdir: Path
    state: str = "open"
    broken: bool = False
    _inner: Any = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _seen: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class Artifact:
    path: str
    verdict: ImageVerdict

    def to_dict(self) -> dict:
        return {"path": self.path, "verdict": self.verdict.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Artifact":
        return cls(d["path"], ImageVerdict.from_dict(d["verdict"]))


@dataclass(frozen=True)
class ExecutionResult:
    status: str  # ok | error | timeout
    stdout: str = ""
    stderr: str = ""
    artifacts: tuple[Artifact, ...] = ()
    wall_time: float = 0.0
    timeout_limit: float = DEFAULT_EXEC_TIMEOUT

    @property
    def valid_artifacts(self) -> tuple[Artifact, ...]:
        return tuple(a for a in self.artifacts if a.verdict.valid)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "artifacts": [a.to_dict() for a in self.artifacts],
            "wall_time": self.wall_time,
            "timeout_limit": self.timeout_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionResult":
        return cls(
            d["status"],
            d.get("stdout", ""),
            d.get("stderr", ""),
            tuple(Artifact.from_dict(a) for a in d.get("artifacts", ())),
            float(d.get("wall_time", 0.0)),
            float(d.get("timeout_limit", DEFAULT_EXEC_TIMEOUT)),
        )


def _snapshot(workdir: Path) -> dict:
    seen = {}
    for p in workdir.rglob("*"):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            st = p.stat()
            seen[str(p)] = (st.st_mtime_ns, st.st_size)
    return seen


class SandboxManager:
    """Opens, drives and tears down one interpreter session per episode.

    Safe to share between worker threads; each handle serializes its own
    executions. ``opened`` and ``closed`` count effective transitions.
    """

    def __init__(self, config: SandboxConfig | None = None, backend=None):
        self.config = config or SandboxConfig()
        self.backend = backend if backend is not None else self.config.make_backend()
        self._lock = threading.Lock()
        self._open: dict[str, SessionHandle] = {}
        self.opened = 0
        self.closed = 0

    @property
    def open_sessions(self) -> list[str]:
        with self._lock:
            return sorted(self._open)

    def open_session(self, episode_id: str) -> SessionHandle:
        with self._lock:
            if episode_id in self._open:
                raise SessionError("duplicate", f"episode {episode_id!r} already has an open session")
            workdir = Path(self.config.image_root).resolve() / (_UNSAFE.sub("_", episode_id) or "episode")
            handle = SessionHandle(uuid.uuid4().hex, episode_id, workdir)
            self._open[episode_id] = handle
        try:
            if workdir.exists():
                shutil.rmtree(workdir)
            workdir.mkdir(parents=True)
            handle._inner = self.backend.start(workdir)
        except SessionError:
            self._forget(handle)
            raise
        except OSError as exc:
            self._forget(handle)
            raise SessionError("spawn", str(exc)) from exc
        with self._lock:
            self.opened += 1
        return handle

    def _forget(self, handle: SessionHandle) -> None:
        with self._lock:
            self._open.pop(handle.episode_id, None)
        handle.state = "closed"
        shutil.rmtree(handle.workdir, ignore_errors=True)

    def execute(self, handle: SessionHandle, code: str, timeout: float = DEFAULT_EXEC_TIMEOUT) -> ExecutionResult:
        if handle.state != "open":
            raise SessionError("closed", f"session for {handle.episode_id!r} is closed")
        if not code or not code.strip():
            raise ValueError("code must be nonempty")
        with handle._lock:
            if handle.broken:
                return ExecutionResult("error", stderr="interpreter session was terminated; state is lost", timeout_limit=timeout)
            before = _snapshot(handle.workdir)
            t0 = time.monotonic()
            reply = self.backend.exec(handle._inner, code, timeout)
            wall = time.monotonic() - t0
            status = reply.get("status", "error")
            if status == "crash":
                status = "error"
                handle.broken = True
            elif status not in ("ok", "error", "timeout"):
                status = "error"
            if reply.get("broken"):
                handle.broken = True
            stdout = reply.get("stdout", "")
            artifacts = self._discover(handle, stdout, before)
        return ExecutionResult(status, stdout, reply.get("stderr", ""), artifacts, wall, timeout)

    def _discover(self, handle: SessionHandle, stdout: str, before: dict) -> tuple[Artifact, ...]:
        root = handle.workdir.resolve()
        found: list[Path] = []
        for token in _PRINTED_PATH.findall(stdout):
            p = Path(token).expanduser()
            p = (p if p.is_absolute() else handle.workdir / p).resolve()
            if p.is_file() and p.is_relative_to(root) and p not in found:
                found.append(p)
        after = _snapshot(handle.workdir)
        for path in sorted(after):
            if before.get(path) != after[path]:
                p = Path(path).resolve()
                if p not in found:
                    found.append(p)
        th = self.config.thresholds
        return tuple(Artifact(str(p), validate_image(p, th)) for p in found)

    def close_session(self, handle: SessionHandle) -> None:
        with self._lock:
            if handle.state == "closed" or self._open.get(handle.episode_id) is not handle:
                handle.state = "closed"
                return
            del self._open[handle.episode_id]
            handle.state = "closed"
            self.closed += 1
        try:
            self.backend.kill(handle._inner)
        except Exception:
            log.exception("failed to stop interpreter for %s", handle.episode_id)
        if not self.config.retain_artifacts:
            try:
                shutil.rmtree(handle.workdir)
            except FileNotFoundError:
                pass
            except OSError:
                log.exception("failed to remove %s", handle.workdir)
