"""Interpreter backends.

Every backend implements ``start(workdir) -> session``,
``exec(session, code, timeout) -> {"stdout", "stderr", "status"}`` and
``kill(session)``. ``status`` is one of ok, error, timeout or crash; a reply
may also carry ``"broken": True`` when the interpreter could not be recovered.
"""

from __future__ import annotations

import json
import os
import select
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from ..errors import SessionError
from .worker import _HEADER, encode_frame, run_cell

_PKG_PARENT = str(Path(__file__).resolve().parents[2])


@dataclass
class _WorkerProcess:
    proc: subprocess.Popen
    rfd: int
    wfd: int
    alive: bool = True


class SubprocessBackend:
    """One Python worker process per session, spoken to over pipes."""

    def __init__(
        self,
        python: str = sys.executable,
        allow_network: bool = False,
        interrupt_grace: float = 5.0,
        memory_limit_mb: int | None = None,
        cpu_time_limit: int | None = None,
        spawn_timeout: float = 30.0,
    ):
        self.python = python
        self.allow_network = allow_network
        self.interrupt_grace = interrupt_grace
        self.memory_limit_mb = memory_limit_mb
        self.cpu_time_limit = cpu_time_limit
        self.spawn_timeout = spawn_timeout

    def _limits(self):
        import resource

        if self.memory_limit_mb:
            nbytes = int(self.memory_limit_mb) * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (nbytes, nbytes))
        if self.cpu_time_limit:
            secs = int(self.cpu_time_limit)
            resource.setrlimit(resource.RLIMIT_CPU, (secs, secs))

    def start(self, workdir) -> _WorkerProcess:
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join(p for p in (_PKG_PARENT, env.get("PYTHONPATH")) if p)
        env["PYTHONUNBUFFERED"] = "1"
        preexec = self._limits if (self.memory_limit_mb or self.cpu_time_limit) else None
        try:
            proc = subprocess.Popen(
                [self.python, "-m", "twirl.sandbox.worker"],
                cwd=str(workdir),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                env=env,
                start_new_session=True,
                preexec_fn=preexec,
            )
        except OSError as exc:
            raise SessionError("spawn", str(exc)) from exc
        worker = _WorkerProcess(proc, proc.stdout.fileno(), proc.stdin.fileno())
        try:
            self._send(worker, {"op": "init", "workdir": str(workdir), "allow_network": self.allow_network})
            reply = self._recv(worker, time.monotonic() + self.spawn_timeout)
        except (OSError, EOFError):
            reply = None
        if not reply or reply.get("status") != "ready":
            self.kill(worker)
            raise SessionError("spawn", "worker did not start")
        return worker

    def exec(self, worker: _WorkerProcess, code: str, timeout: float) -> dict:
        if not worker.alive:
            return {"stdout": "", "stderr": "interpreter is not running", "status": "crash"}
        try:
            self._send(worker, {"op": "exec", "code": code})
        except OSError:
            worker.alive = False
            return {"stdout": "", "stderr": "interpreter is not running", "status": "crash"}
        try:
            reply = self._recv(worker, time.monotonic() + timeout)
        except EOFError:
            worker.alive = False
            return {"stdout": "", "stderr": "interpreter crashed", "status": "crash"}
        if reply is not None:
            return reply
        # Timed out: interrupt the cell but keep the interpreter and its state.
        try:
            os.kill(worker.proc.pid, signal.SIGINT)
            reply = self._recv(worker, time.monotonic() + self.interrupt_grace)
        except (ProcessLookupError, EOFError):
            reply = None
        if reply is None:
            self.kill(worker)
            return {"stdout": "", "stderr": "interpreter unresponsive after interrupt", "status": "timeout", "broken": True}
        return {"stdout": reply.get("stdout", ""), "stderr": reply.get("stderr", ""), "status": "timeout"}

    def kill(self, worker: _WorkerProcess) -> None:
        worker.alive = False
        proc = worker.proc
        if proc.poll() is None:
            try:
                proc.stdin.write(encode_frame({"op": "shutdown"}))
                proc.stdin.flush()
                proc.wait(timeout=1.0)
            except (OSError, subprocess.TimeoutExpired, ValueError):
                proc.kill()
                proc.wait()
        for stream in (proc.stdin, proc.stdout):
            try:
                stream.close()
            except OSError:
                pass

    @staticmethod
    def _send(worker: _WorkerProcess, obj) -> None:
        data = encode_frame(obj)
        view = memoryview(data)
        while view:
            n = os.write(worker.wfd, view)
            view = view[n:]

    @staticmethod
    def _recv(worker: _WorkerProcess, deadline: float) -> dict | None:
        """Read one frame; None when the deadline passes, EOFError if the worker died."""
        header = _read_until(worker.rfd, _HEADER.size, deadline)
        if header is None:
            return None
        (n,) = _HEADER.unpack(header)
        # once a header arrives the body follows promptly
        body = _read_until(worker.rfd, n, time.monotonic() + 30.0)
        if body is None:
            raise EOFError("truncated frame")
        return json.loads(body.decode("utf-8"))


def _read_until(fd: int, n: int, deadline: float) -> bytes | None:
    buf = b""
    while len(buf) < n:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            if buf:
                raise EOFError("truncated frame")
            return None
        ready, _, _ = select.select([fd], [], [], remaining)
        if not ready:
            continue
        chunk = os.read(fd, n - len(buf))
        if not chunk:
            raise EOFError("worker closed its pipe")
        buf += chunk
    return buf


@dataclass
class _InProcessSession:
    namespace: dict = field(default_factory=dict)


class InProcessBackend:
    """Executes cells in this interpreter, one namespace per session.

    Meant for trusted code: replay tests, fuzzing and offline pipelines. There
    is no process isolation and a running cell cannot be interrupted; a cell
    that overruns its limit is reported as a timeout after it finishes. Code
    should write images under the ``WORKDIR`` variable because the process
    working directory is shared.
    """

    _io_lock = threading.Lock()  # redirect_stdout swaps a process-wide stream

    def start(self, workdir) -> _InProcessSession:
        return _InProcessSession({"__name__": "__main__", "WORKDIR": str(workdir)})

    def exec(self, session: _InProcessSession, code: str, timeout: float) -> dict:
        with self._io_lock:
            t0 = time.monotonic()
            reply = run_cell(session.namespace, code)
            elapsed = time.monotonic() - t0
        if elapsed >= timeout:
            reply["status"] = "timeout"
        return reply

    def kill(self, session: _InProcessSession) -> None:
        session.namespace.clear()


class HttpBackend:
    """Remote sandbox service with the same JSON bodies as the pipe framing.

    ``POST /sessions`` -> ``{"session_id"}``; ``POST /sessions/{id}/exec``
    with ``{"op": "exec", "code", "timeout"}`` -> ``{"stdout", "stderr",
    "status"}``; ``DELETE /sessions/{id}``. The service must share the
    session work directory with this process for artifact discovery.
    """

    def __init__(self, base_url: str, transport: httpx.BaseTransport | None = None, request_slack: float = 10.0):
        self.client = httpx.Client(base_url=base_url, transport=transport)
        self.request_slack = request_slack

    def start(self, workdir) -> str:
        try:
            r = self.client.post("/sessions", json={"workdir": str(workdir)}, timeout=30.0)
            r.raise_for_status()
            return r.json()["session_id"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise SessionError("spawn", str(exc)) from exc

    def exec(self, session_id: str, code: str, timeout: float) -> dict:
        try:
            r = self.client.post(
                f"/sessions/{session_id}/exec",
                json={"op": "exec", "code": code, "timeout": timeout},
                timeout=timeout + self.request_slack,
            )
            r.raise_for_status()
            body = r.json()
            return {"stdout": body.get("stdout", ""), "stderr": body.get("stderr", ""), "status": body["status"]}
        except httpx.TimeoutException:
            return {"stdout": "", "stderr": "sandbox request timed out", "status": "timeout"}
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            return {"stdout": "", "stderr": f"sandbox service error: {exc}", "status": "crash"}

    def kill(self, session_id: str) -> None:
        try:
            self.client.delete(f"/sessions/{session_id}", timeout=10.0)
        except httpx.HTTPError:
            pass
