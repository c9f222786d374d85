"""Interpreter worker speaking length-prefixed JSON over stdin/stdout.

Frames are a 4-byte big-endian length followed by UTF-8 JSON. Requests:
``{"op": "init", "workdir": ..., "allow_network": bool}``,
``{"op": "exec", "code": ...}`` and ``{"op": "shutdown"}``. Exec replies are
``{"stdout": ..., "stderr": ..., "status": "ok" | "error" | "interrupted"}``.

Run as ``python -m twirl.sandbox.worker``. The protocol streams are moved off
fds 0/1 at startup so user code printing straight to fd 1 cannot corrupt the
framing.
"""

from __future__ import annotations

import ast
import contextlib
import io
import json
import os
import signal
import socket
import struct
import sys
import traceback

_HEADER = struct.Struct(">I")


def encode_frame(obj) -> bytes:
    data = json.dumps(obj).encode("utf-8")
    return _HEADER.pack(len(data)) + data


def read_frame(stream) -> dict | None:
    header = _read_exact(stream, _HEADER.size)
    if header is None:
        return None
    (n,) = _HEADER.unpack(header)
    body = _read_exact(stream, n)
    if body is None:
        return None
    return json.loads(body.decode("utf-8"))


def _read_exact(stream, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _user_frames(tb):
    """Skip the harness frames so a traceback starts in the cell, as in a notebook."""
    while tb is not None and tb.tb_frame.f_code.co_filename != "<cell>":
        tb = tb.tb_next
    return tb


def run_cell(namespace: dict, code: str) -> dict:
    """Execute ``code`` in ``namespace`` the way a notebook cell runs.

    A trailing bare expression has its repr printed, as Jupyter displays it.
    """
    out, err = io.StringIO(), io.StringIO()
    status = "ok"
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            tree = ast.parse(code, "<cell>", "exec")
            tail = None
            if tree.body and isinstance(tree.body[-1], ast.Expr):
                tail = ast.Expression(tree.body.pop().value)
            exec(compile(tree, "<cell>", "exec"), namespace)
            if tail is not None:
                value = eval(compile(tail, "<cell>", "eval"), namespace)
                if value is not None:
                    print(repr(value))
        except KeyboardInterrupt:
            status = "interrupted"
        except BaseException as exc:
            status = "error"
            traceback.print_exception(type(exc), exc, _user_frames(exc.__traceback__))
    return {"stdout": out.getvalue(), "stderr": err.getvalue(), "status": status}


def deny_network() -> None:
    def _blocked(self, *args, **kwargs):
        if self.family in (socket.AF_INET, socket.AF_INET6):
            raise PermissionError("network access is disabled in this sandbox")
        return _connect(self, *args, **kwargs)

    def _blocked_ex(self, *args, **kwargs):
        if self.family in (socket.AF_INET, socket.AF_INET6):
            raise PermissionError("network access is disabled in this sandbox")
        return _connect_ex(self, *args, **kwargs)

    _connect, _connect_ex = socket.socket.connect, socket.socket.connect_ex
    socket.socket.connect = _blocked
    socket.socket.connect_ex = _blocked_ex


def main() -> int:
    proto_in = os.fdopen(os.dup(0), "rb", buffering=0)
    proto_out = os.fdopen(os.dup(1), "wb", buffering=0)
    devnull = os.open(os.devnull, os.O_RDWR)
    os.dup2(devnull, 0)
    os.dup2(devnull, 1)
    sys.stdin = open(os.devnull)

    namespace: dict = {"__name__": "__main__"}
    while True:
        try:
            req = read_frame(proto_in)
            if req is None or req.get("op") == "shutdown":
                return 0
            op = req.get("op")
            if op == "init":
                workdir = req["workdir"]
                os.chdir(workdir)
                namespace["WORKDIR"] = workdir
                if not req.get("allow_network", False):
                    deny_network()
                reply = {"status": "ready", "pid": os.getpid()}
            elif op == "exec":
                reply = run_cell(namespace, req["code"])
            else:
                reply = {"status": "error", "stdout": "", "stderr": f"unknown op {op!r}"}
            # an interrupt must not split a reply frame; it is delivered on unblock
            signal.pthread_sigmask(signal.SIG_BLOCK, {signal.SIGINT})
            try:
                proto_out.write(encode_frame(reply))
            finally:
                signal.pthread_sigmask(signal.SIG_UNBLOCK, {signal.SIGINT})
        except KeyboardInterrupt:
            # late interrupt that landed outside user code
            continue


if __name__ == "__main__":
    sys.exit(main())
