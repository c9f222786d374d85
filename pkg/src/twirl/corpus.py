"""JSONL reading/writing and the content-addressed artifact store."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Iterable, Iterator


def read_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def dumps(row: dict) -> str:
    return json.dumps(row, ensure_ascii=False, sort_keys=False)


def write_jsonl(path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
            n += 1
    return n


class ArtifactStore:
    """Copies files under ``root`` named by the SHA-256 of their bytes."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        self._lock = threading.Lock()

    def put(self, path) -> str:
        src = Path(path)
        data = src.read_bytes()
        dest = self.root / f"{hashlib.sha256(data).hexdigest()}{src.suffix.lower()}"
        with self._lock:
            if not dest.exists():
                self.root.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".part")
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, dest)
        return str(dest)

    def absorb(self, paths: Iterable[str]) -> dict[str, str]:
        """Store every existing file in ``paths``; returns old path -> stored path."""
        mapping = {}
        for p in paths:
            if p not in mapping and Path(p).is_file():
                mapping[p] = self.put(p)
        return mapping


def relativize(path: str, base: Path) -> str:
    """``path`` relative to ``base`` when it is absolute, so corpora can move as a tree."""
    if not Path(path).is_absolute():
        return path
    return os.path.relpath(Path(path).resolve(), Path(base).resolve())


def resolve(path: str, base: Path | None) -> str:
    p = Path(path)
    if base is None or p.is_absolute():
        return path
    return str((base / p).resolve())
