"""Text embedders returning unit-normalized vectors."""

from __future__ import annotations

import hashlib
import re
from typing import Mapping, Sequence

import httpx
import numpy as np

from ..errors import BackendError

_WORD = re.compile(r"\w+")


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


class HashEmbedder:
    """Deterministic bag-of-words embedder using signed feature hashing.

    Texts with the same words map to the same vector, so verbatim and
    near-verbatim duplicates score close to 1.0 with no model service.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim

    def _bucket(self, token: str) -> tuple[int, float]:
        h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "big")
        return h % self.dim, 1.0 if (h >> 63) & 1 else -1.0

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed needs at least one text")
        out = []
        for text in texts:
            v = np.zeros(self.dim)
            words = _WORD.findall(text.lower()) or [text]
            for w in words:
                i, sign = self._bucket(w)
                v[i] += sign
            out.append(_unit(v))
        return out


class ScriptedEmbedder:
    """Returns fixed vectors for known texts and falls back to hashing."""

    def __init__(self, vectors: Mapping[str, Sequence[float]], fallback: HashEmbedder | None = None):
        self.vectors = {k: _unit(np.asarray(v, dtype=float)) for k, v in vectors.items()}
        dims = {len(v) for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError("scripted vectors must share one dimension")
        self.fallback = fallback or HashEmbedder(dims.pop() if dims else 256)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed needs at least one text")
        return [self.vectors[t] if t in self.vectors else self.fallback.embed([t])[0] for t in texts]


class HttpEmbedder:
    """OpenAI-style ``/embeddings`` endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 60.0, transport=None):
        url = endpoint.rstrip("/")
        self.url = url if url.endswith("/embeddings") else url + "/embeddings"
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed needs at least one text")
        try:
            r = self._http.post(self.url, json={"model": self.model, "input": list(texts)})
            r.raise_for_status()
            rows = sorted(r.json()["data"], key=lambda d: d.get("index", 0))
            vecs = [_unit(np.asarray(row["embedding"], dtype=float)) for row in rows]
        except httpx.HTTPError as exc:
            raise BackendError("io", str(exc)) from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise BackendError("remote", f"malformed embedding response: {exc!r}") from exc
        if len(vecs) != len(texts) or len({len(v) for v in vecs}) != 1:
            raise BackendError("remote", "embedding response has the wrong shape")
        return vecs
