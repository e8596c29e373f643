"""Dual-textual features: caption and CoE sentence embeddings fused by cross-attention.

Hash embedding rule (``HashEmbeddingProvider``)
-----------------------------------------------
For a payload ``b`` (UTF-8 bytes of a string, or raw frame bytes):

1. ``key = SHA-256(b"coeloc-embed\\x00" + b)``.
2. For block ``i = 0, 1, ...``: ``SHA-256(key + i.to_bytes(4, "little"))``
   yields eight little-endian ``uint32`` words ``u``; each maps to
   ``u / 2**32 * 2 - 1``. Blocks are concatenated and truncated to ``dim``.
3. The vector is scaled to unit L2 norm.

In ``"tokens"`` mode a string is lower-cased, split into ``[a-z0-9']+``
tokens, and embedded as the unit-normalised sum of the per-token vectors
from the rule above (strings without tokens fall back to the whole-string
rule). Strings sharing words therefore land close together, which gives
the mock a crude shared text/frame space.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import math
import re
from typing import Protocol, Sequence, Union

import httpx
import numpy as np
import torch

log = logging.getLogger(__name__)

FramePayload = Union[str, bytes]

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class ProviderError(RuntimeError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"{message} (input index {index})")
        self.index = index


class EmbeddingProvider(Protocol):
    dim: int

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def encode_frames(self, frames: Sequence[FramePayload]) -> np.ndarray: ...


def hash_vector(payload: bytes, dim: int) -> np.ndarray:
    key = hashlib.sha256(b"coeloc-embed\x00" + payload).digest()
    words: list[int] = []
    block = 0
    while len(words) < dim:
        digest = hashlib.sha256(key + block.to_bytes(4, "little")).digest()
        words.extend(int.from_bytes(digest[j : j + 4], "little") for j in range(0, 32, 4))
        block += 1
    vec = np.array(words[:dim], dtype=np.float64) / 2**32 * 2 - 1
    return vec / np.linalg.norm(vec)


class HashEmbeddingProvider:
    """Deterministic mock provider; see the module docstring for the exact rule."""

    def __init__(self, dim: int = 16, mode: str = "tokens"):
        if mode not in ("string", "tokens"):
            raise ValueError(f"unknown hash embedding mode {mode!r}")
        self.dim = dim
        self.mode = mode
        self._cache: dict[bytes, np.ndarray] = {}

    def _vec(self, payload: bytes) -> np.ndarray:
        vec = self._cache.get(payload)
        if vec is None:
            vec = self._cache[payload] = hash_vector(payload, self.dim)
        return vec

    def embed_text(self, text: str) -> np.ndarray:
        if self.mode == "tokens":
            tokens = _TOKEN_RE.findall(text.lower())
            if tokens:
                total = np.sum([self._vec(tok.encode("utf-8")) for tok in tokens], axis=0)
                norm = np.linalg.norm(total)
                if norm > 0:
                    return total / norm
        return self._vec(text.encode("utf-8"))

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed_text(t) for t in texts]) if texts else np.zeros((0, self.dim))

    def encode_frames(self, frames: Sequence[FramePayload]) -> np.ndarray:
        rows = [self.embed_text(f) if isinstance(f, str) else self._vec(bytes(f)) for f in frames]
        return np.stack(rows) if rows else np.zeros((0, self.dim))


class HttpEmbeddingProvider:
    """Embedding service client.

    The texts endpoint receives a JSON list of strings and answers with a
    JSON list of float arrays. Frames go to ``frames_url`` as a JSON list of
    base64 strings (text payloads are base64 of their UTF-8 bytes).
    """

    def __init__(
        self,
        url: str,
        dim: int,
        frames_url: str | None = None,
        timeout_s: float = 30.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.frames_url = frames_url or url.rstrip("/") + "/frames"
        self.dim = dim
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout_s)

    def _post(self, url: str, payload: list[str]) -> np.ndarray:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(url, json=payload)
                resp.raise_for_status()
                rows = resp.json()
                break
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
                log.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
        else:
            raise ProviderError(f"embedding service failed after {self.retries + 1} attempts: {last}")
        out = np.asarray(rows, dtype=np.float64)
        if out.shape != (len(payload), self.dim):
            raise ProviderError(f"embedding service returned shape {out.shape}, expected {(len(payload), self.dim)}")
        if not np.all(np.isfinite(out)):
            raise ProviderError("embedding service returned non-finite values")
        return out

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self._post(self.url, list(texts))

    def encode_frames(self, frames: Sequence[FramePayload]) -> np.ndarray:
        payload = [
            base64.b64encode(f.encode("utf-8") if isinstance(f, str) else bytes(f)).decode("ascii")
            for f in frames
        ]
        return self._post(self.frames_url, payload)


def embed_unique(provider: EmbeddingProvider, texts: Sequence[str]) -> np.ndarray:
    """Encode each distinct string once and expand back to input order."""
    unique = list(dict.fromkeys(texts))
    try:
        rows = provider.encode_texts(unique)
    except Exception as exc:
        for i, text in enumerate(texts):
            try:
                provider.encode_texts([text])
            except Exception as inner:
                raise ProviderError(f"embedding failed: {inner}", index=i) from inner
        raise ProviderError(f"embedding failed: {exc}") from exc
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] != len(unique):
        raise ProviderError(f"provider returned {rows.shape[0]} rows for {len(unique)} strings")
    lookup = {t: i for i, t in enumerate(unique)}
    return rows[[lookup[t] for t in texts]]


def encode_bundle(
    provider: EmbeddingProvider, captions: Sequence[str], coe: Sequence[str], proj: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Embed captions and CoE sentences and project them to the model width."""
    if proj.shape[0] != provider.dim:
        raise ValueError(f"projection expects {proj.shape[0]}-d embeddings, provider gives {provider.dim}")
    cap = torch.as_tensor(embed_unique(provider, captions), dtype=proj.dtype)
    sent = torch.as_tensor(embed_unique(provider, coe), dtype=proj.dtype)
    return cap @ proj, sent @ proj


def cross_attend(
    f_cap: torch.Tensor,
    f_coe: torch.Tensor | Sequence[torch.Tensor],
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> torch.Tensor:
    """Caption rows query CoE rows, independently per shot.

    ``f_cap`` is ``(K, T, D)``; ``f_coe`` is ``(K, T', D)`` or a length-K
    sequence of ``(T'_k, D)`` tensors (sentence counts may differ per shot).
    """
    shots = [f_coe[k] for k in range(len(f_coe))]
    if len(shots) != f_cap.shape[0]:
        raise ValueError(f"{f_cap.shape[0]} caption shots vs {len(shots)} CoE shots")
    d = f_cap.shape[-1]
    out = []
    for cap, sent in zip(f_cap, shots):
        if sent.shape[0] == 0:
            raise ValueError("cross-attention needs at least one CoE sentence")
        logits = (cap @ w_q) @ (sent @ w_k).T / math.sqrt(d)
        out.append(torch.softmax(logits, dim=-1) @ (sent @ w_v))
    return torch.stack(out)
