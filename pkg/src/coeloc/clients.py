"""Chat clients for the CoE generation stages: scripted mocks and an HTTP client."""

from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from .textfuse import FramePayload

log = logging.getLogger(__name__)


class ClientError(RuntimeError):
    pass


class ChatClient(Protocol):
    role: str  # "vlm" or "llm"

    def complete(
        self, prompt: str, context: str, frames: Sequence[FramePayload] | None = None
    ) -> str: ...


@dataclass
class ScriptRule:
    pattern: re.Pattern
    responses: list[str]
    calls: int = 0

    def next(self) -> str:
        out = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        return out


class ScriptedChatClient:
    """Deterministic mock driven by ``(pattern -> response(s))`` rules.

    The first rule whose regex matches ``prompt + "\\n" + context`` answers.
    A rule with a list of responses returns them in order and then repeats
    the last one. Every call is recorded in ``calls``.
    """

    def __init__(self, rules: Sequence[tuple[str, str | Sequence[str]]], role: str = "llm", default: str | None = None):
        self.role = role
        self.rules = [
            ScriptRule(re.compile(p, re.S), [r] if isinstance(r, str) else list(r)) for p, r in rules
        ]
        self.default = default
        self.calls: list[dict] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike, role: str = "llm") -> "ScriptedChatClient":
        """Script file: JSON ``[{"pattern": regex, "response": str | [str, ...]}, ...]``."""
        doc = json.loads(Path(path).read_text())
        rules = doc["rules"] if isinstance(doc, dict) else doc
        default = doc.get("default") if isinstance(doc, dict) else None
        return cls([(r["pattern"], r["response"]) for r in rules], role=role, default=default)

    def complete(self, prompt: str, context: str, frames: Sequence[FramePayload] | None = None) -> str:
        with self._lock:
            self.calls.append({"prompt": prompt, "context": context, "n_frames": len(frames or [])})
            haystack = f"{prompt}\n{context}"
            for rule in self.rules:
                if rule.pattern.search(haystack):
                    return rule.next()
            if self.default is not None:
                return self.default
        raise ClientError(f"scripted client has no rule matching prompt {prompt[:60]!r}")


class EchoChatClient:
    """Returns its context verbatim (or the prompt when the context is empty)."""

    def __init__(self, role: str = "llm"):
        self.role = role
        self.calls: list[dict] = []

    def complete(self, prompt: str, context: str, frames: Sequence[FramePayload] | None = None) -> str:
        self.calls.append({"prompt": prompt, "context": context})
        return context or prompt


class HttpChatClient:
    """JSON-over-HTTP completion client.

    Request ``{"prompt", "context", "frames"?: [base64, ...]}``, response
    ``{"text"}``. A bearer token is read from the environment variable named
    by ``api_key_env`` when set.
    """

    def __init__(
        self,
        url: str,
        role: str = "llm",
        api_key_env: str | None = None,
        timeout_s: float = 60.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.role = role
        self.retries = retries
        headers = {}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if not key:
                raise ClientError(f"environment variable {api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=timeout_s)
        self._headers = headers

    def complete(self, prompt: str, context: str, frames: Sequence[FramePayload] | None = None) -> str:
        body: dict = {"prompt": prompt, "context": context}
        if frames and self.role == "vlm":
            body["frames"] = [
                base64.b64encode(f.encode("utf-8") if isinstance(f, str) else bytes(f)).decode("ascii")
                for f in frames
            ]
        errors = []
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(self.url, json=body, headers=self._headers)
                resp.raise_for_status()
                return str(resp.json()["text"])
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                errors.append(f"attempt {attempt + 1}: {exc}")
                log.warning("chat request failed (%s)", errors[-1])
        raise ClientError("chat client failed: " + "; ".join(errors))
