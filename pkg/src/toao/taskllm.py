"""Language interface that turns (object, task) pairs into a part name.

A fixed instruction plus the object/task lines is sent to a pluggable
backend (an offline lookup stub or an HTTP chat endpoint) and the reply
is normalized into a bare lowercase part token usable as a query.
"""

from __future__ import annotations

import json
import os
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import requests

PROMPT_INSTRUCTION = (
    "Answer the question as if you are a robot with an object in your gripper. "
    "Follow the exact format. You will receive two pieces of input: 'O' "
    "representing the object in your gripper and 'T' representing the task you "
    "need to perform with the object. Provide a response, identifying a "
    "specific part of object 'O' that is most useful for completing task 'T'. "
    "Only provide the specific part of 'O'."
)

ENDPOINT_ENV = "TOAO_LLM_ENDPOINT"
API_KEY_ENV = "TOAO_LLM_KEY"

_ANSWER_MARKER = re.compile(r"-?A:")
_LEADING_ARTICLE = re.compile(r"^(the|a|an)\s+", re.IGNORECASE)


class StubMiss(Exception):
    """The stub backend has no entry for this object/task pair."""


class BackendUnavailable(Exception):
    """The HTTP backend could not be reached or answered with an error."""


class UnparseableAnswer(Exception):
    """The reply contains no recognizable part answer."""


@dataclass(frozen=True)
class TaskQuery:
    """Object text, task text, and (once resolved) the normalized part text."""

    object_text: str
    task_text: str
    part_text: str | None = None

    def __post_init__(self) -> None:
        if not self.object_text:
            raise ValueError("object_text must be non-empty")
        if not self.task_text:
            raise ValueError("task_text must be non-empty")
        if self.part_text is not None and self.part_text != _normalize_part(self.part_text):
            raise ValueError(f"part_text {self.part_text!r} is not normalized")


@dataclass
class Backend:
    """Answer source: offline lookup table or HTTP chat endpoint.

    The HTTP cache is keyed by (object, task) and guarded for concurrent
    resolve calls.
    """

    kind: str = "stub"
    endpoint: str | None = None
    model_name: str = "default"
    timeout: float = 30.0
    lookup: dict[tuple[str, str], str] = field(default_factory=dict)
    cache_enabled: bool = False
    _cache: dict[tuple[str, str], str] = field(default_factory=dict, repr=False)
    _cache_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("stub", "http"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint or os.environ.get(ENDPOINT_ENV)):
            raise ValueError(f"http backend needs an endpoint (or ${ENDPOINT_ENV})")

    @classmethod
    def from_stub_json(cls, path: str | Path) -> "Backend":
        """Stub table file: [{"o": ..., "t": ..., "a": ...}, ...]."""
        entries = json.loads(Path(path).read_text())
        lookup = {(e["o"], e["t"]): e["a"] for e in entries}
        return cls(kind="stub", lookup=lookup)


def build_prompt(q: TaskQuery) -> str:
    """Byte-stable prompt: the fixed instruction plus the O/T lines."""
    return f"{PROMPT_INSTRUCTION}\n\nO: {q.object_text}\nT: {q.task_text}"


def _normalize_part(raw: str) -> str:
    text = raw.strip()
    text = _LEADING_ARTICLE.sub("", text)
    text = text.rstrip(".").strip()
    return text.lower()


def parse_answer(raw: str) -> str:
    """Extract the part token after the first answer marker ('-A:' or 'A:')."""
    match = _ANSWER_MARKER.search(raw)
    if match is None:
        raise UnparseableAnswer(f"no answer marker in {raw!r}")
    remainder = raw[match.end():].split("\n", 1)[0]
    part = _normalize_part(remainder)
    if not part:
        raise UnparseableAnswer(f"empty part answer in {raw!r}")
    return part


def _reply_text(payload: dict) -> str:
    try:
        choices = payload.get("choices")
        if choices:
            return choices[0]["message"]["content"]
        if "message" in payload:
            return payload["message"]["content"]
        return payload["content"]
    except (KeyError, IndexError, TypeError):
        raise BackendUnavailable(f"cannot find message content in reply: {payload!r}") from None


def _http_request(backend: Backend, prompt: str) -> str:
    endpoint = backend.endpoint or os.environ.get(ENDPOINT_ENV)
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    body = {
        "model": backend.model_name,
        "messages": [{"role": "user", "content": prompt}],
    }
    last_error: Exception | None = None
    for _ in range(2):  # at most one retry; never more than 2 requests
        try:
            response = requests.post(endpoint, json=body, headers=headers, timeout=backend.timeout)
            if response.status_code != 200:
                last_error = BackendUnavailable(
                    f"backend answered HTTP {response.status_code}"
                )
                continue
            return _reply_text(response.json())
        except requests.RequestException as err:
            last_error = err
    raise BackendUnavailable(f"backend unreachable: {last_error}")


def resolve_part(q: TaskQuery, backend: Backend) -> TaskQuery:
    """Fill in the query's part_text via the backend."""
    if backend.kind == "stub":
        key = (q.object_text, q.task_text)
        if key not in backend.lookup:
            raise StubMiss(f"no stub entry for O={q.object_text!r}, T={q.task_text!r}")
        return replace(q, part_text=_normalize_part(backend.lookup[key]))

    cache_key = (q.object_text, q.task_text)
    if backend.cache_enabled:
        with backend._cache_lock:
            cached = backend._cache.get(cache_key)
        if cached is not None:
            return replace(q, part_text=cached)

    reply = _http_request(backend, build_prompt(q))
    part = parse_answer(reply)
    if backend.cache_enabled:
        with backend._cache_lock:
            backend._cache[cache_key] = part
    return replace(q, part_text=part)
