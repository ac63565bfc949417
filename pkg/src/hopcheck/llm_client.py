"""Chat-completion backends, prompt catalog, and structured-output parsing.

One backend protocol, three implementations: an OpenAI-compatible HTTP
client, a fixture-driven scripted backend used by every offline test, and
a recording proxy that captures live transcripts into scripted fixtures.
Backends are safe to call from multiple workers; per-request state only.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import requests

PROMPT_NAMES = (
    "step_generation",
    "evaluation",
    "final_answer",
    "judge",
    "plan_2wiki",
    "plan_hotpotqa",
    "plan_musique",
    "ideal_reasoning",
    "error_injection",
    "triple_extraction",
    "gleaning",
    "entity_resolution",
    "path_discovery",
)

_PLACEHOLDER_RE = re.compile(r"<<([a-z_]+)>>")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))

    def render(self, **values: str) -> str:
        missing = self.placeholders - values.keys()
        if missing:
            raise PromptError(f"{self.name}: missing placeholders {sorted(missing)}")

        def sub(match: re.Match) -> str:
            return str(values[match.group(1)])

        return _PLACEHOLDER_RE.sub(sub, self.body)


def load_prompt(name: str) -> PromptTemplate:
    if name not in PROMPT_NAMES:
        raise PromptError(f"unknown prompt {name!r}")
    body = resources.files("hopcheck.prompts").joinpath(f"{name}.txt").read_text("utf-8")
    return PromptTemplate(name=name, body=body)


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    cached_prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if min(self.prompt_tokens, self.cached_prompt_tokens, self.completion_tokens) < 0:
            raise ValueError("token counts must be >= 0")
        if self.cached_prompt_tokens > self.prompt_tokens:
            raise ValueError("cached_prompt_tokens cannot exceed prompt_tokens")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model_id: str = "default"
    temperature: float = 0.0
    max_tokens: int = 1024
    cache_prefix_len: int = 0  # advisory, in tokens

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("message list must be non-empty")
        if self.messages[0].role != "system":
            raise ValueError("first message must be the system/instruction message")

    def key(self) -> str:
        """Stable digest used by scripted fixtures."""
        blob = json.dumps(
            [self.model_id] + [[m.role, m.content] for m in self.messages],
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: Usage = field(default_factory=Usage)


class TransportError(RuntimeError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class Backend(Protocol):
    def complete(self, req: ChatRequest) -> ChatResponse: ...


class ScriptedBackend:
    """Deterministic fixture-driven backend.

    Responses are looked up by request digest first; unmatched requests
    fall back to an ordered FIFO script. Immutable after load apart from
    the FIFO cursor and the call counter.
    """

    def __init__(
        self,
        by_key: dict[str, ChatResponse] | None = None,
        script: list[ChatResponse] | None = None,
        responder: Callable[[ChatRequest], ChatResponse] | None = None,
    ):
        self._by_key = dict(by_key or {})
        self._script = list(script or [])
        self._responder = responder
        self._cursor = 0
        self._lock = threading.Lock()
        self.calls = 0

    @classmethod
    def from_fixture(cls, path: str | Path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        by_key = {}
        script = []
        for entry in data:
            usage = Usage(**entry.get("usage", {}))
            resp = ChatResponse(text=entry["text"], usage=usage)
            if entry.get("key"):
                by_key[entry["key"]] = resp
            else:
                script.append(resp)
        return cls(by_key=by_key, script=script)

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
            resp = self._by_key.get(req.key())
            if resp is not None:
                return resp
            if self._responder is not None:
                return self._responder(req)
            if self._cursor < len(self._script):
                resp = self._script[self._cursor]
                self._cursor += 1
                return resp
        raise TransportError(f"no scripted response for request {req.key()[:12]}", 1)


class RecordingBackend:
    """Proxy that forwards to a live backend and captures transcripts.

    `save()` writes a fixture file loadable by ScriptedBackend.from_fixture.
    """

    def __init__(self, inner: Backend):
        self._inner = inner
        self._records: list[dict] = []
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> ChatResponse:
        resp = self._inner.complete(req)
        with self._lock:
            self._records.append(
                {
                    "key": req.key(),
                    "text": resp.text,
                    "usage": {
                        "prompt_tokens": resp.usage.prompt_tokens,
                        "cached_prompt_tokens": resp.usage.cached_prompt_tokens,
                        "completion_tokens": resp.usage.completion_tokens,
                    },
                }
            )
        return resp

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self._records, fh, ensure_ascii=False, indent=2)


class OpenAIBackend:
    """OpenAI-compatible /v1/chat/completions client with bounded retries."""

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        backoff_cap: float = 30.0,
        sleep: Callable[[float], None] = time.sleep,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._session = session or requests.Session()
        self.retry_count = 0

    def complete(self, req: ChatRequest) -> ChatResponse:
        payload = {
            "model": req.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/v1/chat/completions"
        last_error = "unreachable"
        attempts = 0
        for attempt in range(self.max_retries + 1):
            attempts = attempt + 1
            try:
                resp = self._session.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                self._backoff(attempt, None)
                continue
            if resp.status_code == 429:
                last_error = "rate limited"
                retry_after = resp.headers.get("Retry-After")
                self._backoff(attempt, float(retry_after) if retry_after else None)
                continue
            if resp.status_code >= 500:
                last_error = f"server error {resp.status_code}"
                self._backoff(attempt, None)
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempts)
            return _parse_openai_response(resp.json())
        raise TransportError(last_error, attempts)

    def _backoff(self, attempt: int, retry_after: float | None) -> None:
        if attempt >= self.max_retries:
            return
        self.retry_count += 1
        delay = retry_after if retry_after is not None else self.backoff_base * (2**attempt)
        self._sleep(min(delay, self.backoff_cap))


def _parse_openai_response(body: dict) -> ChatResponse:
    text = body["choices"][0]["message"]["content"]
    usage = body.get("usage") or {}
    prompt_tokens = int(usage.get("prompt_tokens", 0))
    details = usage.get("prompt_tokens_details") or {}
    cached = int(details.get("cached_tokens", usage.get("cached_prompt_tokens", 0)))
    return ChatResponse(
        text=text,
        usage=Usage(
            prompt_tokens=prompt_tokens,
            cached_prompt_tokens=min(cached, prompt_tokens),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        ),
    )


def complete(backend: Backend, req: ChatRequest) -> ChatResponse:
    return backend.complete(req)


@dataclass(frozen=True)
class ParseFailure:
    reason: str
    offset: int


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def parse_structured_verdict(
    text: str, required_keys: tuple[str, ...] = ()
) -> dict | ParseFailure:
    """Extract the outermost JSON object from a completion.

    Strips code fences and surrounding prose; never repairs malformed
    JSON bodies. Returns ParseFailure with the character offset of the
    candidate object on failure.
    """
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    for candidate in candidates + [text]:
        start = candidate.find("{")
        if start < 0:
            continue
        obj, _end = _scan_object(candidate, start)
        if obj is None:
            base_offset = text.find(candidate) if candidate is not text else 0
            return ParseFailure("malformed object", base_offset + start)
        missing = [k for k in required_keys if k not in obj]
        if missing:
            return ParseFailure(f"missing keys: {', '.join(missing)}", start)
        return obj
    return ParseFailure("no object found", 0)


def _scan_object(text: str, start: int) -> tuple[dict | None, int]:
    depth = 0
    in_string = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                try:
                    return json.loads(text[start : i + 1]), i + 1
                except json.JSONDecodeError:
                    return None, i + 1
    return None, len(text)


def parse_json_list(text: str) -> list | ParseFailure:
    """Extract the outermost JSON array (triple lists, plan step lists)."""
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    for candidate in candidates + [text]:
        start = candidate.find("[")
        if start < 0:
            continue
        decoder = json.JSONDecoder()
        try:
            value, _ = decoder.raw_decode(candidate[start:])
        except json.JSONDecodeError:
            return ParseFailure("malformed array", start)
        if isinstance(value, list):
            return value
        return ParseFailure("not an array", start)
    return ParseFailure("no array found", 0)


def build_request(
    template: PromptTemplate,
    model_id: str = "default",
    max_tokens: int = 1024,
    **values: str,
) -> ChatRequest:
    """Render a catalog prompt into a single system-message request."""
    return ChatRequest(
        messages=(Message("system", template.render(**values)),),
        model_id=model_id,
        max_tokens=max_tokens,
    )
