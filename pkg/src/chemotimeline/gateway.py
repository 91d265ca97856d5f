"""Prompt rendering, chat-completions access and structured-output parsing."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .triplets import RELATIONS, SactTriplet

log = logging.getLogger(__name__)

EXTRACTION = "extraction"
TAG_VERIFICATION = "tag_verification"
SENTENCE_RELATION = "sentence_relation"
TEMPLATES = {
    EXTRACTION: "{note}",
    TAG_VERIFICATION: "{sentences}",
    SENTENCE_RELATION: "{context}",
}

DEFAULT_MAX_TOKENS = 4096
THINKING_MAX_TOKENS = 20480


class UnknownTemplate(KeyError):
    pass


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """Transient failures persisted past the retry budget."""


class EndpointError(GatewayError):
    """The endpoint answered with a non-retryable error status."""

    def __init__(self, status: int, body: str = "") -> None:
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class MissingFixture(GatewayError):
    pass


class TruncationWarning(UserWarning):
    """Generation stopped at the token limit."""


class ParseError(ValueError):
    pass


# --------------------------------------------------------------------------
# Prompts
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def template_text(template_id: str) -> str:
    if template_id not in TEMPLATES:
        raise UnknownTemplate(template_id)
    ref = resources.files("chemotimeline") / "data" / "prompts" / f"{template_id}.txt"
    return ref.read_text(encoding="utf-8")


def template_hash(template_id: str) -> str:
    return hashlib.sha256(template_text(template_id).encode("utf-8")).hexdigest()


def render_prompt(template_id: str, payload: str, allow_empty: bool = False) -> str:
    if not payload.strip() and not allow_empty:
        raise ValueError(f"empty payload for template {template_id!r}")
    text = template_text(template_id)
    # Templates contain literal JSON braces, so no str.format here.
    return text.replace(TEMPLATES[template_id], payload).rstrip("\n")


# --------------------------------------------------------------------------
# Requests and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20
    min_p: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")


@dataclass(frozen=True)
class ChatRequest:
    model_name: str
    prompt_text: str
    thinking_enabled: bool = False
    sampling: SamplingParams = field(default_factory=SamplingParams)
    # Identify the request for fixture replay independent of sampling params.
    template_id: str | None = None
    payload: str | None = None
    sample_index: int | None = None

    def __post_init__(self) -> None:
        if not self.prompt_text.strip():
            raise ValueError("prompt_text must be non-empty")

    def fixture_key(self) -> str:
        if self.template_id is not None and self.payload is not None:
            basis: list = [self.template_id, self.payload, self.thinking_enabled]
        else:
            basis = [None, self.prompt_text, self.thinking_enabled]
        if self.sample_index is not None:
            basis.append(self.sample_index)
        blob = json.dumps(basis, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:24]


def make_request(
    template_id: str,
    payload: str,
    model_name: str,
    thinking: bool = False,
    sampling: SamplingParams | None = None,
    sample_index: int | None = None,
) -> ChatRequest:
    sampling = sampling or SamplingParams()
    if thinking and sampling.max_tokens == DEFAULT_MAX_TOKENS:
        sampling = replace(sampling, max_tokens=THINKING_MAX_TOKENS)
    return ChatRequest(
        model_name=model_name,
        prompt_text=render_prompt(template_id, payload),
        thinking_enabled=thinking,
        sampling=sampling,
        template_id=template_id,
        payload=payload,
        sample_index=sample_index,
    )


@dataclass(frozen=True)
class GenerationResult:
    answer_text: str
    thinking_text: str | None = None
    finish_reason: str = "stop"  # stop | length | error


def split_thinking(
    raw: str, thinking_enabled: bool, open_tag: str = "<think>", close_tag: str = "</think>"
) -> tuple[str, str | None, bool]:
    """Separate a reasoning block from the answer.

    Returns ``(answer, thinking, complete)``; ``complete`` is False when the
    reasoning block was opened but never closed.
    """
    close = raw.find(close_tag)
    if close >= 0:
        open_ = raw.find(open_tag, 0, close)
        start = open_ + len(open_tag) if open_ >= 0 else 0
        thinking = raw[start:close].strip()
        answer = raw[close + len(close_tag):].strip()
        return answer, (thinking if thinking_enabled else None), True
    open_ = raw.find(open_tag)
    if open_ >= 0:
        thinking = raw[open_ + len(open_tag):].strip()
        return raw[:open_].strip(), (thinking if thinking_enabled else None), False
    return raw.strip(), ("" if thinking_enabled else None), True


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> GenerationResult: ...


@dataclass
class EndpointProfile:
    url: str
    model: str
    auth_env: str | None = "OPENAI_API_KEY"
    think_open: str = "<think>"
    think_close: str = "</think>"
    timeout: float = 600.0


class HttpBackend:
    """Chat-completions-compatible endpoint with retry on transient failures."""

    def __init__(
        self,
        profile: EndpointProfile,
        retries: int = 3,
        backoff: float = 1.0,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.profile = profile
        self.retries = retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=profile.timeout)
        self.sleep = sleep

    def _payload(self, request: ChatRequest) -> dict:
        s = request.sampling
        return {
            "model": request.model_name or self.profile.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": s.temperature,
            "top_p": s.top_p,
            "top_k": s.top_k,
            "min_p": s.min_p,
            "max_tokens": s.max_tokens,
            "chat_template_kwargs": {"enable_thinking": request.thinking_enabled},
        }

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.profile.auth_env) if self.profile.auth_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, request: ChatRequest) -> dict:
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.profile.url, json=self._payload(request), headers=self._headers())
            except httpx.TransportError as exc:
                last = exc
                log.warning("transport failure (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                last = EndpointError(resp.status_code, resp.text)
                log.warning("HTTP %d (attempt %d/%d)", resp.status_code, attempt + 1, self.retries)
                continue
            if not 200 <= resp.status_code < 300:
                raise EndpointError(resp.status_code, resp.text)
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                raise EndpointError(resp.status_code, "response is not JSON") from exc
        raise TransportError(f"gave up after {self.retries} attempts: {last}")

    def complete(self, request: ChatRequest) -> GenerationResult:
        body = self._post(request)
        try:
            choice = body["choices"][0]
            message = choice["message"]
            content = message.get("content") or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise EndpointError(200, f"malformed completion body: {exc}") from exc
        answer, thinking, complete = split_thinking(
            content, request.thinking_enabled, self.profile.think_open, self.profile.think_close
        )
        reasoning = message.get("reasoning_content") or message.get("reasoning")
        if reasoning and request.thinking_enabled:
            thinking = reasoning.strip()
        finish = choice.get("finish_reason") or "stop"
        if not complete or finish == "length":
            finish = "length"
        elif finish not in ("stop", "length"):
            finish = "stop"
        return GenerationResult(answer, thinking, finish)


class MockBackend:
    """Replays canned responses stored as ``<fixture-key>.txt`` files.

    A response whose reasoning block is never closed is reported as truncated.
    """

    def __init__(self, fixtures_dir: str | Path, default: str | None = None) -> None:
        self.fixtures_dir = Path(fixtures_dir)
        self.default = default

    def path_for(self, request: ChatRequest) -> Path:
        return self.fixtures_dir / f"{request.fixture_key()}.txt"

    def complete(self, request: ChatRequest) -> GenerationResult:
        path = self.path_for(request)
        if path.exists():
            raw = path.read_text(encoding="utf-8")
        elif self.default is not None:
            raw = self.default
        else:
            raise MissingFixture(f"no fixture {path.name} for template {request.template_id!r}")
        answer, thinking, complete = split_thinking(raw, request.thinking_enabled)
        return GenerationResult(answer, thinking, "stop" if complete else "length")


class Gateway:
    """Shared entry point for model calls with an in-flight cap."""

    def __init__(self, backend: Backend, model_name: str = "mock", max_in_flight: int = 4) -> None:
        self.backend = backend
        self.model_name = model_name
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, request: ChatRequest, warn: bool = True) -> GenerationResult:
        with self._slots:
            with self._lock:
                self.calls += 1
            result = self.backend.complete(request)
        if warn and result.finish_reason == "length":
            warnings.warn(f"generation truncated ({request.template_id})", TruncationWarning, stacklevel=2)
        return result

    def request(
        self,
        template_id: str,
        payload: str,
        thinking: bool = False,
        sampling: SamplingParams | None = None,
        sample_index: int | None = None,
        model_name: str | None = None,
    ) -> ChatRequest:
        return make_request(template_id, payload, model_name or self.model_name, thinking, sampling, sample_index)


# --------------------------------------------------------------------------
# Structured output parsing
# --------------------------------------------------------------------------

_FENCE = re.compile(r"```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)
_DECODER = json.JSONDecoder()


# Bound the work on adversarial text: a triplet answer never nests deeply, so
# starts followed by a long run of "[" are skipped, and only so many starts are tried.
MAX_ARRAY_STARTS = 256
MAX_NESTING = 32
_BRACKET_RUN = re.compile(r"\[(?:\s*\[)*")


def _arrays_in(text: str):
    pos = text.find("[")
    tried = 0
    while pos >= 0 and tried < MAX_ARRAY_STARTS:
        run = _BRACKET_RUN.match(text, pos)
        opens = [pos + i for i, ch in enumerate(run.group()) if ch == "["]
        if len(opens) > MAX_NESTING:
            pos = opens[-MAX_NESTING]
        tried += 1
        try:
            value, _ = _DECODER.raw_decode(text, pos)
        except (json.JSONDecodeError, RecursionError):
            value = None
        if isinstance(value, list):
            yield value
        pos = text.find("[", pos + 1)


def _row_like(value: list) -> bool:
    return all(isinstance(v, (dict, list)) for v in value)


def _brace_list(text: str) -> list | None:
    # Sentence-relation outputs may come as "{[..], [..]}" (not valid JSON).
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        return None
    inner = text[start + 1:end].strip()
    if not inner.startswith("["):
        return None
    try:
        value = json.loads("[" + inner + "]")
    except (json.JSONDecodeError, RecursionError):
        return None
    if value and all(isinstance(v, list) for v in value):
        return value
    return None


def _as_rows(value: list, chunk: str) -> list:
    # A bare triplet is usually the first row of a "{[..], [..]}" answer.
    if value and all(isinstance(v, str) for v in value):
        return _brace_list(chunk) or ([value] if len(value) == 3 else value)
    return value


def find_json_array(text: str) -> list:
    """Return the first well-formed JSON array in ``text``."""
    try:
        whole = json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        whole = None
    if isinstance(whole, list):
        return _as_rows(whole, text)
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    # Prefer an array of rows; stray "[1]"-style brackets in prose come last.
    fallback = None
    for chunk in candidates:
        for value in _arrays_in(chunk):
            if _row_like(value):
                return value
            if fallback is None:
                fallback = (value, chunk)
    for chunk in candidates:
        value = _brace_list(chunk)
        if value is not None:
            return value
    if fallback is not None:
        return _as_rows(*fallback)
    raise ParseError("no JSON array found")


def _element_to_triplet(item) -> SactTriplet | None:
    if isinstance(item, dict):
        fields = item.get("SACT"), item.get("relation"), item.get("time")
    elif isinstance(item, list) and len(item) == 3:
        fields = tuple(item)
    else:
        return None
    if not all(isinstance(f, str) for f in fields):
        return None
    sact, relation, time_raw = fields
    if relation.strip() not in RELATIONS or not sact.strip() or not time_raw.strip():
        return None
    return SactTriplet(sact, relation.strip(), time_raw)


def parse_triplet_array(answer_text: str, stats: Counter | None = None) -> list[SactTriplet]:
    """Parse model output into triplets, dropping malformed elements.

    Raises :class:`ParseError` when the text holds no JSON array at all.
    """
    try:
        items = find_json_array(answer_text)
    except ParseError:
        if stats is not None:
            stats["parse_error"] += 1
        raise
    out = []
    for item in items:
        triplet = _element_to_triplet(item)
        if triplet is None:
            if stats is not None:
                stats["dropped_element"] += 1
            continue
        out.append(triplet)
    if stats is not None and len(out) < len(items):
        log.warning("dropped %d malformed element(s)", len(items) - len(out))
    return out


def serialize_triplets(triplets: list[SactTriplet]) -> str:
    """Serialize in the extraction-prompt schema (keys SACT, relation, time)."""
    return json.dumps([t.as_dict() for t in triplets], ensure_ascii=False)


def sampling_dict(sampling: SamplingParams) -> dict:
    return asdict(sampling)
