"""Chat-completion gateway: prompt templates, backends, structured output, cassettes.

Backends implement ``generate(text, temperature, max_tokens) -> str``.  The
gateway renders templates, counts calls, and handles structured-output repair.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import (
    MissingBinding,
    ParseFailure,
    SchemaViolation,
    ScriptMiss,
    TransportError,
)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")

# Structured-output repair attempts on top of the first ask.
REPAIR_RETRIES = 2


@dataclass(frozen=True)
class PromptTemplate:
    """A named, versioned prompt with ``{placeholder}`` slots."""

    id: str
    text: str
    version: int = 1
    expected_output: str = "free_text"  # free_text | structured

    def placeholders(self):
        return sorted(set(_PLACEHOLDER_RE.findall(self.text)))

    def render(self, bindings: dict) -> str:
        def _sub(match):
            name = match.group(1)
            if name not in bindings:
                raise MissingBinding(name)
            return str(bindings[name])

        return _PLACEHOLDER_RE.sub(_sub, self.text)


@dataclass
class LlmRequest:
    template_id: str
    bindings: dict = field(default_factory=dict)
    temperature: float = 0.0
    max_output_tokens: int = 1024


@dataclass
class LlmResponse:
    raw_text: str
    parsed: object = None
    input_tokens: int = 0
    output_tokens: int = 0


@dataclass
class ResponseSchema:
    """Required top-level fields and optional allowed value sets."""

    required: tuple
    allowed: dict = field(default_factory=dict)

    def validate(self, payload):
        if not isinstance(payload, dict):
            raise SchemaViolation("<root>", "payload is not an object")
        for name in self.required:
            if name not in payload:
                raise SchemaViolation(name, "missing required field")
        for name, values in self.allowed.items():
            if name in payload and payload[name] not in values:
                raise SchemaViolation(name, f"value {payload[name]!r} not in {sorted(values)}")
        return payload


def fingerprint(rendered_text: str, temperature: float, max_tokens: int) -> str:
    blob = json.dumps(
        {"text": rendered_text, "temperature": temperature, "max_tokens": max_tokens},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def extract_json(text: str):
    """Parse the first JSON object/array embedded in ``text``."""
    try:
        return json.loads(text)
    except (ValueError, TypeError):
        pass
    for opener, closer in (("{", "}"), ("[", "]")):
        start = text.find(opener)
        while start != -1:
            depth = 0
            for i in range(start, len(text)):
                ch = text[i]
                if ch == opener:
                    depth += 1
                elif ch == closer:
                    depth -= 1
                    if depth == 0:
                        try:
                            return json.loads(text[start : i + 1])
                        except ValueError:
                            break
            start = text.find(opener, start + 1)
    raise ParseFailure(f"no JSON payload found in response: {text[:200]!r}")


class ScriptedBackend:
    """Deterministic backend for tests and offline runs.

    Lookup order: fingerprint table, ``responder`` callable (gets the rendered
    request text), FIFO ``sequence``, then ``default``.
    """

    def __init__(self, by_fingerprint=None, responder=None, sequence=None, default=None):
        self.by_fingerprint = dict(by_fingerprint or {})
        self.responder = responder
        self.sequence = deque(sequence or [])
        self.default = default

    def generate(self, text, temperature, max_tokens):
        fp = fingerprint(text, temperature, max_tokens)
        if fp in self.by_fingerprint:
            return self.by_fingerprint[fp]
        if self.responder is not None:
            out = self.responder(text)
            if out is not None:
                return out
        if self.sequence:
            return self.sequence.popleft()
        if self.default is not None:
            return self.default
        raise ScriptMiss(fp, text)


class CassetteRecorder:
    """Wraps a backend and appends every interaction to a JSONL cassette."""

    def __init__(self, backend, path):
        self.backend = backend
        self.path = path
        self._lock = threading.Lock()

    def generate(self, text, temperature, max_tokens):
        response = self.backend.generate(text, temperature, max_tokens)
        fp = fingerprint(text, temperature, max_tokens)
        line = json.dumps(
            {"fp": fp, "request_text": text, "response_text": response},
            ensure_ascii=False,
        )
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return response


class CassetteBackend:
    """Replays a recorded cassette; repeated identical requests replay in order,
    holding the last recorded response once exhausted."""

    def __init__(self, path):
        self._by_fp = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._by_fp.setdefault(entry["fp"], deque()).append(entry["response_text"])

    def generate(self, text, temperature, max_tokens):
        fp = fingerprint(text, temperature, max_tokens)
        queue = self._by_fp.get(fp)
        if not queue:
            raise ScriptMiss(fp, text)
        if len(queue) > 1:
            return queue.popleft()
        return queue[0]


class TokenBucket:
    def __init__(self, rate_per_sec, capacity):
        self.rate = float(rate_per_sec)
        self.capacity = float(capacity)
        self.tokens = float(capacity)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class HttpBackend:
    """OpenAI-style chat-completion backend over HTTP."""

    def __init__(
        self,
        base_url,
        model,
        api_key_env="CLAIMCHECK_API_KEY",
        timeout=60.0,
        max_in_flight=4,
        rate_per_sec=2.0,
    ):
        import requests

        self._requests = requests
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._slots = threading.Semaphore(max_in_flight)
        self._bucket = TokenBucket(rate_per_sec, max(1, int(rate_per_sec)))

    def generate(self, text, temperature, max_tokens):
        key = os.environ.get(self.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": text}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        self._bucket.acquire()
        with self._slots:
            try:
                resp = self._requests.post(
                    f"{self.base_url}/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self.timeout,
                )
            except self._requests.Timeout as exc:
                raise TransportError(f"LLM request timed out: {exc}") from exc
            except self._requests.RequestException as exc:
                raise TransportError(f"LLM request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"LLM endpoint returned status {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"malformed LLM response body: {exc}") from exc


class LlmGateway:
    """Renders templates against a policy and talks to one backend.

    ``call_count`` counts every backend invocation, including structured-output
    repair retries.
    """

    def __init__(self, backend, policy):
        self.backend = backend
        self.policy = policy
        self.call_count = 0
        self.retry_count = 0

    def render(self, request: LlmRequest) -> str:
        template = self.policy.template(request.template_id)
        return template.render(request.bindings)

    def complete(self, request: LlmRequest, rendered=None) -> LlmResponse:
        text = rendered if rendered is not None else self.render(request)
        raw = self.backend.generate(text, request.temperature, request.max_output_tokens)
        self.call_count += 1
        return LlmResponse(
            raw_text=raw,
            input_tokens=len(text.split()),
            output_tokens=len(raw.split()),
        )

    def complete_structured(self, request: LlmRequest, schema: ResponseSchema):
        base = self.render(request)
        last_error = None
        for attempt in range(REPAIR_RETRIES + 1):
            if attempt == 0:
                text = base
            else:
                self.retry_count += 1
                text = (
                    f"{base}\n\n[repair attempt {attempt}] Your previous reply could not "
                    "be parsed. Respond with valid JSON only, matching the requested fields."
                )
            response = self.complete(request, rendered=text)
            try:
                payload = extract_json(response.raw_text)
                schema.validate(payload)
                return payload
            except ParseFailure as exc:
                last_error = exc
        raise ParseFailure(f"structured output failed after {REPAIR_RETRIES} retries: {last_error}")
