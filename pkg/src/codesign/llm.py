"""Provider-agnostic completion interface plus parsers that pull structured
morphology parameters and reward source out of free-form model responses.

Two providers exist: ``scripted_mock`` replays responses from a fixture file
(one ordered queue per request tag), which makes full engine runs
deterministic; ``http_chat`` speaks a chat-completion style HTTP API.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

from .errors import CodesignError
from .model import MorphologySchema, ProviderSpec

log = logging.getLogger(__name__)

REQUEST_TAGS = ("morph_propose", "reward_propose", "morph_refine", "reward_refine")


class ProviderError(CodesignError):
    """Network, auth or server failure that survived the retry budget."""


class FixtureExhausted(CodesignError):
    """The scripted mock ran out of responses for a tag: the fixture does
    not cover the run it was given (a test misconfiguration)."""


class ParseError(CodesignError):
    """A model response does not contain the required structured content."""


@dataclass(frozen=True)
class LlmRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 1.0
    max_retries: int = 2
    tag: str = "morph_propose"

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise CodesignError("prompts must be non-empty")
        if self.max_retries < 0:
            raise CodesignError("max_retries must be >= 0")
        if self.tag not in REQUEST_TAGS:
            raise CodesignError(f"unknown request tag {self.tag!r}")


class MockProvider:
    """Replays fixture responses per tag, in order.

    The fixture file is a JSON object mapping tag names to ordered lists of
    response strings. ``cursors`` tracks consumption and can be pre-set when
    resuming a persisted run.
    """

    kind = "scripted_mock"

    def __init__(self, fixture_path: str | Path):
        path = Path(fixture_path)
        if not path.is_file():
            raise CodesignError(f"fixture not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CodesignError(f"fixture is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise CodesignError("fixture must be an object mapping tag -> responses")
        self.fixture_path = str(path)
        self.responses: dict[str, list[str]] = {
            tag: list(raw.get(tag, ())) for tag in REQUEST_TAGS
        }
        unknown = set(raw) - set(REQUEST_TAGS)
        if unknown:
            raise CodesignError(f"fixture has unknown tags: {sorted(unknown)}")
        self.cursors: dict[str, int] = {tag: 0 for tag in REQUEST_TAGS}

    def set_cursors(self, cursors: dict[str, int]) -> None:
        for tag, n in cursors.items():
            self.cursors[tag] = int(n)

    def complete(self, request: LlmRequest) -> str:
        queue = self.responses[request.tag]
        i = self.cursors[request.tag]
        if i >= len(queue):
            raise FixtureExhausted(
                f"fixture has no response #{i + 1} for tag {request.tag!r}"
            )
        self.cursors[request.tag] = i + 1
        return queue[i]


class HttpChatProvider:
    """Chat-completion style HTTP client. The API key is read from the
    environment variable named in the provider settings; requests are
    retried with a short backoff before giving up."""

    kind = "http_chat"

    def __init__(self, endpoint: str, model: str, api_key_env: str = "CODESIGN_LLM_API_KEY",
                 timeout: float = 120.0, backoff: float = 2.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.backoff = backoff

    def complete(self, request: LlmRequest) -> str:
        import requests

        key = os.environ.get(self.api_key_env)
        if not key:
            raise ProviderError(f"auth: environment variable {self.api_key_env!r} not set")
        payload = {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
        }
        headers = {"Authorization": f"Bearer {key}"}
        last_error = None
        for attempt in range(request.max_retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if resp.status_code in (401, 403):
                    raise ProviderError(f"auth: provider returned {resp.status_code}")
                resp.raise_for_status()
                body = resp.json()
                return body["choices"][0]["message"]["content"]
            except ProviderError:
                raise
            except Exception as exc:  # network / schema errors are retryable
                last_error = exc
                log.warning("provider attempt %d failed: %s", attempt + 1, exc)
                if attempt < request.max_retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise ProviderError(f"provider failed after retries: {last_error}")


def make_provider(spec: ProviderSpec):
    if spec.kind == "scripted_mock":
        return MockProvider(spec.fixture_path)
    return HttpChatProvider(spec.endpoint, spec.model, spec.api_key_env)


class RecordingProvider:
    """Wraps a provider and captures every request; used by tests to verify
    prompt construction."""

    def __init__(self, inner):
        self.inner = inner
        self.kind = inner.kind
        self.captured: list[LlmRequest] = []

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def complete(self, request: LlmRequest) -> str:
        self.captured.append(request)
        return self.inner.complete(request)


def complete(provider, request: LlmRequest) -> str:
    """Raw completion via the given provider object."""
    return provider.complete(request)


# ----------------------------------------------------------- extraction

# A fenced block: optional single-line info string after the opening fence,
# then the body. Inline fences (```x```) have no info string.
_FENCE_RE = re.compile(r"```(?:[ \t]*[^\n`]*\n)?(.*?)```", re.DOTALL)

_PARAM_LINE_RE = re.compile(
    r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[:=]\s*([^\s].*?)\s*$"
)

_NUMBER_RE = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")


def _last_fenced_block(response: str) -> str | None:
    blocks = _FENCE_RE.findall(response)
    if not blocks:
        return None
    return blocks[-1]


def extract_params_block(response: str, schema: MorphologySchema) -> dict[str, float]:
    """Parse ``name: number`` lines out of the last fenced block (or, absent
    fences, the whole response). Prose is tolerated; a schema parameter with
    a non-numeric value, or any missing parameter, is a ParseError."""
    block = _last_fenced_block(response)
    text = block if block is not None else response
    wanted = set(schema.param_names)
    values: dict[str, float] = {}
    for line in text.splitlines():
        m = _PARAM_LINE_RE.match(line)
        if not m:
            continue
        name, raw = m.group(1), m.group(2)
        if name not in wanted:
            continue
        if not _NUMBER_RE.match(raw):
            raise ParseError(f"parameter {name!r} has non-numeric value {raw!r}")
        values[name] = float(raw)
    missing = [n for n in schema.param_names if n not in values]
    if missing:
        raise ParseError(f"response lacks parameter(s): {', '.join(missing)}")
    return values


def extract_code_block(response: str) -> str:
    """Return the content of the last fenced code block, or the whole
    trimmed response when no fences are present."""
    block = _last_fenced_block(response)
    text = block if block is not None else response
    text = text.strip()
    if not text:
        raise ParseError("empty code extraction")
    return text


def render_params_block(values: dict[str, float], schema: MorphologySchema) -> str:
    """Inverse of extract_params_block for well-formed maps: a fenced block
    with one ``name: value`` line per schema parameter, in schema order."""
    lines = [f"{name}: {values[name]!r}" for name in schema.param_names]
    return "```\n" + "\n".join(lines) + "\n```"


def render_code_block(source: str) -> str:
    return "```\n" + source.rstrip("\n") + "\n```"
