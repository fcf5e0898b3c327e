"""Language/vision model access: backends, structured-output parsing and retries."""

from __future__ import annotations

import ast
import base64
import hashlib
import io
import json
import os
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, TypeVar

from .prompts import ROLES

T = TypeVar("T")

DEFAULT_API_KEY_ENV = "COGNAV_API_KEY"


class GatewayError(Exception):
    """Any failure that should abort the current episode."""


class ScriptExhausted(GatewayError, LookupError):
    def __init__(self, episode_id: str, role: str, index: int):
        self.episode_id, self.role, self.index = episode_id, role, index
        super().__init__(f"no scripted response for {episode_id}/{role}/{index}")


class BackendUnavailable(GatewayError):
    pass


class MalformedOutput(GatewayError, ValueError):
    pass


class SchemaMismatch(GatewayError, ValueError):
    def __init__(self, role: str, problems: list[str]):
        self.role, self.problems = role, problems
        super().__init__(f"{role}: " + "; ".join(problems))


@dataclass(frozen=True)
class RoleRequest:
    role: str
    prompt: str
    image: Any = None
    episode_id: str = ""
    step_index: int = -1

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.image is not None and self.role != "perception":
            raise ValueError("only the perception role may carry an image")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"  # scripted | http | oracle
    endpoint: str | None = None
    model_name: str = ""
    timeout: float = 60.0
    max_retries: int = 2
    script_path: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV

    def validate(self) -> None:
        if self.kind == "scripted":
            if not self.script_path:
                raise ValueError("scripted backend requires script_path")
        elif self.kind == "http":
            if not self.endpoint:
                raise ValueError("http backend requires an endpoint")
            if not os.environ.get(self.api_key_env):
                raise ValueError(f"http backend requires the {self.api_key_env} environment variable")
        elif self.kind != "oracle":
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.max_retries < 0 or self.timeout <= 0:
            raise ValueError("max_retries must be >= 0 and timeout > 0")

    def to_dict(self) -> dict:
        # never serialize the credential itself, only where it comes from
        return {k: getattr(self, k) for k in
                ("kind", "endpoint", "model_name", "timeout", "max_retries", "script_path", "api_key_env")}


class Backend(Protocol):
    def complete(self, request: RoleRequest) -> str: ...


def script_key(episode_id: str, role: str, index: int) -> str:
    return f"{episode_id}/{role}/{index}"


class ScriptedBackend:
    """Canned responses keyed by episode, role and a per-role call counter.

    Counters live per episode so concurrent episodes never share a sequence.
    """

    def __init__(self, script: Mapping[str, str]):
        self.script = dict(script)
        self._counters: Counter = Counter()
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, request: RoleRequest) -> str:
        with self._lock:
            index = self._counters[(request.episode_id, request.role)]
            self._counters[(request.episode_id, request.role)] = index + 1
        key = script_key(request.episode_id, request.role, index)
        try:
            return self.script[key]
        except KeyError:
            raise ScriptExhausted(request.episode_id, request.role, index) from None

    def reset(self, episode_id: str) -> None:
        with self._lock:
            for k in [k for k in self._counters if k[0] == episode_id]:
                del self._counters[k]


class CallableBackend:
    """Wraps ``fn(request) -> str``; used for fixtures and script generation."""

    def __init__(self, fn: Callable[[RoleRequest], str]):
        self.fn = fn

    def complete(self, request: RoleRequest) -> str:
        return self.fn(request)


def _png_data_url(image: Any) -> str | None:
    depth = getattr(image, "depth", None)
    if depth is None:
        return None
    import numpy as np
    from PIL import Image

    vals = np.asarray(depth.values, dtype=float)
    scaled = np.clip(vals / max(depth.max_range, 1e-9), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray((255 * (1.0 - scaled)).astype("uint8"), mode="L").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


class HttpBackend:
    """Chat-completion style endpoint. Request/response bodies are kept for audit."""

    def __init__(self, config: BackendConfig, transport=None):
        import httpx

        config.validate()
        self.config = config
        self._httpx = httpx
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def _body(self, request: RoleRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.prompt}]
        url = _png_data_url(request.image) if request.image is not None else None
        if url:
            content.append({"type": "image_url", "image_url": {"url": url}})
        return {"model": self.config.model_name, "temperature": 0,
                "messages": [{"role": "user", "content": content}]}

    def complete(self, request: RoleRequest) -> str:
        return self.complete_audited(request)[0]

    def complete_audited(self, request: RoleRequest) -> tuple[str, dict]:
        """Reply text plus the request/response bodies, returned rather than stored so
        concurrent episodes sharing this backend never see each other's exchanges."""
        httpx = self._httpx
        body = self._body(request)
        headers = {"Authorization": f"Bearer {os.environ.get(self.config.api_key_env, '')}"}
        last: Exception | None = None
        for _ in range(self.config.max_retries + 1):
            try:
                resp = self._client.post(self.config.endpoint, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = BackendUnavailable(f"HTTP {resp.status_code}")
                    continue
                resp.raise_for_status()
                payload = resp.json()
                text = payload["choices"][0]["message"]["content"]
                if not isinstance(text, str):
                    raise ValueError("reply content is not text")
                return text, {"request": _audit_body(body), "response": payload}
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = exc
            except (httpx.HTTPStatusError, KeyError, IndexError, ValueError) as exc:
                raise BackendUnavailable(f"bad response from {self.config.endpoint}: {exc}") from exc
        raise BackendUnavailable(
            f"{self.config.endpoint} unavailable after {self.config.max_retries + 1} attempts: {last}")


def _audit_body(body: dict) -> dict:
    # image payloads are replaced by their digest to keep logs readable
    out = json.loads(json.dumps(body))
    for msg in out["messages"]:
        for part in msg["content"]:
            if part.get("type") == "image_url":
                data = part["image_url"]["url"].encode()
                part["image_url"]["url"] = "sha256:" + hashlib.sha256(data).hexdigest()
    return out


def make_backend(config: BackendConfig, **kwargs) -> Backend:
    config.validate()
    if config.kind == "scripted":
        return ScriptedBackend.from_file(config.script_path)
    if config.kind == "http":
        return HttpBackend(config, **kwargs)
    from .cognition import OracleVisionBackend

    return OracleVisionBackend(**kwargs)


# -- structured output ----------------------------------------------------------

_FENCE = re.compile(r"```[ \t]*json[^\n]*\n?(.*?)```", re.DOTALL | re.IGNORECASE)


def _first_balanced(text: str) -> str | None:
    start = None
    for i, ch in enumerate(text):
        if ch in "[{":
            start = i
            break
    if start is None:
        return None
    stack = []
    quote = None
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if quote:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == quote:
                quote = None
            continue
        if ch in "\"'":
            quote = ch
        elif ch in "[{":
            stack.append("]" if ch == "[" else "}")
        elif ch in "]}":
            if not stack or stack.pop() != ch:
                return None
            if not stack:
                return text[start:i + 1]
    return None


def _parse_value(snippet: str) -> Any:
    try:
        return json.loads(snippet)
    except json.JSONDecodeError:
        pass
    try:
        # python-literal replies (single quotes, True/False) show up in practice
        return ast.literal_eval(snippet.strip())
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        raise MalformedOutput(f"unparseable structured value: {snippet[:80]!r}") from None


def _require_str(obj: dict, key: str, problems: list[str], where: str = "") -> None:
    if key not in obj:
        problems.append(f"missing field {where}{key!r}")
    elif not isinstance(obj[key], str):
        problems.append(f"field {where}{key!r} must be a string")


def _check_object(role: str, value: Any, fields: tuple[str, ...]) -> None:
    if not isinstance(value, dict):
        raise SchemaMismatch(role, [f"expected an object, got {type(value).__name__}"])
    problems: list[str] = []
    for f in fields:
        _require_str(value, f, problems)
    if problems:
        raise SchemaMismatch(role, problems)


def _check_instruction_parser(value: Any) -> None:
    role = "instruction_parser"
    if not isinstance(value, list) or not value:
        raise SchemaMismatch(role, ["expected a non-empty array of sentences"])
    problems: list[str] = []
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            problems.append(f"item {i} is not an object")
            continue
        _require_str(item, "sub-instruction", problems, f"[{i}].")
        lm = item.get("landmark")
        if lm is None:
            problems.append(f"missing field [{i}].'landmark'")
        elif not isinstance(lm, list) or not all(isinstance(x, str) for x in lm):
            problems.append(f"field [{i}].'landmark' must be an array of strings")
    if problems:
        raise SchemaMismatch(role, problems)


def _check_subgoals(value: Any) -> None:
    if not isinstance(value, list) or not value:
        raise SchemaMismatch("subgoal_extractor", ["expected a non-empty array of subgoals"])
    if not all(isinstance(x, str) and x.strip() for x in value):
        raise SchemaMismatch("subgoal_extractor", ["every subgoal must be a non-empty string"])


def _check_attention(value: Any) -> None:
    if not isinstance(value, list):
        raise SchemaMismatch("attention", ["expected an array of queries"])
    problems: list[str] = []
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            problems.append(f"item {i} is not an object")
            continue
        _require_str(item, "landmark", problems, f"[{i}].")
        _require_str(item, "question", problems, f"[{i}].")
    if problems:
        raise SchemaMismatch("attention", problems)


def _check_judger(value: Any) -> None:
    if not isinstance(value, dict):
        raise SchemaMismatch("subgoal_judger", ["expected an object"])
    problems: list[str] = []
    _require_str(value, "subgoal", problems)
    _require_str(value, "reason", problems)
    if "achieved" not in value:
        problems.append("missing field 'achieved'")
    elif not isinstance(value["achieved"], bool):
        problems.append("field 'achieved' must be a boolean")
    if problems:
        raise SchemaMismatch("subgoal_judger", problems)


def _as_action_id(x: Any) -> int | None:
    if isinstance(x, bool):
        return None
    if isinstance(x, int):
        return x
    if isinstance(x, str) and x.strip().isdigit():
        return int(x.strip())
    return None


def _check_decision(value: Any) -> None:
    if not isinstance(value, dict):
        raise SchemaMismatch("decision", ["expected an object"])
    problems: list[str] = []
    _require_str(value, "thought", problems)
    probs = value.get("probabilities")
    if probs is None:
        problems.append("missing field 'probabilities'")
    elif not isinstance(probs, dict):
        problems.append("field 'probabilities' must be an object")
    else:
        for k, w in probs.items():
            if _as_action_id(k) is None:
                problems.append(f"probability key {k!r} is not an action id")
            if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
                problems.append(f"probability for {k!r} must be a non-negative number")
    if "selected_action" not in value:
        problems.append("missing field 'selected_action'")
    elif _as_action_id(value["selected_action"]) is None:
        problems.append("field 'selected_action' must be an action number")
    if problems:
        raise SchemaMismatch("decision", problems)


SCHEMAS: dict[str, Callable[[Any], None]] = {
    "instruction_parser": _check_instruction_parser,
    "subgoal_extractor": _check_subgoals,
    "attention": _check_attention,
    "perception": lambda v: _check_object("perception", v, ("overall", "details")),
    "imagination": lambda v: _check_object("imagination", v, ("state",)),
    "subgoal_judger": _check_judger,
    "step_memory": lambda v: _check_object("step_memory", v, ("step_memory",)),
    "subgoal_memory": lambda v: _check_object("subgoal_memory", v, ("subgoal_memory",)),
    "decision": _check_decision,
}


def extract_structured(raw: str, role: str | None = None) -> Any:
    """Parse the first ```json fence (or first balanced JSON value) and validate it for ``role``."""
    m = _FENCE.search(raw)
    snippet = m.group(1) if m else _first_balanced(raw)
    if snippet is None or not snippet.strip():
        raise MalformedOutput("no JSON value found in reply")
    try:
        value = _parse_value(snippet)
    except MalformedOutput:
        # a backtick run inside a string value ends the fence early; rescan quote-aware
        rescued = _first_balanced(raw[m.start(1):]) if m else None
        if rescued is None:
            raise
        value = _parse_value(rescued)
    if role is not None:
        SCHEMAS[role](value)
    return value


def serialize(value: Any) -> str:
    return "```json\n" + json.dumps(value, ensure_ascii=False, indent=2) + "\n```"


def action_id(x: Any) -> int | None:
    return _as_action_id(x)


# -- per-episode session --------------------------------------------------------

@dataclass
class Gateway:
    """Routes role requests for one episode and records every exchange."""

    text: Backend
    vision: Backend | None = None
    episode_id: str = ""
    malformed_retries: int = 2
    calls: Counter = field(default_factory=Counter)
    transcript: list[dict] = field(default_factory=list)
    step_index: int = -1
    # decisions whose selected_action was not the most probable one
    divergences: int = 0

    def backend_for(self, role: str) -> Backend:
        if role == "perception" and self.vision is not None:
            return self.vision
        return self.text

    def ask(self, role: str, prompt: str, parse: Callable[[Any], T], image: Any = None) -> T:
        """One logical call: query, extract, convert; retry malformed replies with the same prompt."""
        self.calls[role] += 1
        backend = self.backend_for(role)
        attempt = 0
        while True:
            req = RoleRequest(role, prompt, image, self.episode_id, self.step_index)
            audit = None
            if hasattr(backend, "complete_audited"):
                raw, audit = backend.complete_audited(req)
            else:
                raw = backend.complete(req)
            entry = {"role": role, "attempt": attempt, "prompt": prompt, "response": raw}
            if audit is not None:
                entry["http"] = audit
            self.transcript.append(entry)
            try:
                return parse(extract_structured(raw, role))
            except (MalformedOutput, SchemaMismatch) as exc:
                entry["error"] = str(exc)
                if attempt >= self.malformed_retries:
                    raise
                attempt += 1

    def drain(self) -> list[dict]:
        out, self.transcript = self.transcript, []
        return out
