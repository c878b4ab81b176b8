"""Uniform interface to completion backends (live chat-completion HTTP service or
scripted mock), prompt template rendering, and parsing of structured outputs."""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

import requests

ROLES = ("example_generator", "doc_generator", "task_model", "judge")

DEFAULT_TEMPLATE_DIR = Path(__file__).parent / "templates"

TEMPLATE_FILES = {
    "m1": "m1_invocation.txt",
    "m2": "m2_validity.txt",
    "m3": "m3_instruction.txt",
    "m4": "m4_answer.txt",
    "m5": "m5_quality.txt",
    "m6": "m6_example_reflection.txt",
    "m7": "m7_doc_revision.txt",
    "m8": "m8_doc_reflection.txt",
    "task_single_turn": "task_single_turn.txt",
    "react": "react.txt",
    "judge": "judge.txt",
}

ROLE_TEMPLATES = {
    "example_generator": frozenset({"m1", "m2", "m3", "m4", "m5", "m6"}),
    "doc_generator": frozenset({"m7", "m8"}),
    "task_model": frozenset({"task_single_turn", "react"}),
    "judge": frozenset({"judge"}),
}

_SLOT = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class GatewayError(Exception):
    pass


class TemplateError(GatewayError):
    """Unknown template, missing binding, or a role rendering a template it must not."""


class NoParseError(GatewayError):
    """No object matching the schema could be extracted; carries the raw text."""

    def __init__(self, text: str) -> None:
        snippet = text if len(text) <= 200 else text[:200] + "..."
        super().__init__(f"no schema-matching object in completion: {snippet!r}")
        self.text = text


class RangeViolationError(GatewayError):
    def __init__(self, name: str, value: Any, choices: tuple) -> None:
        super().__init__(f"field {name!r} must be one of {choices}, got {value!r}")
        self.field = name
        self.value = value


class BackendError(GatewayError):
    pass


class BackendRejectionError(BackendError):
    """The backend refused the request (non-retryable)."""


class ExhaustedRetriesError(BackendError):
    pass


class UnmatchedPromptError(GatewayError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # string | integer | number | object | any
    required: bool = True
    choices: tuple = ()


def _type_ok(kind: str, value: Any) -> bool:
    if kind == "string":
        return isinstance(value, str)
    if kind == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "object":
        return isinstance(value, dict)
    return True


@dataclass(frozen=True)
class OutputSchema:
    fields: tuple[FieldSpec, ...]

    def shape_matches(self, obj: Any) -> bool:
        if not isinstance(obj, dict):
            return False
        for spec in self.fields:
            if spec.name not in obj:
                if spec.required:
                    return False
                continue
            if not _type_ok(spec.kind, obj[spec.name]):
                return False
        return True

    def check(self, obj: dict[str, Any]) -> dict[str, Any]:
        for spec in self.fields:
            if spec.name in obj and spec.choices and obj[spec.name] not in spec.choices:
                raise RangeViolationError(spec.name, obj[spec.name], spec.choices)
        return obj


INVOCATION_SCHEMA = OutputSchema((FieldSpec("name", "string"), FieldSpec("parameters", "object")))
VALIDITY_SCHEMA = OutputSchema(
    (FieldSpec("err_code", "integer", choices=(-1, 0)), FieldSpec("analysis", "string", required=False))
)
INSTRUCTION_SCHEMA = OutputSchema((FieldSpec("instruction", "string"),))
QUALITY_SCHEMA = OutputSchema(
    (FieldSpec("score", "integer", choices=(1, 2, 3)), FieldSpec("analysis", "string", required=False))
)
DOC_REVISION_SCHEMA = OutputSchema((FieldSpec("description", "string"), FieldSpec("parameters", "object")))
VERDICT_SCHEMA = OutputSchema(
    (FieldSpec("verdict", "string", choices=("solved", "unsolved", "unsure")),)
)

TEMPLATE_SCHEMAS: dict[str, OutputSchema | None] = {
    "m1": INVOCATION_SCHEMA,
    "m2": VALIDITY_SCHEMA,
    "m3": INSTRUCTION_SCHEMA,
    "m4": None,
    "m5": QUALITY_SCHEMA,
    "m6": None,
    "m7": DOC_REVISION_SCHEMA,
    "m8": None,
    "task_single_turn": None,
    "react": None,
    "judge": VERDICT_SCHEMA,
}


@dataclass(frozen=True)
class MetaPromptTemplate:
    template_id: str
    body: str
    output_schema: OutputSchema | None = None


def load_template(template_id: str, directory: str | Path | None = None) -> MetaPromptTemplate:
    if template_id not in TEMPLATE_FILES:
        raise TemplateError(f"unknown template {template_id!r}")
    directory = Path(directory) if directory else DEFAULT_TEMPLATE_DIR
    body = (directory / TEMPLATE_FILES[template_id]).read_text(encoding="utf-8")
    return MetaPromptTemplate(template_id, body, TEMPLATE_SCHEMAS[template_id])


def load_templates(directory: str | Path | None = None) -> dict[str, MetaPromptTemplate]:
    return {tid: load_template(tid, directory) for tid in TEMPLATE_FILES}


def template_slots(body: str) -> list[str]:
    seen: list[str] = []
    for match in _SLOT.finditer(body):
        if match.group(1) not in seen:
            seen.append(match.group(1))
    return seen


def render_meta_prompt(template: MetaPromptTemplate, bindings: Mapping[str, Any]) -> str:
    missing = [slot for slot in template_slots(template.body) if slot not in bindings]
    if missing:
        raise TemplateError(
            f"template {template.template_id!r}: missing binding for slot(s) {missing}"
        )
    # single-pass substitution: slot markers inside bound values are left alone
    return _SLOT.sub(lambda m: str(bindings[m.group(1)]), template.body)


@dataclass
class Completion:
    text: str
    usage: dict[str, Any] | None = None
    backend_latency_ms: float = 0.0
    retries: int = 0


@dataclass
class BackendConfig:
    base_url: str
    model: str
    max_retries: int = 3
    backoff_s: float = 0.5
    request_timeout_s: float = 60.0
    call_count: int = 0


@dataclass
class MockRule:
    matcher: str | Callable[[str], bool] | None
    response: str | Callable[[str], str]

    def matches(self, prompt: str) -> bool:
        if self.matcher is None:
            return True
        if callable(self.matcher):
            return bool(self.matcher(prompt))
        return self.matcher in prompt

    def render(self, prompt: str) -> str:
        if callable(self.response):
            return self.response(prompt)
        return self.response


class MockBackend:
    """Deterministic scripted backend. Policies:

    first_match: answer by the first matching rule; unmatched prompts get the
        default, or raise when no default is configured.
    strict: as first_match but unmatched prompts always raise.
    sequential: consume rules in order, one per call; a rule with a matcher must
        match the prompt it is consumed by.
    """

    def __init__(
        self,
        rules: list[MockRule | tuple] | None = None,
        policy: str = "first_match",
        default: str | None = None,
    ) -> None:
        if policy not in ("first_match", "strict", "sequential"):
            raise ValueError(f"unknown mock policy {policy!r}")
        self.rules = [r if isinstance(r, MockRule) else MockRule(*r) for r in (rules or [])]
        if not self.rules and default is None:
            raise ValueError("mock script needs at least one rule or a default")
        self.policy = policy
        self.default = default
        self.calls: list[str] = []
        self.call_count = 0
        self._cursor = 0

    def respond(self, prompt: str) -> str:
        self.calls.append(prompt)
        self.call_count += 1
        if self.policy == "sequential":
            if self._cursor >= len(self.rules):
                if self.default is not None:
                    return self.default
                raise UnmatchedPromptError(
                    f"sequential script exhausted after {len(self.rules)} rules"
                )
            rule = self.rules[self._cursor]
            self._cursor += 1
            if not rule.matches(prompt):
                raise UnmatchedPromptError(
                    f"sequential rule {self._cursor - 1} does not match prompt: {prompt[:120]!r}"
                )
            return rule.render(prompt)
        for rule in self.rules:
            if rule.matches(prompt):
                return rule.render(prompt)
        if self.policy == "first_match" and self.default is not None:
            return self.default
        raise UnmatchedPromptError(f"no rule matches prompt: {prompt[:120]!r}")


def load_mock_script(path: str | Path) -> MockBackend:
    """Mock script file: {"policy": ..., "default": ..., "rules":
    [{"contains": text, "response": text}, ...]}."""
    with open(path, encoding="utf-8") as handle:
        data = json.load(handle)
    rules = []
    for i, entry in enumerate(data.get("rules", [])):
        if "response" not in entry:
            raise ValueError(f"mock script rule {i}: missing response")
        rules.append(MockRule(entry.get("contains"), entry["response"]))
    return MockBackend(rules, policy=data.get("policy", "first_match"), default=data.get("default"))


@dataclass
class GeneratorRef:
    role: str
    backend: BackendConfig | MockBackend
    temperature: float = 0.7
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {ROLES}")


def mock_backend(
    rules: list[MockRule | tuple] | None,
    role: str = "example_generator",
    policy: str = "first_match",
    default: str | None = None,
    temperature: float = 0.0,
) -> GeneratorRef:
    return GeneratorRef(role, MockBackend(rules, policy=policy, default=default), temperature)


def _completions_url(base_url: str) -> str:
    base = base_url.rstrip("/")
    if base.endswith("/chat/completions"):
        return base
    return base + "/chat/completions"


def complete(generator: GeneratorRef, prompt: str, sleep=time.sleep) -> Completion:
    backend = generator.backend
    start = time.monotonic()
    if isinstance(backend, MockBackend):
        text = backend.respond(prompt)
        return Completion(text, backend_latency_ms=(time.monotonic() - start) * 1000.0)
    url = _completions_url(backend.base_url)
    payload = {
        "model": backend.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": generator.temperature,
        "max_tokens": generator.max_tokens,
    }
    last_failure = "no attempt made"
    for attempt in range(backend.max_retries + 1):
        if attempt:
            sleep(backend.backoff_s * (2 ** (attempt - 1)))
        backend.call_count += 1
        try:
            response = requests.post(url, json=payload, timeout=backend.request_timeout_s)
        except requests.RequestException as exc:
            last_failure = f"transport failure: {exc}"
            continue
        if response.status_code >= 500:
            last_failure = f"HTTP {response.status_code}"
            continue
        if response.status_code >= 400:
            raise BackendRejectionError(
                f"backend rejected request: HTTP {response.status_code}: {response.text[:200]}"
            )
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRejectionError(f"malformed backend response: {exc}") from exc
        return Completion(
            text if isinstance(text, str) else "",
            usage=data.get("usage"),
            backend_latency_ms=(time.monotonic() - start) * 1000.0,
            retries=attempt,
        )
    raise ExhaustedRetriesError(
        f"backend {url} failed after {backend.max_retries + 1} attempts; last: {last_failure}"
    )


def check_role(generator: GeneratorRef, template: MetaPromptTemplate) -> None:
    allowed = ROLE_TEMPLATES.get(generator.role, frozenset())
    known = set().union(*ROLE_TEMPLATES.values())
    if template.template_id in known and template.template_id not in allowed:
        raise TemplateError(
            f"role {generator.role!r} may not render template {template.template_id!r}"
        )


def complete_template(
    generator: GeneratorRef, template: MetaPromptTemplate, bindings: Mapping[str, Any]
) -> Completion:
    check_role(generator, template)
    prompt = render_meta_prompt(template, bindings)
    return complete(generator, prompt)


def _balanced_end(text: str, start: int) -> int | None:
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
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
                return i
    return None


def iter_objects(text: str) -> Iterator[tuple[int, int, dict[str, Any]]]:
    """Yield (start, end, object) for every parseable brace-balanced JSON object,
    scanning left to right (outer objects before the objects nested in them)."""
    pos = text.find("{")
    while pos != -1:
        end = _balanced_end(text, pos)
        if end is not None:
            try:
                obj = json.loads(text[pos : end + 1])
            except json.JSONDecodeError:
                obj = None
            if isinstance(obj, dict):
                yield pos, end, obj
        pos = text.find("{", pos + 1)


def parse_structured_output(completion: Completion | str, schema: OutputSchema) -> dict[str, Any]:
    """Extract the first schema-matching object from the completion. Models wrap
    their output in prose or code fences, so the whole text is scanned rather than
    parsed as one document."""
    text = completion.text if isinstance(completion, Completion) else completion
    for _start, _end, obj in iter_objects(text):
        if schema.shape_matches(obj):
            return schema.check(obj)
    raise NoParseError(text)
