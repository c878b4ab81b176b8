"""Runs tool invocations against REST endpoints or subprocess runners.

Tool failures never raise: they come back as a ToolOutput with a non-ok status so
the pipeline can observe and reflect on them. Only configuration problems raise."""

from __future__ import annotations

import json
import re
import subprocess
import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Queue
from typing import Any

import requests

from .registry import RestBinding, SubprocessBinding, ToolRegistry, RegistryError

STATUS_OK = "ok"
STATUS_TOOL_ERROR = "tool_error"
STATUS_TRANSPORT_ERROR = "transport_error"
STATUS_TIMEOUT = "timeout"
STATUSES = (STATUS_OK, STATUS_TOOL_ERROR, STATUS_TRANSPORT_ERROR, STATUS_TIMEOUT)

TRUNCATION_MARKER = "...[truncated]"

_URL_SLOT = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ExecutorConfigError(ValueError):
    """Unresolvable tool, malformed binding, or bad limits."""


@dataclass(frozen=True)
class Invocation:
    tool_id: str
    arguments: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ToolOutput:
    status: str
    payload: str = ""
    error_detail: str | None = None
    elapsed_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == STATUS_OK and self.error_detail is not None:
            raise ValueError("ok output must not carry error_detail")
        if self.status != STATUS_OK and not self.error_detail:
            raise ValueError(f"{self.status} output must carry error_detail")
        if self.elapsed_ms < 0:
            raise ValueError("elapsed_ms must be non-negative")


@dataclass(frozen=True)
class ExecutionLimits:
    timeout_s: float = 30.0
    max_payload_bytes: int = 16384

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ExecutorConfigError("timeout_s must be positive")
        if self.max_payload_bytes <= 0:
            raise ExecutorConfigError("max_payload_bytes must be positive")


def truncate_payload(text: str, cap: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= cap:
        return text
    return raw[:cap].decode("utf-8", errors="ignore") + TRUNCATION_MARKER


class TokenBucket:
    """At most `rate` acquisitions per second, with burst capacity `rate`."""

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep) -> None:
        if rate <= 0:
            raise ExecutorConfigError("rate must be positive")
        self._rate = rate
        self._capacity = rate
        self._tokens = rate
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self._capacity, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            self._sleep(wait)


def _scalar(value: Any) -> bool:
    return isinstance(value, (str, int, float, bool)) or value is None


def _query_text(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if _scalar(value):
        return str(value)
    return json.dumps(value, ensure_ascii=False, sort_keys=True)


class _RunnerClient:
    """One persistent subprocess speaking the newline-delimited stdio protocol."""

    def __init__(self, command: tuple[str, ...]) -> None:
        self._proc = subprocess.Popen(
            list(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        self._lines: Queue[str | None] = Queue()
        self._next_id = 0
        self._lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def alive(self) -> bool:
        return self._proc.poll() is None

    def request(self, function: str, arguments: dict[str, Any], timeout_s: float) -> tuple[str, str, Any]:
        """Returns (status, error_detail, result). status is a STATUSES member."""
        with self._lock:
            self._next_id += 1
            rid = str(self._next_id)
            message = json.dumps(
                {"id": rid, "function": function, "arguments": arguments}, ensure_ascii=False
            )
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.write(message + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                return STATUS_TRANSPORT_ERROR, f"runner unreachable: {exc}", None
            try:
                line = self._lines.get(timeout=timeout_s)
            except Empty:
                self.close()
                return STATUS_TIMEOUT, f"no response from runner within {timeout_s}s", None
            if line is None:
                return STATUS_TRANSPORT_ERROR, "runner closed its output stream", None
            try:
                response = json.loads(line)
            except json.JSONDecodeError as exc:
                return STATUS_TRANSPORT_ERROR, f"malformed runner response: {exc}", None
            if not isinstance(response, dict) or response.get("id") != rid:
                return STATUS_TRANSPORT_ERROR, f"runner response id mismatch: {line.strip()!r}", None
            if response.get("ok"):
                return STATUS_OK, "", response.get("result")
            return STATUS_TOOL_ERROR, str(response.get("error", "unknown tool error")), None

    def close(self) -> None:
        try:
            self._proc.kill()
        except OSError:
            pass


class ToolExecutor:
    """Executes invocations for tools in one registry.

    Safe for concurrent use; holds only subprocess handles and rate-limit state.
    """

    def __init__(
        self,
        registry: ToolRegistry,
        limits: ExecutionLimits | None = None,
        rate_limit_per_s: float | None = None,
        clock=time.monotonic,
        sleep=time.sleep,
    ) -> None:
        self._registry = registry
        self._limits = limits or ExecutionLimits()
        self._clock = clock
        self._sleep = sleep
        self._rate = rate_limit_per_s
        self._buckets: dict[str, TokenBucket] = {}
        self._clients: dict[tuple[str, ...], _RunnerClient] = {}
        self._lock = threading.Lock()
        self.call_count = 0

    def __enter__(self) -> "ToolExecutor":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    def close(self) -> None:
        with self._lock:
            for client in self._clients.values():
                client.close()
            self._clients.clear()

    def _bucket(self, tool_id: str) -> TokenBucket | None:
        if self._rate is None:
            return None
        with self._lock:
            if tool_id not in self._buckets:
                self._buckets[tool_id] = TokenBucket(self._rate, self._clock, self._sleep)
            return self._buckets[tool_id]

    def execute(self, invocation: Invocation) -> ToolOutput:
        try:
            spec = self._registry.get(invocation.tool_id)
        except RegistryError as exc:
            raise ExecutorConfigError(str(exc)) from exc
        bucket = self._bucket(invocation.tool_id)
        if bucket is not None:
            bucket.acquire()
        with self._lock:
            self.call_count += 1
        start = self._clock()
        if isinstance(spec.executor_binding, RestBinding):
            output = self.execute_rest(spec.executor_binding, invocation.arguments)
        else:
            output = self.execute_subprocess(spec.executor_binding, invocation.arguments)
        elapsed = max(0.0, (self._clock() - start) * 1000.0)
        return ToolOutput(output.status, output.payload, output.error_detail, elapsed)

    def execute_rest(self, binding: RestBinding, arguments: dict[str, Any]) -> ToolOutput:
        url = binding.url
        path_names = set(_URL_SLOT.findall(url))
        params: dict[str, str] = {}
        body: dict[str, Any] = {}
        for name, value in arguments.items():
            where = binding.placement.get(name)
            if where is None:
                if name in path_names:
                    where = "path"
                elif _scalar(value):
                    where = "query"
                else:
                    where = "body"
            if where == "path":
                url = url.replace("{" + name + "}", requests.utils.quote(_query_text(value), safe=""))
            elif where == "query":
                params[name] = _query_text(value)
            else:
                body[name] = value
        unresolved = _URL_SLOT.findall(url)
        if unresolved:
            raise ExecutorConfigError(f"unbound path parameters in url: {unresolved}")
        try:
            response = requests.request(
                binding.method,
                url,
                params=params or None,
                json=body or None,
                timeout=self._limits.timeout_s,
            )
        except requests.Timeout:
            return ToolOutput(
                STATUS_TIMEOUT, "", f"no response within {self._limits.timeout_s}s from {url}"
            )
        except requests.ConnectionError as exc:
            return ToolOutput(STATUS_TRANSPORT_ERROR, "", f"connection failed: {exc}")
        except requests.RequestException as exc:
            return ToolOutput(STATUS_TRANSPORT_ERROR, "", f"request failed: {exc}")
        payload = truncate_payload(response.text, self._limits.max_payload_bytes)
        if 200 <= response.status_code < 300:
            return ToolOutput(STATUS_OK, payload)
        return ToolOutput(
            STATUS_TOOL_ERROR, payload, f"HTTP {response.status_code} {response.reason}"
        )

    def execute_subprocess(self, binding: SubprocessBinding, arguments: dict[str, Any]) -> ToolOutput:
        with self._lock:
            client = self._clients.get(binding.command)
            if client is None or not client.alive():
                try:
                    client = _RunnerClient(binding.command)
                except OSError as exc:
                    raise ExecutorConfigError(f"cannot start runner {binding.command}: {exc}") from exc
                self._clients[binding.command] = client
        status, detail, result = client.request(binding.function, arguments, self._limits.timeout_s)
        if status != STATUS_OK:
            # drop a broken client so the next call starts fresh
            if status in (STATUS_TIMEOUT, STATUS_TRANSPORT_ERROR):
                with self._lock:
                    if self._clients.get(binding.command) is client:
                        del self._clients[binding.command]
                client.close()
            return ToolOutput(status, "", detail)
        payload = result if isinstance(result, str) else json.dumps(result, ensure_ascii=False)
        return ToolOutput(STATUS_OK, truncate_payload(payload, self._limits.max_payload_bytes))


def execute(
    registry: ToolRegistry, invocation: Invocation, limits: ExecutionLimits | None = None
) -> ToolOutput:
    """One-shot convenience wrapper around ToolExecutor."""
    with ToolExecutor(registry, limits) as executor:
        return executor.execute(invocation)
