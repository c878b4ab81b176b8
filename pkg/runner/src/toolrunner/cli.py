"""Request loop for the stdio tool protocol.

Request lines look like {"id": ..., "function": name, "arguments": {...}} and
every request gets exactly one response line, {"id": ..., "ok": bool} plus
"result" or "error", in request order with the id echoed verbatim. Bad input of
any kind becomes an error response; the loop only ends when stdin does."""

from __future__ import annotations

import argparse
import importlib.util
import inspect
import json
import logging
import signal
import sys
from pathlib import Path
from types import ModuleType
from typing import Any, BinaryIO, Callable, TextIO

log = logging.getLogger("toolrunner")


class RunnerConfigError(ValueError):
    """Module path that cannot be imported."""


class CallTimeout(Exception):
    """Raised inside a served call when it exceeds the wall-clock limit."""


def load_module(path: str | Path) -> ModuleType:
    path = Path(path)
    spec = importlib.util.spec_from_file_location(path.stem, path)
    if spec is None or spec.loader is None:
        raise RunnerConfigError(f"cannot import {path}")
    module = importlib.util.module_from_spec(spec)
    try:
        spec.loader.exec_module(module)
    except FileNotFoundError as exc:
        raise RunnerConfigError(f"cannot import {path}: {exc}") from exc
    return module


def collect_functions(modules: list[ModuleType]) -> dict[str, Callable[..., Any]]:
    """Public functions defined in the modules themselves; imports are not served."""
    functions: dict[str, Callable[..., Any]] = {}
    for module in modules:
        for name, value in vars(module).items():
            if name.startswith("_") or not inspect.isfunction(value):
                continue
            if value.__module__ != module.__name__:
                continue
            if name in functions:
                log.warning("function %r redefined by %s, keeping the later one", name, module.__name__)
            functions[name] = value
    return functions


def call_with_timeout(fn: Callable[..., Any], arguments: dict[str, Any], timeout_s: float) -> Any:
    # SIGALRM keeps the limit inside this process; fine because the loop is
    # single-threaded and the platform is POSIX
    def on_alarm(signum: int, frame: Any) -> None:
        raise CallTimeout(f"call exceeded {timeout_s:g}s")

    previous = signal.signal(signal.SIGALRM, on_alarm)
    signal.setitimer(signal.ITIMER_REAL, timeout_s)
    try:
        return fn(**arguments)
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, previous)


def run_function(
    functions: dict[str, Callable[..., Any]], request: dict[str, Any], timeout_s: float
) -> dict[str, Any]:
    rid = request.get("id")
    name = request.get("function")
    if not isinstance(name, str) or not name:
        return {"id": rid, "ok": False, "error": f"request names no function: {name!r}"}
    arguments = request.get("arguments", {})
    if not isinstance(arguments, dict):
        return {
            "id": rid,
            "ok": False,
            "error": f"arguments must be a map, got {type(arguments).__name__}",
        }
    fn = functions.get(name)
    if fn is None:
        return {"id": rid, "ok": False, "error": f"unknown function {name!r}"}
    try:
        result = call_with_timeout(fn, arguments, timeout_s)
    except (Exception, SystemExit) as exc:
        return {"id": rid, "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return {"id": rid, "ok": True, "result": result}


# json leaves these line-separator code points unescaped; a response must stay
# one physical line no matter what text it carries
_LINE_BREAK_ESCAPES = {0x85: "\\u0085", 0x2028: "\\u2028", 0x2029: "\\u2029"}


def response_line(response: dict[str, Any]) -> str:
    try:
        text = json.dumps(response, ensure_ascii=False)
    except (TypeError, ValueError):
        # the id came off the wire, so only "result" can be unserializable
        fallback = {
            "id": response.get("id"),
            "ok": False,
            "error": f"result of type {type(response.get('result')).__name__} is not serializable",
        }
        text = json.dumps(fallback, ensure_ascii=False)
    return text.translate(_LINE_BREAK_ESCAPES)


def serve(
    functions: dict[str, Callable[..., Any]],
    stdin: BinaryIO,
    stdout: TextIO,
    timeout_s: float,
) -> None:
    for raw in stdin:
        line = raw.decode("utf-8", errors="replace").strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            response = {"id": None, "ok": False, "error": f"unparseable request ({exc}): {line}"}
        else:
            if isinstance(request, dict):
                response = run_function(functions, request, timeout_s)
            else:
                response = {"id": None, "ok": False, "error": f"request must be an object: {line}"}
        stdout.write(response_line(response) + "\n")
        stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="runner",
        description="Serve the public functions of python files over stdin/stdout, "
        "one JSON request and one JSON response per line.",
    )
    parser.add_argument(
        "--module",
        action="append",
        required=True,
        dest="modules",
        metavar="PATH",
        help="python file whose public functions become callable (repeatable; later files win name clashes)",
    )
    parser.add_argument(
        "--timeout",
        type=float,
        default=30.0,
        help="wall-clock limit per call in seconds (default 30)",
    )
    args = parser.parse_args(argv)
    if args.timeout <= 0:
        parser.error("--timeout must be positive")
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        modules = [load_module(p) for p in args.modules]
    except Exception as exc:
        log.error("%s", exc)
        return 1
    functions = collect_functions(modules)
    log.info("serving %d function(s): %s", len(functions), ", ".join(sorted(functions)) or "(none)")
    serve(functions, sys.stdin.buffer, sys.stdout, args.timeout)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
