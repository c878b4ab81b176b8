"""Release criterion for the runner protocol, exercised against the real
process. Prints one PASS/FAIL line (run pytest with -s to watch it)."""

import json
import random
import time
from contextlib import contextmanager

from runner_helpers import request_line, run_session


@contextmanager
def criterion(name, limit_s):
    start = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {name}: FAIL ({time.perf_counter() - start:.3f}s)")
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < limit_s
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({elapsed:.3f}s, limit {limit_s:g}s)")
    assert ok, f"{name} took {elapsed:.3f}s, over the {limit_s:g}s budget"


def parse_protocol_line(line):
    obj = json.loads(line)
    assert isinstance(obj, dict), f"response is not an object: {line!r}"
    assert "id" in obj, f"response lacks an id: {line!r}"
    assert isinstance(obj.get("ok"), bool), f"response lacks a boolean ok: {line!r}"
    if obj["ok"]:
        assert "error" not in obj, f"ok response carries an error: {line!r}"
        assert set(obj) == {"id", "ok", "result"}, f"unexpected keys: {line!r}"
    else:
        assert isinstance(obj.get("error"), str) and obj["error"], f"failed response lacks error text: {line!r}"
        assert set(obj) == {"id", "ok", "error"}, f"unexpected keys: {line!r}"
    return obj


def fuzz_lines(count, seed):
    rng = random.Random(seed)
    lines = []
    expected_ok = {}
    for i in range(count):
        kind = rng.randrange(10)
        if kind == 0:
            rid = f"ok{i}"
            lines.append(request_line(rid, "add", {"a": i, "b": 1}))
            expected_ok[rid] = i + 1
        elif kind == 1:
            lines.append(json.dumps([i, "not", "an", "object"]).encode("utf-8"))
        elif kind == 2:
            lines.append(b" " * rng.randrange(0, 4))
        else:
            chunk = rng.randbytes(rng.randrange(1, 80))
            lines.append(chunk.replace(b"\n", b"_").replace(b"\r", b"_"))
    return lines, expected_ok


def test_runner_protocol(fixture_module, golden_missing_argument):
    with criterion("runner-protocol", 30.0):
        session = [
            request_line("round-trip", "add", {"a": 2, "b": 3}),
            request_line("missing-fn", "no_such_function", {}),
            request_line("missing-arg", "add", {"a": 2}),
            request_line("still-alive", "add", {"a": 20, "b": 22}),
        ]
        responses = [parse_protocol_line(l) for l in run_session(fixture_module, session)]
        assert responses[0] == {"id": "round-trip", "ok": True, "result": 5}
        assert responses[1]["ok"] is False
        assert "no_such_function" in responses[1]["error"]
        assert responses[2] == {"id": "missing-arg", "ok": False, "error": golden_missing_argument}
        assert responses[3] == {"id": "still-alive", "ok": True, "result": 42}

        lines, expected_ok = fuzz_lines(10_000, seed=20240801)
        raw = run_session(fixture_module, lines, deadline_s=25)
        parsed = [parse_protocol_line(l) for l in raw]
        non_blank = sum(
            1 for l in lines if l.decode("utf-8", errors="replace").strip()
        )
        assert len(parsed) == non_blank  # one response per request, none for blanks
        succeeded = {r["id"]: r["result"] for r in parsed if r["ok"]}
        assert succeeded == expected_ok  # embedded valid requests all answered correctly
