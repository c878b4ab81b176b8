import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

import pytest

RUNNER_FIXTURE = '''\
import json
import sys
import time


def add(a, b):
    return a + b


def echo(value):
    return value


def boom():
    raise RuntimeError("kaboom")


def sleepy(seconds):
    time.sleep(seconds)
    return "awake"


def big(n):
    return "x" * n


FUNCS = {"add": add, "echo": echo, "boom": boom, "sleepy": sleepy, "big": big}

for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    req = json.loads(line)
    try:
        result = FUNCS[req["function"]](**req["arguments"])
        resp = {"id": req["id"], "ok": True, "result": result}
    except Exception as exc:
        resp = {"id": req["id"], "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    sys.stdout.write(json.dumps(resp) + "\\n")
    sys.stdout.flush()
'''


@pytest.fixture(scope="session")
def runner_script(tmp_path_factory):
    """Stdio runner used as an executor fixture. This is test scaffolding, not
    the standalone runner package."""
    path = tmp_path_factory.mktemp("runner") / "fixture_runner.py"
    path.write_text(RUNNER_FIXTURE, encoding="utf-8")
    return path


class _StubHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def _respond(self, code, body):
        data = body.encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        parsed = urlsplit(self.path)
        params = dict(parse_qsl(parsed.query))
        route = parsed.path
        if route == "/ok":
            self._respond(200, json.dumps({"ok": True, "params": params}, sort_keys=True))
        elif route == "/add":
            self._respond(200, json.dumps({"sum": int(params["a"]) + int(params["b"])}))
        elif route == "/slow":
            time.sleep(float(params.get("s", "1")))
            self._respond(200, "{}")
        elif route == "/big":
            self._respond(200, "x" * int(params.get("n", "100000")))
        elif route.startswith("/item/"):
            self._respond(200, json.dumps({"item": route.rsplit("/", 1)[-1]}))
        else:
            self._respond(404, json.dumps({"error": "no such route"}))

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        body = json.loads(raw) if raw else {}
        parsed = urlsplit(self.path)
        if parsed.path == "/echo":
            self._respond(
                200,
                json.dumps(
                    {"body": body, "params": dict(parse_qsl(parsed.query))}, sort_keys=True
                ),
            )
        else:
            self._respond(404, json.dumps({"error": "no such route"}))


@pytest.fixture(scope="session")
def rest_stub():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
