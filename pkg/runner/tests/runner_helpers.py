"""Process-level drivers shared by the runner tests."""

import json
import subprocess
import sys


def runner_command(module, timeout=None):
    command = [sys.executable, "-m", "toolrunner", "--module", str(module)]
    if timeout is not None:
        command += ["--timeout", str(timeout)]
    return command


def run_session(module, lines, timeout=None, deadline_s=60):
    """Feed raw request lines to one runner process and return its stdout lines.

    communicate() drains stdout while stdin is still being written, so large
    sessions cannot deadlock on a full pipe."""
    payload = b"".join(line + b"\n" for line in lines)
    proc = subprocess.run(
        runner_command(module, timeout),
        input=payload,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        timeout=deadline_s,
    )
    assert proc.returncode == 0, proc.stderr.decode("utf-8", errors="replace")
    text = proc.stdout.decode("utf-8")
    assert text == "" or text.endswith("\n")
    # split on the protocol's framing byte only, not on unicode line breaks
    return text.split("\n")[:-1] if text else []


def request_line(rid, function, arguments):
    return json.dumps({"id": rid, "function": function, "arguments": arguments}).encode("utf-8")
