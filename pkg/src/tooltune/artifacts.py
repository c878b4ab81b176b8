"""Deterministic serialization, digests, seed derivation, and atomic file writes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any

FORMAT_VERSION = 1


def canonical_json(value: Any) -> str:
    """Stable on-disk text form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(value, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


def compact_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def json_digest(value: Any) -> str:
    return hashlib.sha256(compact_json(value).encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stable_seed(*parts: Any) -> int:
    """Derive a reproducible sub-seed from tagged parts.

    Built-in hash() is salted per interpreter run, so derivation goes through
    sha256 of the joined textual parts instead.
    """
    tag = ":".join(str(part) for part in parts)
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "big")


def write_text_atomic(path: str | Path, text: str) -> None:
    """Write via a sibling temp file and rename, so a crash never leaves a
    half-written file under the final name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_json_atomic(path: str | Path, value: Any) -> None:
    write_text_atomic(path, canonical_json(value))


def read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)
