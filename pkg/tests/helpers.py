"""Builders shared across test modules."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from tooltune.registry import (
    ParameterDoc,
    RestBinding,
    SubprocessBinding,
    ToolDocumentation,
    ToolRegistry,
    ToolSpec,
)


def make_doc(
    params: tuple[tuple[str, str, str, bool], ...] = (
        ("a", "integer", "first addend", True),
        ("b", "integer", "second addend", True),
    ),
    description: str = "Adds two numbers.",
    version_tag: int = 0,
) -> ToolDocumentation:
    return ToolDocumentation(
        general_description=description,
        parameters=tuple(ParameterDoc(*p) for p in params),
        version_tag=version_tag,
    )


def rest_tool(
    name: str,
    url: str,
    method: str = "GET",
    placement: dict[str, str] | None = None,
    doc: ToolDocumentation | None = None,
) -> ToolSpec:
    return ToolSpec(
        tool_id=name,
        name=name,
        executor_binding=RestBinding(method=method, url=url, placement=placement or {}),
        documentation=doc if doc is not None else make_doc(),
    )


def sub_tool(
    name: str,
    command: tuple[str, ...],
    function: str,
    doc: ToolDocumentation | None = None,
) -> ToolSpec:
    return ToolSpec(
        tool_id=name,
        name=name,
        executor_binding=SubprocessBinding(command=command, function=function),
        documentation=doc if doc is not None else make_doc(),
    )


def make_registry(*tools: ToolSpec) -> ToolRegistry:
    return ToolRegistry(tuple(tools))


def registry_entry(
    name: str,
    executor: dict[str, Any],
    description: str = "Adds two numbers.",
    properties: dict[str, Any] | None = None,
    required: list[str] | None = None,
    optional: list[str] | None = None,
) -> dict[str, Any]:
    if properties is None:
        properties = {
            "a": {"type": "integer", "description": "first addend"},
            "b": {"type": "integer", "description": "second addend"},
        }
        required = ["a", "b"]
    return {
        "name": name,
        "description": description,
        "parameters": {
            "properties": properties,
            "required": required or [],
            "optional": optional or [],
        },
        "executor": executor,
    }


def write_registry_file(path: Path, entries: list[dict[str, Any]]) -> Path:
    path.write_text(json.dumps({"tools": entries}, indent=2) + "\n", encoding="utf-8")
    return path
