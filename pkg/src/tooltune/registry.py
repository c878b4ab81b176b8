"""Tool specifications and documentation: loading, validation, serialization, and
controlled corruption of parameter descriptions for robustness experiments."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator

from .artifacts import stable_seed, write_text_atomic

PLACEMENTS = ("query", "body", "path")


class RegistryError(ValueError):
    """A registry document failed to load or validate."""


@dataclass(frozen=True)
class ParameterDoc:
    name: str
    type_label: str = "string"
    description: str = ""
    is_required: bool = False

    def __post_init__(self) -> None:
        if not self.name:
            raise RegistryError("parameter name must be non-empty")


@dataclass(frozen=True)
class ToolDocumentation:
    general_description: str = ""
    parameters: tuple[ParameterDoc, ...] = ()
    version_tag: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "parameters", tuple(self.parameters))
        seen: set[str] = set()
        for param in self.parameters:
            if param.name in seen:
                raise RegistryError(f"duplicate parameter name {param.name!r}")
            seen.add(param.name)
        if self.version_tag < 0:
            raise RegistryError("version_tag must be non-negative")

    @property
    def required_names(self) -> frozenset[str]:
        return frozenset(p.name for p in self.parameters if p.is_required)

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.parameters)


@dataclass(frozen=True)
class RestBinding:
    method: str
    url: str
    placement: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.method:
            raise RegistryError("rest binding needs a method")
        if not self.url:
            raise RegistryError("rest binding needs a url")
        for name, where in self.placement.items():
            if where not in PLACEMENTS:
                raise RegistryError(
                    f"placement for {name!r} must be one of {PLACEMENTS}, got {where!r}"
                )


@dataclass(frozen=True)
class SubprocessBinding:
    command: tuple[str, ...]
    function: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "command", tuple(self.command))
        if not self.command:
            raise RegistryError("subprocess binding needs a command")
        if not self.function:
            raise RegistryError("subprocess binding needs a function name")


@dataclass(frozen=True)
class ToolSpec:
    tool_id: str
    name: str
    executor_binding: RestBinding | SubprocessBinding
    documentation: ToolDocumentation

    def __post_init__(self) -> None:
        if not self.tool_id:
            raise RegistryError("tool_id must be non-empty")


@dataclass(frozen=True)
class ToolRegistry:
    tools: tuple[ToolSpec, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tools", tuple(self.tools))
        seen: set[str] = set()
        for tool in self.tools:
            if tool.tool_id in seen:
                raise RegistryError(f"duplicate tool_id {tool.tool_id!r}")
            seen.add(tool.tool_id)

    def __len__(self) -> int:
        return len(self.tools)

    def __iter__(self) -> Iterator[ToolSpec]:
        return iter(self.tools)

    def ids(self) -> tuple[str, ...]:
        return tuple(t.tool_id for t in self.tools)

    def get(self, tool_id: str) -> ToolSpec:
        for tool in self.tools:
            if tool.tool_id == tool_id:
                return tool
        raise RegistryError(f"unknown tool_id {tool_id!r}")


def _reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    data: dict[str, Any] = {}
    for key, value in pairs:
        if key in data:
            raise RegistryError(f"duplicate key {key!r} in object")
        data[key] = value
    return data


def _expect(value: Any, kind: type, path: str) -> Any:
    if not isinstance(value, kind):
        raise RegistryError(f"{path}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_parameters(block: Any, path: str) -> tuple[ParameterDoc, ...]:
    block = _expect(block, dict, path)
    properties = _expect(block.get("properties", {}), dict, f"{path}.properties")
    required = _expect(block.get("required", []), list, f"{path}.required")
    optional = _expect(block.get("optional", []), list, f"{path}.optional")
    for label, names in (("required", required), ("optional", optional)):
        for i, name in enumerate(names):
            _expect(name, str, f"{path}.{label}[{i}]")
            if name not in properties:
                raise RegistryError(f"{path}.{label}: unknown parameter {name!r}")
    overlap = set(required) & set(optional)
    if overlap:
        raise RegistryError(f"{path}: parameters both required and optional: {sorted(overlap)}")
    params = []
    for name, info in properties.items():
        info = _expect(info, dict, f"{path}.properties.{name}")
        params.append(
            ParameterDoc(
                name=name,
                type_label=_expect(info.get("type", "string"), str, f"{path}.properties.{name}.type"),
                description=_expect(info.get("description", ""), str, f"{path}.properties.{name}.description"),
                is_required=name in required,
            )
        )
    return tuple(params)


def _parse_binding(block: Any, path: str) -> RestBinding | SubprocessBinding:
    block = _expect(block, dict, path)
    kind = block.get("kind")
    if kind == "rest":
        placement = _expect(block.get("placement", {}), dict, f"{path}.placement")
        return RestBinding(
            method=_expect(block.get("method", "GET"), str, f"{path}.method"),
            url=_expect(block.get("url", ""), str, f"{path}.url"),
            placement={k: _expect(v, str, f"{path}.placement.{k}") for k, v in placement.items()},
        )
    if kind == "subprocess":
        command = _expect(block.get("command", []), list, f"{path}.command")
        return SubprocessBinding(
            command=tuple(_expect(c, str, f"{path}.command[{i}]") for i, c in enumerate(command)),
            function=_expect(block.get("function", ""), str, f"{path}.function"),
        )
    raise RegistryError(f"{path}.kind: expected 'rest' or 'subprocess', got {kind!r}")


def parse_registry(text: str, source: str = "<string>") -> ToolRegistry:
    try:
        data = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except RegistryError as exc:
        raise RegistryError(f"{source}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RegistryError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    data = _expect(data, dict, source)
    tools_block = _expect(data.get("tools", []), list, f"{source}: tools")
    tools = []
    for i, entry in enumerate(tools_block):
        path = f"{source}: tools[{i}]"
        entry = _expect(entry, dict, path)
        name = _expect(entry.get("name", ""), str, f"{path}.name")
        if not name:
            raise RegistryError(f"{path}.name: must be non-empty")
        documentation = ToolDocumentation(
            general_description=_expect(entry.get("description", ""), str, f"{path}.description"),
            parameters=_parse_parameters(entry.get("parameters", {}), f"{path}.parameters"),
        )
        binding_block = entry.get("executor")
        if binding_block is None:
            raise RegistryError(f"{path}: missing executor block")
        binding = _parse_binding(binding_block, f"{path}.executor")
        tools.append(ToolSpec(tool_id=name, name=name, executor_binding=binding, documentation=documentation))
    return ToolRegistry(tuple(tools))


def load_registry(path: str | Path) -> ToolRegistry:
    path = Path(path)
    return parse_registry(path.read_text(encoding="utf-8"), source=str(path))


def doc_to_dict(doc: ToolDocumentation) -> dict[str, Any]:
    return {
        "description": doc.general_description,
        "parameters": {
            "properties": {
                p.name: {"type": p.type_label, "description": p.description} for p in doc.parameters
            },
            "required": [p.name for p in doc.parameters if p.is_required],
            "optional": [p.name for p in doc.parameters if not p.is_required],
        },
        "version_tag": doc.version_tag,
    }


def doc_from_dict(data: dict[str, Any], source: str = "<doc>") -> ToolDocumentation:
    return ToolDocumentation(
        general_description=_expect(data.get("description", ""), str, f"{source}.description"),
        parameters=_parse_parameters(data.get("parameters", {}), f"{source}.parameters"),
        version_tag=_expect(data.get("version_tag", 0), int, f"{source}.version_tag"),
    )


def _binding_to_dict(binding: RestBinding | SubprocessBinding) -> dict[str, Any]:
    if isinstance(binding, RestBinding):
        out: dict[str, Any] = {"kind": "rest", "method": binding.method, "url": binding.url}
        if binding.placement:
            out["placement"] = dict(binding.placement)
        return out
    return {"kind": "subprocess", "command": list(binding.command), "function": binding.function}


def registry_to_dict(registry: ToolRegistry) -> dict[str, Any]:
    tools = []
    for tool in registry:
        entry = doc_to_dict(tool.documentation)
        entry.pop("version_tag")
        tools.append(
            {
                "name": tool.name,
                "description": entry["description"],
                "parameters": entry["parameters"],
                "executor": _binding_to_dict(tool.executor_binding),
            }
        )
    return {"tools": tools}


def registry_text(registry: ToolRegistry) -> str:
    # key order is kept as constructed so saved files stay human-ordered
    return json.dumps(registry_to_dict(registry), ensure_ascii=False, indent=2) + "\n"


def save_registry(registry: ToolRegistry, path: str | Path) -> None:
    write_text_atomic(path, registry_text(registry))


def documentation_text(name: str, doc: ToolDocumentation) -> str:
    """Render a tool's documentation for prompt injection."""
    data = doc_to_dict(doc)
    data.pop("version_tag")
    return json.dumps({"name": name, **data}, ensure_ascii=False, indent=2)


def drop_parameter_descriptions(doc: ToolDocumentation, p: float, seed: int | str) -> ToolDocumentation:
    """Independently replace each parameter description with the empty string with
    probability p. Names, type labels, required flags, and the general description
    are left intact; deterministic for a fixed seed."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability must be in [0, 1], got {p}")
    rng = random.Random(stable_seed("dropout", seed))
    dropped = tuple(
        replace(param, description="") if rng.random() < p else param for param in doc.parameters
    )
    return replace(doc, parameters=dropped)


def noise_registry(registry: ToolRegistry, p: float, seed: int | str) -> ToolRegistry:
    """Apply description dropout to every tool, with a per-tool derived seed."""
    tools = tuple(
        replace(
            tool,
            documentation=drop_parameter_descriptions(
                tool.documentation, p, stable_seed(seed, tool.tool_id)
            ),
        )
        for tool in registry
    )
    return ToolRegistry(tools)
