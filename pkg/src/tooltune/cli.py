"""Command-line pipeline: optimize tool-use examples, optimize documentation,
evaluate baseline vs optimized prompting, add documentation noise, and replay a
mock-scripted run to verify artifacts are reproduced byte for byte.

Exit codes: 0 full success, 2 partial (some tools failed, the rest completed),
1 fatal (bad arguments, config, or replay mismatch)."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, replace
from fnmatch import fnmatch
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import harness
from .artifacts import (
    FORMAT_VERSION,
    file_digest,
    read_json,
    stable_seed,
    write_json_atomic,
    write_text_atomic,
)
from .doc_opt import optimize_documentation
from .example_opt import (
    as_demonstration,
    attempt_to_dict,
    example_from_dict,
    example_to_dict,
    optimize_examples,
)
from .executor import ExecutionLimits, Invocation, ToolExecutor
from .gateway import (
    ROLES,
    BackendConfig,
    BackendError,
    GeneratorRef,
    MetaPromptTemplate,
    load_mock_script,
    load_templates,
)
from .harness import InferenceConfig, PromptTool, aggregate_metrics, select_demonstrations
from .registry import (
    RegistryError,
    ToolRegistry,
    ToolSpec,
    doc_from_dict,
    doc_to_dict,
    load_registry,
    noise_registry,
    save_registry,
)
from .search import SearchConfig, TraceLog

BACKEND_URL_ENV = "TOOLTUNE_BACKEND_URL"

ROLE_TEMPERATURE = {
    "example_generator": 0.7,
    "doc_generator": 0.7,
    "task_model": 0.001,
    "judge": 0.0,
}


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    limits: ExecutionLimits = field(default_factory=ExecutionLimits)
    backends: dict[str, dict[str, Any]] = field(default_factory=dict)
    seed: int | None = None
    rejection_budget: int = 8
    batch_size: int | None = None
    matching: str = "exact"
    category_weights: dict[str, float] = field(default_factory=dict)
    rate_limit_per_s: float | None = None
    templates_dir: str | None = None


def _take(data: dict[str, Any], known: Sequence[str], where: str) -> None:
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise CliError(f"unknown {where} key(s): {', '.join(unknown)}")


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    data = dict(data)
    _take(
        data,
        (
            "seed",
            "search",
            "inference",
            "limits",
            "backends",
            "rejection_budget",
            "batch_size",
            "matching",
            "category_weights",
            "rate_limit_per_s",
            "templates_dir",
        ),
        "config",
    )
    search_data = dict(data.get("search", {}))
    _take(
        search_data,
        ("strategy", "width", "branching", "max_depth", "reflection_rollouts", "lambda"),
        "config.search",
    )
    if "lambda" in search_data:
        search_data["lambda_weight"] = search_data.pop("lambda")
    inference_data = dict(data.get("inference", {}))
    _take(
        inference_data,
        ("mode", "demos_per_tool", "temperature", "max_react_steps"),
        "config.inference",
    )
    limits_data = dict(data.get("limits", {}))
    _take(limits_data, ("timeout_s", "max_payload_bytes"), "config.limits")
    matching = data.get("matching", "exact")
    if matching not in harness.MATCHING:
        raise CliError(f"config.matching must be one of {harness.MATCHING}, got {matching!r}")
    try:
        return RunConfig(
            search=SearchConfig(**search_data),
            inference=InferenceConfig(**inference_data),
            limits=ExecutionLimits(**limits_data),
            backends=dict(data.get("backends", {})),
            seed=data.get("seed"),
            rejection_budget=int(data.get("rejection_budget", 8)),
            batch_size=data.get("batch_size"),
            matching=matching,
            category_weights=dict(data.get("category_weights", {})),
            rate_limit_per_s=data.get("rate_limit_per_s"),
            templates_dir=data.get("templates_dir"),
        )
    except ValueError as exc:
        raise CliError(f"bad config value: {exc}") from exc


def config_snapshot(config: RunConfig) -> dict[str, Any]:
    """Effective config as a plain dict; feeding it back through config_from_dict
    reproduces the exact run settings, which is what replay relies on."""
    return {
        "seed": config.seed,
        "search": {
            "strategy": config.search.strategy,
            "width": config.search.width,
            "branching": config.search.branching,
            "max_depth": config.search.max_depth,
            "reflection_rollouts": config.search.reflection_rollouts,
            "lambda": config.search.lambda_weight,
        },
        "inference": {
            "mode": config.inference.mode,
            "demos_per_tool": config.inference.demos_per_tool,
            "temperature": config.inference.temperature,
            "max_react_steps": config.inference.max_react_steps,
        },
        "limits": {
            "timeout_s": config.limits.timeout_s,
            "max_payload_bytes": config.limits.max_payload_bytes,
        },
        "backends": config.backends,
        "rejection_budget": config.rejection_budget,
        "batch_size": config.batch_size,
        "matching": config.matching,
        "category_weights": config.category_weights,
        "rate_limit_per_s": config.rate_limit_per_s,
        "templates_dir": config.templates_dir,
    }


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = read_json(path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return config_from_dict(data)


def resolve_seed(cli_seed: int | None, config: RunConfig) -> int:
    if cli_seed is not None:
        return cli_seed
    if config.seed is not None:
        return int(config.seed)
    raise CliError("a seed is required: pass --seed or set \"seed\" in the config")


def select_tools(registry: ToolRegistry, selector: str | None) -> list[ToolSpec]:
    tools = list(registry)
    if selector is None:
        return tools
    patterns = [p.strip() for p in selector.split(",") if p.strip()]
    if not patterns:
        raise CliError("--tools selector is empty")
    selected: list[ToolSpec] = []
    for pattern in patterns:
        matched = [t for t in tools if fnmatch(t.tool_id, pattern)]
        if not matched:
            raise CliError(f"--tools pattern {pattern!r} matches no tool in the registry")
        for tool in matched:
            if tool not in selected:
                selected.append(tool)
    return selected


@dataclass
class Session:
    registry_path: Path
    registry: ToolRegistry
    config: RunConfig
    seed: int
    out: Path
    generators: dict[str, GeneratorRef]
    meter_objects: list[Any]
    mock_script_path: Path | None
    templates: Mapping[str, MetaPromptTemplate]

    def llm_calls(self) -> int:
        return sum(obj.call_count for obj in self.meter_objects)


def build_generators(
    config: RunConfig, mock_script: str | None, backend_url: str | None
) -> tuple[dict[str, GeneratorRef], list[Any]]:
    if mock_script is not None:
        try:
            mock = load_mock_script(mock_script)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load mock script {mock_script}: {exc}") from exc
        generators = {
            role: GeneratorRef(role, mock, temperature=ROLE_TEMPERATURE[role]) for role in ROLES
        }
        return generators, [mock]
    url_override = backend_url or os.environ.get(BACKEND_URL_ENV)
    generators = {}
    backends: list[Any] = []
    for role in ROLES:
        settings = dict(config.backends.get("default", {}))
        settings.update(config.backends.get(role, {}))
        base_url = url_override or settings.get("base_url")
        if not base_url:
            raise CliError(
                f"no backend for role {role!r}: pass --mock-script, --backend-url, "
                f"set {BACKEND_URL_ENV}, or configure backends in the config file"
            )
        backend = BackendConfig(
            base_url=base_url,
            model=settings.get("model", "default"),
            max_retries=int(settings.get("max_retries", 3)),
            backoff_s=float(settings.get("backoff_s", 0.5)),
        )
        backends.append(backend)
        generators[role] = GeneratorRef(
            role,
            backend,
            temperature=float(settings.get("temperature", ROLE_TEMPERATURE[role])),
            max_tokens=int(settings.get("max_tokens", 1024)),
        )
    return generators, backends


def build_session(
    registry_path: str,
    out: str,
    seed: int,
    config: RunConfig,
    mock_script: str | None,
    backend_url: str | None,
) -> Session:
    try:
        registry = load_registry(registry_path)
    except (OSError, RegistryError) as exc:
        raise CliError(f"cannot load registry: {exc}") from exc
    generators, meter_objects = build_generators(config, mock_script, backend_url)
    try:
        templates = load_templates(config.templates_dir)
    except OSError as exc:
        raise CliError(f"cannot load templates: {exc}") from exc
    return Session(
        registry_path=Path(registry_path),
        registry=registry,
        config=config,
        seed=seed,
        out=Path(out),
        generators=generators,
        meter_objects=meter_objects,
        mock_script_path=Path(mock_script) if mock_script else None,
        templates=templates,
    )


def _identity(session: Session) -> dict[str, Any]:
    mock = None
    if session.mock_script_path is not None:
        mock = {
            "path": str(session.mock_script_path),
            "sha256": file_digest(session.mock_script_path),
        }
    return {
        "seed": session.seed,
        "config": config_snapshot(session.config),
        "registry": {
            "path": str(session.registry_path),
            "sha256": file_digest(session.registry_path),
        },
        "mock_script": mock,
    }


def load_or_new_manifest(session: Session, stage: str) -> dict[str, Any]:
    identity = _identity(session)
    path = session.out / f"manifest-{stage}.json"
    if path.exists():
        try:
            old = read_json(path)
        except ValueError:
            old = None
        if old is not None and all(old.get(k) == identity[k] for k in identity):
            return old
    return {
        "format_version": FORMAT_VERSION,
        "run_id": f"{stage}-{session.seed}",
        "stage": stage,
        **identity,
        "tools": {},
        "artifacts": [],
        "last_run": {"executed_tools": [], "skipped_tools": []},
    }


def _can_skip(manifest: dict[str, Any], tool_id: str, out: Path) -> bool:
    entry = manifest["tools"].get(tool_id)
    if not entry or entry.get("status") != "done":
        return False
    artifact = out / entry["artifact"]
    return artifact.exists() and file_digest(artifact) == entry["sha256"]


def _finish_manifest(
    manifest: dict[str, Any],
    session: Session,
    stage: str,
    executed: list[str],
    skipped: list[str],
    extra_files: list[Path],
) -> None:
    files = []
    for tool_id, entry in sorted(manifest["tools"].items()):
        if entry.get("status") == "done":
            files.append(session.out / entry["artifact"])
    files.extend(extra_files)
    manifest["artifacts"] = [
        {"path": str(p.relative_to(session.out)), "sha256": file_digest(p)}
        for p in files
        if p.exists()
    ]
    manifest["last_run"] = {"executed_tools": executed, "skipped_tools": skipped}
    write_json_atomic(session.out / f"manifest-{stage}.json", manifest)


def run_examples_stage(session: Session, selector: str | None) -> int:
    tools = select_tools(session.registry, selector)
    manifest = load_or_new_manifest(session, "examples")
    executed: list[str] = []
    skipped: list[str] = []
    extra_files: list[Path] = []
    failures = 0
    with ToolExecutor(
        session.registry, session.config.limits, session.config.rate_limit_per_s
    ) as executor:
        for tool in tools:
            if _can_skip(manifest, tool.tool_id, session.out):
                skipped.append(tool.tool_id)
                print(f"{tool.tool_id}: up to date, skipped")
                continue
            artifact_rel = f"examples/{tool.tool_id}.json"
            trace_path = session.out / "trace" / f"examples-{tool.tool_id}.jsonl"
            llm_before = session.llm_calls()
            tool_calls_before = executor.call_count
            try:
                result = optimize_examples(
                    tool,
                    session.generators["example_generator"],
                    session.generators["task_model"],
                    executor,
                    search=session.config.search,
                    inference=session.config.inference,
                    matching=session.config.matching,
                    rejection_budget=session.config.rejection_budget,
                    templates=session.templates,
                    trace=TraceLog(trace_path),
                )
            except Exception as exc:
                failures += 1
                manifest["tools"][tool.tool_id] = {
                    "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}",
                }
                print(f"{tool.tool_id}: failed: {exc}", file=sys.stderr)
                continue
            data = {
                "format_version": FORMAT_VERSION,
                "tool": tool.tool_id,
                "outcome": result.outcome,
                "examples": [example_to_dict(e) for e in result.examples],
                "attempts": [attempt_to_dict(a) for a in result.attempts],
                "search": {
                    "iterations": result.search.iterations,
                    "evaluations": result.search.evaluations,
                    "best_node_id": result.search.best.node_id,
                    "best_reward": result.search.best.reward
                    if result.examples
                    else None,
                },
            }
            write_json_atomic(session.out / artifact_rel, data)
            extra_files.append(trace_path)
            manifest["tools"][tool.tool_id] = {
                "status": "done",
                "artifact": artifact_rel,
                "sha256": file_digest(session.out / artifact_rel),
                "llm_calls": session.llm_calls() - llm_before,
                "tool_calls": executor.call_count - tool_calls_before,
            }
            executed.append(tool.tool_id)
            if result.outcome == "ok":
                best = max(e.reward.combined for e in result.examples)
                print(f"{tool.tool_id}: ok, {len(result.examples)} examples, best reward {best:.3f}")
            else:
                print(f"{tool.tool_id}: unplayable, no valid invocation survived sampling")
    _finish_manifest(manifest, session, "examples", executed, skipped, extra_files)
    return 2 if failures else 0


def _load_examples_artifact(path: Path) -> tuple[str, list]:
    data = read_json(path)
    examples = [example_from_dict(e) for e in data["examples"]]
    return data["outcome"], examples


def run_docs_stage(session: Session, selector: str | None, examples_dir: Path | None) -> int:
    tools = select_tools(session.registry, selector)
    examples_root = examples_dir if examples_dir is not None else session.out
    manifest = load_or_new_manifest(session, "docs")
    executed: list[str] = []
    skipped: list[str] = []
    extra_files: list[Path] = []
    failures = 0
    for tool in tools:
        if _can_skip(manifest, tool.tool_id, session.out):
            skipped.append(tool.tool_id)
            print(f"{tool.tool_id}: up to date, skipped")
            continue
        artifact_rel = f"docs/{tool.tool_id}.json"
        diff_rel = f"docs/{tool.tool_id}.diff.txt"
        trace_path = session.out / "trace" / f"docs-{tool.tool_id}.jsonl"
        llm_before = session.llm_calls()
        try:
            examples_path = examples_root / "examples" / f"{tool.tool_id}.json"
            if not examples_path.exists():
                raise CliError(
                    f"no examples artifact at {examples_path}; run optimize-examples first"
                )
            outcome, validation = _load_examples_artifact(examples_path)
            if outcome != "ok" or not validation:
                raise CliError("tool was unplayable; no validation examples to optimize against")
            result = optimize_documentation(
                tool,
                validation,
                session.generators["doc_generator"],
                session.generators["task_model"],
                search=session.config.search,
                inference=session.config.inference,
                seed=stable_seed(session.seed, tool.tool_id),
                matching=session.config.matching,
                templates=session.templates,
                batch_size=session.config.batch_size,
                trace=TraceLog(trace_path),
            )
        except Exception as exc:
            failures += 1
            manifest["tools"][tool.tool_id] = {
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
            }
            print(f"{tool.tool_id}: failed: {exc}", file=sys.stderr)
            continue
        data = {
            "format_version": FORMAT_VERSION,
            "tool": tool.tool_id,
            "original": doc_to_dict(result.original),
            "optimized": doc_to_dict(result.optimized),
            "baseline_score": result.baseline_score,
            "optimized_score": result.optimized_score,
            "chosen_node_id": result.chosen_node_id,
            "trajectory": result.trajectory,
        }
        write_json_atomic(session.out / artifact_rel, data)
        write_text_atomic(session.out / diff_rel, result.diff_text)
        extra_files.extend([session.out / diff_rel, trace_path])
        manifest["tools"][tool.tool_id] = {
            "status": "done",
            "artifact": artifact_rel,
            "sha256": file_digest(session.out / artifact_rel),
            "llm_calls": session.llm_calls() - llm_before,
            "tool_calls": 0,
        }
        executed.append(tool.tool_id)
        print(
            f"{tool.tool_id}: {result.baseline_score * 100:.1f}% -> "
            f"{result.optimized_score * 100:.1f}% (node {result.chosen_node_id})"
        )
    _finish_manifest(manifest, session, "docs", executed, skipped, extra_files)
    return 2 if failures else 0


@dataclass
class EvalEntry:
    tool_id: str
    query: str
    gold: Invocation
    category: str
    weight: float


def _entries_from_artifacts(session: Session, tools: list[ToolSpec]) -> list[EvalEntry]:
    entries = []
    for tool in tools:
        path = session.out / "examples" / f"{tool.tool_id}.json"
        if not path.exists():
            print(f"{tool.tool_id}: no examples artifact, skipped", file=sys.stderr)
            continue
        _outcome, examples = _load_examples_artifact(path)
        weight = float(session.config.category_weights.get(tool.tool_id, 1.0))
        for example in examples:
            entries.append(
                EvalEntry(tool.tool_id, example.query, example.invocation, tool.tool_id, weight)
            )
    return entries


def _entries_from_file(session: Session, path: str) -> list[EvalEntry]:
    data = read_json(path)
    if not isinstance(data, list):
        raise CliError(f"queries file {path} must hold a JSON array")
    entries = []
    for i, item in enumerate(data):
        try:
            category = item.get("category", item["tool"])
            weight = float(
                item.get("weight", session.config.category_weights.get(category, 1.0))
            )
            entries.append(
                EvalEntry(
                    tool_id=item["tool"],
                    query=item["query"],
                    gold=Invocation(item["gold"]["name"], dict(item["gold"]["arguments"])),
                    category=category,
                    weight=weight,
                )
            )
        except (KeyError, TypeError) as exc:
            raise CliError(f"queries file {path}: entry {i} is malformed: {exc}") from exc
    return entries


def _optimized_doc(session: Session, tool: ToolSpec):
    path = session.out / "docs" / f"{tool.tool_id}.json"
    if not path.exists():
        return tool.documentation
    return doc_from_dict(read_json(path)["optimized"], source=str(path))


def _demos_for(session: Session, tool: ToolSpec, exclude_query: str):
    path = session.out / "examples" / f"{tool.tool_id}.json"
    if not path.exists():
        return ()
    _outcome, examples = _load_examples_artifact(path)
    pool = [as_demonstration(e) for e in examples if e.query != exclude_query]
    return select_demonstrations(pool, session.config.inference.demos_per_tool)


def run_evaluate_stage(session: Session, selector: str | None, queries: str | None) -> int:
    tools = select_tools(session.registry, selector)
    by_id = {tool.tool_id: tool for tool in tools}
    if queries is not None:
        entries = _entries_from_file(session, queries)
        missing = sorted({e.tool_id for e in entries} - set(by_id))
        if missing:
            raise CliError(f"queries reference tools not in the registry: {', '.join(missing)}")
    else:
        entries = _entries_from_artifacts(session, tools)
    if not entries:
        raise CliError("nothing to evaluate: no example artifacts and no --queries file")

    rows = []
    for entry in entries:
        tool = by_id[entry.tool_id]
        arms = {
            "baseline": PromptTool(tool.tool_id, tool.documentation, ()),
            "optimized": PromptTool(
                tool.tool_id, _optimized_doc(session, tool), _demos_for(session, tool, entry.query)
            ),
        }
        metrics = {}
        for arm, prompt_tool in arms.items():
            demos = len(prompt_tool.demonstrations)
            inference = replace(
                session.config.inference, demos_per_tool=0 if arm == "baseline" else demos
            )
            try:
                metric, _transcript = harness.run_and_score(
                    entry.query,
                    [prompt_tool],
                    [entry.gold],
                    session.generators["task_model"],
                    inference,
                    matching=session.config.matching,
                    templates=session.templates,
                )
            except BackendError as exc:
                print(f"{entry.tool_id}: backend failure during {arm} arm: {exc}", file=sys.stderr)
                metric = 0.0
            metrics[arm] = metric
        rows.append((entry, metrics["baseline"], metrics["optimized"]))

    categories: dict[str, dict[str, Any]] = {}
    for entry, base, opt in rows:
        bucket = categories.setdefault(
            entry.category, {"baseline": [], "optimized": [], "weight": entry.weight}
        )
        bucket["baseline"].append(base)
        bucket["optimized"].append(opt)
    baseline_report = aggregate_metrics(
        {
            name: (sum(b["baseline"]) / len(b["baseline"]), b["weight"])
            for name, b in categories.items()
        }
    )
    optimized_report = aggregate_metrics(
        {
            name: (sum(b["optimized"]) / len(b["optimized"]), b["weight"])
            for name, b in categories.items()
        }
    )

    width = max(len("unweighted avg"), *(len(name) for name in categories))
    print(f"{'category':<{width}}  baseline  optimized   delta")
    for name in sorted(categories):
        base, _w = baseline_report.per_category[name]
        opt, _w = optimized_report.per_category[name]
        print(
            f"{name:<{width}}  {base * 100:>7.1f}%  {opt * 100:>8.1f}%  {(opt - base) * 100:>+6.1f}"
        )
    print(
        f"{'unweighted avg':<{width}}  {baseline_report.unweighted_average * 100:>7.1f}%  "
        f"{optimized_report.unweighted_average * 100:>8.1f}%  "
        f"{(optimized_report.unweighted_average - baseline_report.unweighted_average) * 100:>+6.1f}"
    )
    print(
        f"{'weighted avg':<{width}}  {baseline_report.weighted_average * 100:>7.1f}%  "
        f"{optimized_report.weighted_average * 100:>8.1f}%  "
        f"{(optimized_report.weighted_average - baseline_report.weighted_average) * 100:>+6.1f}"
    )

    report = {
        "format_version": FORMAT_VERSION,
        "stage": "evaluate",
        "seed": session.seed,
        "matching": session.config.matching,
        "mode": session.config.inference.mode,
        "demos_per_tool": session.config.inference.demos_per_tool,
        "categories": {
            name: {
                "baseline": baseline_report.per_category[name][0],
                "optimized": optimized_report.per_category[name][0],
                "delta": optimized_report.per_category[name][0]
                - baseline_report.per_category[name][0],
                "weight": categories[name]["weight"],
                "count": len(categories[name]["baseline"]),
            }
            for name in categories
        },
        "baseline": {
            "unweighted": baseline_report.unweighted_average,
            "weighted": baseline_report.weighted_average,
        },
        "optimized": {
            "unweighted": optimized_report.unweighted_average,
            "weighted": optimized_report.weighted_average,
        },
        "delta": {
            "unweighted": optimized_report.unweighted_average
            - baseline_report.unweighted_average,
            "weighted": optimized_report.weighted_average - baseline_report.weighted_average,
        },
        "entries": [
            {
                "tool": entry.tool_id,
                "category": entry.category,
                "query": entry.query,
                "baseline": base,
                "optimized": opt,
            }
            for entry, base, opt in rows
        ],
    }
    write_json_atomic(session.out / "eval" / "report.json", report)
    manifest = load_or_new_manifest(session, "evaluate")
    manifest["tools"] = {
        tool_id: {
            "status": "done",
            "artifact": "eval/report.json",
            "sha256": file_digest(session.out / "eval" / "report.json"),
            "llm_calls": 0,
            "tool_calls": 0,
        }
        for tool_id in sorted({e.tool_id for e in entries})
    }
    _finish_manifest(
        manifest,
        session,
        "evaluate",
        sorted({e.tool_id for e in entries}),
        [],
        [session.out / "eval" / "report.json"],
    )
    return 0


def cmd_noise(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    seed = resolve_seed(args.seed, config)
    try:
        registry = load_registry(args.registry)
    except (OSError, RegistryError) as exc:
        raise CliError(f"cannot load registry: {exc}") from exc
    try:
        noised = noise_registry(registry, args.p, seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(args.registry).with_suffix(".noised.json")
    save_registry(noised, out)
    before = sum(1 for t in registry for p in t.documentation.parameters if p.description)
    after = sum(1 for t in noised for p in t.documentation.parameters if p.description)
    total = sum(len(t.documentation.parameters) for t in registry)
    print(f"wrote {out}: dropped {before - after} of {total} parameter descriptions (p={args.p})")
    return 0


def _resolve_recorded_path(recorded: str, manifest_dir: Path) -> Path:
    path = Path(recorded)
    if path.is_absolute():
        return path
    relative = manifest_dir / path
    return relative if relative.exists() else path


def cmd_replay(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = read_json(manifest_path)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not manifest.get("mock_script"):
        raise CliError("replay only works for runs driven by --mock-script")
    stage = manifest.get("stage")
    if stage not in ("examples", "docs"):
        raise CliError(f"replay supports the examples and docs stages, not {stage!r}")
    manifest_dir = manifest_path.parent

    registry_path = _resolve_recorded_path(manifest["registry"]["path"], manifest_dir)
    mock_path = _resolve_recorded_path(manifest["mock_script"]["path"], manifest_dir)
    for label, path, recorded in (
        ("registry", registry_path, manifest["registry"]["sha256"]),
        ("mock script", mock_path, manifest["mock_script"]["sha256"]),
    ):
        if not path.exists():
            print(f"replay: {label} {path} is missing", file=sys.stderr)
            return 1
        if file_digest(path) != recorded:
            print(f"replay: {label} {path} no longer matches the recorded digest", file=sys.stderr)
            return 1

    config = config_from_dict(manifest["config"])
    out = Path(args.out) if args.out else manifest_dir / "replay"
    session = build_session(
        str(registry_path), str(out), manifest["seed"], config, str(mock_path), None
    )
    done = sorted(
        tool_id for tool_id, entry in manifest["tools"].items() if entry.get("status") == "done"
    )
    if not done:
        raise CliError("manifest records no completed tools to replay")
    selector = ",".join(done)
    if stage == "examples":
        code = run_examples_stage(session, selector)
    else:
        code = run_docs_stage(session, selector, examples_dir=manifest_dir)
    if code != 0:
        print("replay: stage did not complete cleanly", file=sys.stderr)
        return 1

    mismatched = []
    for tool_id in done:
        entry = manifest["tools"][tool_id]
        replayed = out / entry["artifact"]
        if not replayed.exists() or file_digest(replayed) != entry["sha256"]:
            mismatched.append(tool_id)
    if mismatched:
        print(f"replay: artifacts diverged for: {', '.join(mismatched)}", file=sys.stderr)
        return 1
    print(f"replay ok: {len(done)} artifact(s) reproduced byte for byte")
    return 0


def _session_from_args(args: argparse.Namespace) -> Session:
    config = load_run_config(args.config)
    seed = resolve_seed(args.seed, config)
    return build_session(args.registry, args.out, seed, config, args.mock_script, args.backend_url)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tooltune",
        description="Improve zero-shot tool use by generating tool-use examples "
        "and refining tool documentation against a task model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--registry", required=True, help="tool registry JSON file")
    common.add_argument("--config", help="run config JSON file")
    common.add_argument("--out", required=True, help="output directory for artifacts")
    common.add_argument("--seed", type=int, help="run seed (overrides the config seed)")
    common.add_argument(
        "--backend-url", help=f"chat-completion endpoint (or set {BACKEND_URL_ENV})"
    )
    common.add_argument("--mock-script", help="scripted mock backend JSON file")
    common.add_argument("--tools", help="comma-separated tool id patterns (fnmatch)")

    p = sub.add_parser(
        "optimize-examples", parents=[common], help="search for high-reward tool-use examples"
    )
    p.set_defaults(func=lambda a: run_examples_stage(_session_from_args(a), a.tools))

    p = sub.add_parser(
        "optimize-docs", parents=[common], help="search for better tool documentation"
    )
    p.add_argument(
        "--examples-dir",
        help="directory holding examples/ artifacts (defaults to --out)",
    )
    p.set_defaults(
        func=lambda a: run_docs_stage(
            _session_from_args(a),
            a.tools,
            Path(a.examples_dir) if a.examples_dir else None,
        )
    )

    p = sub.add_parser(
        "evaluate", parents=[common], help="compare baseline and optimized prompting"
    )
    p.add_argument("--queries", help="JSON file of evaluation queries with gold calls")
    p.set_defaults(func=lambda a: run_evaluate_stage(_session_from_args(a), a.tools, a.queries))

    p = sub.add_parser("noise", help="drop parameter descriptions from a registry")
    p.add_argument("--registry", required=True)
    p.add_argument("--config", help="run config JSON file (for the seed)")
    p.add_argument("--out", help="output path (default: <registry>.noised.json)")
    p.add_argument("--seed", type=int)
    p.add_argument("--p", type=float, default=0.5, help="drop probability (default 0.5)")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("replay", help="re-run a mock-scripted stage and verify artifacts")
    p.add_argument("--manifest", required=True, help="manifest-<stage>.json from the original run")
    p.add_argument("--out", help="replay output directory (default: <manifest dir>/replay)")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
