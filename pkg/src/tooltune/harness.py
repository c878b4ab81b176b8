"""Task-model evaluation: build tool prompts (optionally with demonstrations),
run the model in single-turn or react mode, extract predicted calls, and score
them against gold calls. Every consumer of a task metric goes through
run_and_score so difficulty scoring and documentation evaluation cannot drift
apart."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Any, Mapping, Sequence

from .artifacts import compact_json
from .executor import STATUS_OK, ExecutorConfigError, Invocation, ToolExecutor
from .gateway import (
    INVOCATION_SCHEMA,
    VERDICT_SCHEMA,
    BackendError,
    GeneratorRef,
    MetaPromptTemplate,
    NoParseError,
    RangeViolationError,
    complete,
    complete_template,
    iter_objects,
    load_templates,
    parse_structured_output,
    render_meta_prompt,
)
from .registry import ToolDocumentation, documentation_text

MODES = ("single_turn_prompt", "function_call", "react_loop")

MATCHING = ("exact", "structural")

UNPARSEABLE_TEXT = "no function call could be parsed from the model output"

DEMO_HEADER = "Here are examples of correct tool use:"


@lru_cache(maxsize=1)
def default_templates() -> Mapping[str, MetaPromptTemplate]:
    return load_templates()


@dataclass(frozen=True)
class InferenceConfig:
    mode: str = "single_turn_prompt"
    demos_per_tool: int = 0
    temperature: float = 0.001
    max_react_steps: int = 6

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown inference mode {self.mode!r}")
        if self.demos_per_tool < 0:
            raise ValueError(f"demos_per_tool must be >= 0, got {self.demos_per_tool}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_react_steps < 1:
            raise ValueError(f"max_react_steps must be >= 1, got {self.max_react_steps}")


@dataclass(frozen=True)
class Demonstration:
    query: str
    invocation: Invocation
    answer: str
    reward: float = 0.0


@dataclass(frozen=True)
class PromptTool:
    name: str
    documentation: ToolDocumentation
    demonstrations: tuple[Demonstration, ...] = ()


@dataclass(frozen=True)
class Transcript:
    query: str
    prompts: tuple[str, ...]
    raw_outputs: tuple[str, ...]
    predicted: tuple[Invocation, ...]
    final_answer: str
    steps: int
    unparseable: bool
    error_text: str = ""


def select_demonstrations(
    demonstrations: Sequence[Demonstration], count: int
) -> tuple[Demonstration, ...]:
    """Highest-reward demonstrations first; ties keep the original order."""
    if count <= 0:
        return ()
    ranked = sorted(enumerate(demonstrations), key=lambda pair: (-pair[1].reward, pair[0]))
    return tuple(demo for _i, demo in ranked[:count])


def invocation_to_json(invocation: Invocation) -> str:
    return json.dumps(
        {"name": invocation.tool_id, "parameters": {"properties": dict(invocation.arguments)}},
        sort_keys=True,
    )


def demonstrations_block(tools: Sequence[PromptTool]) -> str:
    entries = []
    for tool in tools:
        for demo in tool.demonstrations:
            entries.append(
                f"Query: {demo.query}\n"
                f"Call: {invocation_to_json(demo.invocation)}\n"
                f"Answer: {demo.answer}"
            )
    if not entries:
        return ""
    return DEMO_HEADER + "\n\n" + "\n\n".join(entries) + "\n\n"


def tools_block(tools: Sequence[PromptTool]) -> str:
    return "\n".join(documentation_text(tool.name, tool.documentation) for tool in tools)


def extract_invocations(text: str) -> tuple[Invocation, ...]:
    """All non-overlapping tool calls in the text, left to right."""
    found: list[Invocation] = []
    consumed_until = -1
    for start, end, obj in iter_objects(text):
        if start <= consumed_until or not INVOCATION_SCHEMA.shape_matches(obj):
            continue
        params = obj["parameters"]
        if isinstance(params.get("properties"), dict):
            arguments = params["properties"]
        else:
            arguments = params
        found.append(Invocation(obj["name"], dict(arguments)))
        consumed_until = end
    return tuple(found)


def _run_single_turn(
    query: str,
    tools: Sequence[PromptTool],
    task_model: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
) -> Transcript:
    prompt = render_meta_prompt(
        templates["task_single_turn"],
        {"tools": tools_block(tools), "demonstrations": demonstrations_block(tools), "query": query},
    )
    completion = complete(task_model, prompt)
    predicted = extract_invocations(completion.text)
    return Transcript(
        query=query,
        prompts=(prompt,),
        raw_outputs=(completion.text,),
        predicted=predicted,
        final_answer=completion.text.strip(),
        steps=1,
        unparseable=not predicted,
        error_text="" if predicted else UNPARSEABLE_TEXT,
    )


def _run_react(
    query: str,
    tools: Sequence[PromptTool],
    task_model: GeneratorRef,
    config: InferenceConfig,
    templates: Mapping[str, MetaPromptTemplate],
    executor: ToolExecutor,
) -> Transcript:
    trajectory = ""
    prompts: list[str] = []
    outputs: list[str] = []
    predicted: list[Invocation] = []
    final_answer = ""
    unparseable = False
    for _step in range(config.max_react_steps):
        prompt = render_meta_prompt(
            templates["react"],
            {
                "tools": tools_block(tools),
                "demonstrations": demonstrations_block(tools),
                "query": query,
                "trajectory": trajectory,
            },
        )
        prompts.append(prompt)
        completion = complete(task_model, prompt)
        outputs.append(completion.text)
        text = completion.text
        action_at = text.find("Action:")
        if action_at == -1:
            unparseable = True
            break
        action_text = text[action_at + len("Action:") :]
        if action_text.lstrip().startswith("finish"):
            answer_at = text.find("Answer:", action_at)
            final_answer = text[answer_at + len("Answer:") :].strip() if answer_at != -1 else ""
            break
        calls = extract_invocations(action_text)
        if not calls:
            unparseable = True
            break
        invocation = calls[0]
        predicted.append(invocation)
        try:
            output = executor.execute(invocation)
            observation = output.payload if output.status == STATUS_OK else f"error: {output.error_detail}"
        except ExecutorConfigError as exc:
            observation = f"error: {exc}"
        step_text = text[: action_at + len("Action:")].strip() + " " + invocation_to_json(invocation)
        trajectory += step_text + "\nObservation: " + observation + "\n"
    else:
        unparseable = not predicted
    error_text = UNPARSEABLE_TEXT if unparseable and not predicted else ""
    return Transcript(
        query=query,
        prompts=tuple(prompts),
        raw_outputs=tuple(outputs),
        predicted=tuple(predicted),
        final_answer=final_answer,
        steps=len(outputs),
        unparseable=unparseable and not predicted,
        error_text=error_text,
    )


def run_task_model(
    query: str,
    tools: Sequence[PromptTool],
    task_model: GeneratorRef,
    config: InferenceConfig,
    templates: Mapping[str, MetaPromptTemplate] | None = None,
    executor: ToolExecutor | None = None,
) -> Transcript:
    templates = templates or default_templates()
    model = replace(task_model, temperature=config.temperature)
    if config.mode == "react_loop":
        if executor is None:
            raise ValueError("react_loop mode needs an executor")
        return _run_react(query, tools, model, config, templates, executor)
    # function_call falls back to single-turn prompting: the completion wire
    # format carries no tool-call fields, so both modes share one code path.
    return _run_single_turn(query, tools, model, templates)


def canonical_value(value: Any) -> Any:
    if isinstance(value, bool):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, list):
        return [canonical_value(v) for v in value]
    if isinstance(value, dict):
        return {k: canonical_value(v) for k, v in value.items()}
    return value


def _canonical_call(invocation: Invocation) -> str:
    return compact_json(
        {"name": invocation.tool_id, "arguments": canonical_value(dict(invocation.arguments))}
    )


def score_invocation(
    predicted: Sequence[Invocation], gold: Sequence[Invocation], matching: str = "exact"
) -> float:
    """1.0 when the predicted calls match the gold calls, else 0.0. Exact matching
    compares the call sequences in order; structural matching ignores order."""
    if matching not in MATCHING:
        raise ValueError(f"unknown matching {matching!r}, expected one of {MATCHING}")
    left = [_canonical_call(inv) for inv in predicted]
    right = [_canonical_call(inv) for inv in gold]
    if matching == "structural":
        left, right = sorted(left), sorted(right)
    return 1.0 if left == right else 0.0


@dataclass(frozen=True)
class CategoryReport:
    per_category: dict[str, tuple[float, float]]
    unweighted_average: float
    weighted_average: float


def aggregate_metrics(per_category: Mapping[str, tuple[float, float]]) -> CategoryReport:
    """Aggregate (accuracy, weight) pairs per category into unweighted and
    weight-adjusted averages."""
    if not per_category:
        raise ValueError("no categories to aggregate")
    for name, (_accuracy, weight) in per_category.items():
        if weight <= 0:
            raise ValueError(f"category {name!r}: weight must be > 0, got {weight}")
    accuracies = [a for a, _w in per_category.values()]
    total_weight = sum(w for _a, w in per_category.values())
    weighted = sum(a * w for a, w in per_category.values()) / total_weight
    return CategoryReport(
        per_category=dict(per_category),
        unweighted_average=statistics.fmean(accuracies),
        weighted_average=weighted,
    )


def judge_solvable(
    query: str,
    answer: str,
    judge: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate] | None = None,
) -> str:
    """Ask the judge whether the answer solves the query. Any failure to get a
    usable verdict degrades to "unsure" rather than aborting the caller."""
    templates = templates or default_templates()
    try:
        completion = complete_template(judge, templates["judge"], {"query": query, "answer": answer})
        parsed = parse_structured_output(completion, VERDICT_SCHEMA)
    except (NoParseError, RangeViolationError, BackendError):
        return "unsure"
    return parsed["verdict"]


def run_and_score(
    query: str,
    tools: Sequence[PromptTool],
    gold: Sequence[Invocation],
    task_model: GeneratorRef,
    config: InferenceConfig,
    matching: str = "exact",
    templates: Mapping[str, MetaPromptTemplate] | None = None,
    executor: ToolExecutor | None = None,
) -> tuple[float, Transcript]:
    """The single scoring path shared by example difficulty scoring and
    documentation evaluation. Backend failures propagate to the caller."""
    transcript = run_task_model(query, tools, task_model, config, templates, executor)
    metric = score_invocation(transcript.predicted, gold, matching)
    return metric, transcript
