"""Documentation optimization. Candidate documentation revisions are proposed
from the current documentation, its usage history, and a reflection on the task
model's mistakes; each candidate is scored by how well the task model uses the
tool on a validation set of generated examples, and beam search keeps the best
revisions."""

from __future__ import annotations

import difflib
import random
import statistics
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

from . import harness
from .artifacts import compact_json, stable_seed
from .example_opt import ToolUseExample
from .executor import Invocation
from .gateway import (
    DOC_REVISION_SCHEMA,
    BackendError,
    GeneratorRef,
    MetaPromptTemplate,
    NoParseError,
    RangeViolationError,
    complete_template,
    parse_structured_output,
)
from .harness import InferenceConfig, PromptTool, invocation_to_json
from .registry import ParameterDoc, ToolDocumentation, ToolSpec, documentation_text
from .search import (
    Candidate,
    ReflectionNote,
    SearchConfig,
    SearchNode,
    SearchResult,
    TraceLog,
    run_search,
)

_HISTORY_LINE = 'Iteration #{iteration}, description="{description}", score={score:.1f}%, stdev={stdev:.1f}.'

_RECORD_LINE = (
    'instruction="{instruction}", answer="{answer}", errors: function_call={fn}, '
    "arguments={arguments}, error={error}, ground truth should be {gold}"
)


def _mean(values: Sequence[float]) -> float:
    return statistics.fmean(values) if values else 0.0


def _stdev(values: Sequence[float]) -> float:
    return statistics.pstdev(values) if values else 0.0


@dataclass(frozen=True)
class TranscriptRecord:
    query: str
    model_answer: str
    predicted: tuple[Invocation, ...]
    gold: Invocation
    error_text: str
    metric: float


@dataclass(frozen=True)
class DocCandidate:
    documentation: ToolDocumentation
    transcripts: tuple[TranscriptRecord, ...]
    reward: float
    stdev: float

    def __post_init__(self) -> None:
        metrics = [t.metric for t in self.transcripts]
        if self.reward != _mean(metrics):
            raise ValueError(
                f"reward {self.reward!r} is not the mean of the per-example metrics {_mean(metrics)!r}"
            )
        if self.stdev != _stdev(metrics):
            raise ValueError(
                f"stdev {self.stdev!r} is not the stdev of the per-example metrics {_stdev(metrics)!r}"
            )


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    description: str
    score: float  # percent
    stdev: float  # percent


@dataclass
class DocPayload:
    documentation: ToolDocumentation
    history: tuple[HistoryEntry, ...] = ()
    evaluation: DocCandidate | None = None
    reflection_out: ReflectionNote | None = None


def _history_text(entries: Sequence[HistoryEntry]) -> str:
    return "\n".join(
        _HISTORY_LINE.format(
            iteration=e.iteration, description=e.description, score=e.score, stdev=e.stdev
        )
        for e in entries
    )


def _doc_from_parsed(parsed: Mapping[str, Any], current: ToolDocumentation) -> ToolDocumentation:
    """Build a documentation revision from the generator's output. Parameters are
    whatever the revision lists (renames and drops are allowed); types and the
    required flag are inherited by name when the revision leaves them out."""
    params = parsed["parameters"]
    properties = params.get("properties")
    if not isinstance(properties, dict) or not properties:
        raise ValueError("revision has no usable parameter properties")
    current_by_name = {p.name: p for p in current.parameters}

    required = params.get("required")
    optional = params.get("optional")
    for listing in (required, optional):
        if listing is not None and not (
            isinstance(listing, list) and all(isinstance(n, str) for n in listing)
        ):
            raise ValueError("required/optional must be lists of parameter names")

    parameters = []
    for name, spec in properties.items():
        if not isinstance(name, str) or not name:
            raise ValueError(f"bad parameter name {name!r}")
        if isinstance(spec, str):
            description, type_label = spec, None
        elif isinstance(spec, dict):
            description = spec.get("description", "")
            type_label = spec.get("type")
            if not isinstance(description, str) or (
                type_label is not None and not isinstance(type_label, str)
            ):
                raise ValueError(f"bad property entry for {name!r}")
        else:
            raise ValueError(f"bad property entry for {name!r}")
        inherited = current_by_name.get(name)
        if type_label is None:
            type_label = inherited.type_label if inherited else "string"
        if required is not None or optional is not None:
            is_required = name in (required or [])
        else:
            is_required = inherited.is_required if inherited else False
        parameters.append(ParameterDoc(name, type_label, description, is_required))

    return ToolDocumentation(
        general_description=parsed["description"],
        parameters=tuple(parameters),
        version_tag=current.version_tag + 1,
    )


def propose_documentation(
    current: ToolDocumentation,
    tool_id: str,
    history: Sequence[HistoryEntry],
    analysis: str,
    generator: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
) -> ToolDocumentation | None:
    """One revision proposal. Output that cannot be parsed into well-formed
    documentation yields None; the caller simply gets a smaller candidate set."""
    completion = complete_template(
        generator,
        templates["m7"],
        {
            "Documentation": documentation_text(tool_id, current),
            "history": _history_text(history),
            "analysis": analysis,
            "function_name": tool_id,
        },
    )
    try:
        parsed = parse_structured_output(completion, DOC_REVISION_SCHEMA)
        return _doc_from_parsed(parsed, current)
    except (NoParseError, RangeViolationError, ValueError):
        return None


def evaluate_documentation(
    tool_id: str,
    documentation: ToolDocumentation,
    validation: Sequence[ToolUseExample],
    task_model: GeneratorRef,
    inference: InferenceConfig,
    depth: int,
    seed: int,
    matching: str = "exact",
    templates: Mapping[str, MetaPromptTemplate] | None = None,
    batch_size: int | None = None,
) -> DocCandidate:
    """Score a documentation candidate: mean task-model metric over a validation
    batch. The batch is drawn once per depth from the seed, so every candidate
    at the same depth is measured on the same examples."""
    if not validation:
        raise ValueError("documentation evaluation needs a non-empty validation set")
    size = min(batch_size if batch_size is not None else 10, len(validation))
    if size == len(validation):
        indices = list(range(len(validation)))
    else:
        rng = random.Random(stable_seed(seed, "batch", depth))
        indices = sorted(rng.sample(range(len(validation)), size))
    prompt_tool = PromptTool(tool_id, documentation, demonstrations=())
    records: list[TranscriptRecord] = []
    for i in indices:
        example = validation[i]
        try:
            metric, transcript = harness.run_and_score(
                example.query,
                [prompt_tool],
                [example.invocation],
                task_model,
                replace(inference, demos_per_tool=0),
                matching=matching,
                templates=templates,
            )
            records.append(
                TranscriptRecord(
                    query=example.query,
                    model_answer=transcript.final_answer,
                    predicted=transcript.predicted,
                    gold=example.invocation,
                    error_text=transcript.error_text,
                    metric=metric,
                )
            )
        except BackendError as exc:
            records.append(
                TranscriptRecord(
                    query=example.query,
                    model_answer="",
                    predicted=(),
                    gold=example.invocation,
                    error_text=f"backend failure: {exc}",
                    metric=0.0,
                )
            )
    metrics = [r.metric for r in records]
    return DocCandidate(documentation, tuple(records), _mean(metrics), _stdev(metrics))


def _record_text(record: TranscriptRecord) -> str:
    if record.predicted:
        first = record.predicted[0]
        fn, arguments = first.tool_id, compact_json(dict(first.arguments))
    else:
        fn, arguments = "none", "{}"
    return _RECORD_LINE.format(
        instruction=record.query,
        answer=record.model_answer,
        fn=fn,
        arguments=arguments,
        error=record.error_text or "none",
        gold=invocation_to_json(record.gold),
    )


def reflect_on_documentation(
    initial_doc_text: str,
    tool_id: str,
    iteration: int,
    candidate: DocCandidate,
    generator: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
) -> str:
    """Ask the doc generator what in this description misled the task model. An
    empty analysis is accepted; it just gives the next proposal nothing to go on."""
    completion = complete_template(
        generator,
        templates["m8"],
        {
            "Documentation": initial_doc_text,
            "iteration": iteration,
            "description": documentation_text(tool_id, candidate.documentation),
            "records": "\n".join(_record_text(r) for r in candidate.transcripts),
            "score": f"{candidate.reward * 100:.1f}%",
        },
    )
    return completion.text.strip()


@dataclass
class DocSearchProblem:
    tool: ToolSpec
    validation: tuple[ToolUseExample, ...]
    doc_generator: GeneratorRef
    task_model: GeneratorRef
    inference: InferenceConfig
    templates: Mapping[str, MetaPromptTemplate]
    seed: int
    matching: str = "exact"
    batch_size: int | None = None

    def __post_init__(self) -> None:
        self.initial_doc_text = documentation_text(self.tool.tool_id, self.tool.documentation)

    def initial(self) -> list[Candidate]:
        return [Candidate(DocPayload(self.tool.documentation))]

    def evaluate(self, candidate: Candidate, depth: int) -> float:
        payload = candidate.payload
        payload.evaluation = evaluate_documentation(
            self.tool.tool_id,
            payload.documentation,
            self.validation,
            self.task_model,
            self.inference,
            depth=depth,
            seed=self.seed,
            matching=self.matching,
            templates=self.templates,
            batch_size=self.batch_size,
        )
        return payload.evaluation.reward

    def propose(self, node: SearchNode, want: int) -> list[Candidate]:
        payload = node.payload
        if payload.reflection_out is None:
            analysis = reflect_on_documentation(
                self.initial_doc_text,
                self.tool.tool_id,
                node.depth,
                payload.evaluation,
                self.doc_generator,
                self.templates,
            )
            payload.reflection_out = ReflectionNote(analysis, "m8")
        own_entry = HistoryEntry(
            iteration=node.depth,
            description=documentation_text(self.tool.tool_id, payload.documentation),
            score=payload.evaluation.reward * 100.0,
            stdev=payload.evaluation.stdev * 100.0,
        )
        history = payload.history + (own_entry,)
        children = []
        for _i in range(want):
            revision = propose_documentation(
                payload.documentation,
                self.tool.tool_id,
                history,
                payload.reflection_out.text,
                self.doc_generator,
                self.templates,
            )
            if revision is not None:
                children.append(Candidate(DocPayload(revision, history), payload.reflection_out))
        return children

    def payload_to_json(self, payload: DocPayload) -> dict[str, Any]:
        from .registry import doc_to_dict

        return doc_to_dict(payload.documentation)


def doc_diff(tool_id: str, original: ToolDocumentation, optimized: ToolDocumentation) -> str:
    return "".join(
        difflib.unified_diff(
            documentation_text(tool_id, original).splitlines(keepends=True),
            documentation_text(tool_id, optimized).splitlines(keepends=True),
            fromfile="original",
            tofile="optimized",
        )
    )


@dataclass
class DocOptimizationResult:
    tool_id: str
    original: ToolDocumentation
    optimized: ToolDocumentation
    baseline_score: float
    optimized_score: float
    chosen_node_id: int
    trajectory: list[dict[str, Any]]
    search: SearchResult
    diff_text: str


def optimize_documentation(
    tool: ToolSpec,
    validation: Sequence[ToolUseExample],
    doc_generator: GeneratorRef,
    task_model: GeneratorRef,
    search: SearchConfig,
    inference: InferenceConfig,
    seed: int,
    matching: str = "exact",
    templates: Mapping[str, MetaPromptTemplate] | None = None,
    batch_size: int | None = None,
    trace: TraceLog | None = None,
) -> DocOptimizationResult:
    if not validation:
        raise ValueError(f"tool {tool.tool_id!r}: documentation optimization needs examples")
    templates = templates or harness.default_templates()
    problem = DocSearchProblem(
        tool=tool,
        validation=tuple(validation),
        doc_generator=doc_generator,
        task_model=task_model,
        inference=inference,
        templates=templates,
        seed=seed,
        matching=matching,
        batch_size=batch_size,
    )
    if trace is not None:
        trace.problem = problem
    result = run_search(problem, search, trace)
    by_depth: dict[int, SearchNode] = {}
    for node in result.full_tree:
        held = by_depth.get(node.depth)
        if held is None or (node.reward, -node.node_id) > (held.reward, -held.node_id):
            by_depth[node.depth] = node
    trajectory = [
        {"depth": depth, "node_id": by_depth[depth].node_id, "score": by_depth[depth].reward}
        for depth in sorted(by_depth)
    ]
    best = result.best
    return DocOptimizationResult(
        tool_id=tool.tool_id,
        original=tool.documentation,
        optimized=best.payload.documentation,
        baseline_score=result.full_tree[0].reward,
        optimized_score=best.reward,
        chosen_node_id=best.node_id,
        trajectory=trajectory,
        search=result,
        diff_text=doc_diff(tool.tool_id, tool.documentation, best.payload.documentation),
    )
