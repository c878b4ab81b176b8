"""Tool-use example optimization. For each tool: rejection-sample invocations
that actually execute and survive a validity critique, work backwards from the
call and its output to a natural-language query and answer, score each example
by quality and by how hard it is for the task model, and search over examples
with self-reflection feedback between rollouts."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

from . import harness
from .executor import STATUS_OK, Invocation, ToolExecutor, ToolOutput
from .gateway import (
    INSTRUCTION_SCHEMA,
    INVOCATION_SCHEMA,
    QUALITY_SCHEMA,
    VALIDITY_SCHEMA,
    GeneratorRef,
    MetaPromptTemplate,
    NoParseError,
    RangeViolationError,
    complete_template,
    parse_structured_output,
)
from .harness import Demonstration, InferenceConfig, PromptTool, invocation_to_json
from .registry import ToolSpec, documentation_text
from .search import (
    Candidate,
    ReflectionNote,
    SearchConfig,
    SearchNode,
    SearchResult,
    TraceLog,
    run_search,
)

_ATTEMPT_HISTORY_HEADER = (
    "Previously you generated the following API calls for this function, "
    "which where then executed and critiqued:"
)
_ATTEMPT_RECORD = 'fn_call="{fn_call}" fn_output="{fn_output}" status={status} reflection="{reflection}"'

_INSTRUCTION_HISTORY_HEADER = (
    "Previously you generated the following instructions for this function call, "
    "which were rated and analyzed:"
)
_INSTRUCTION_RECORD = 'instruction="{instruction}" score={score}'
_INSTRUCTION_ANALYSIS = (
    "Based on these ratings, you are given the following analysis: {analysis}. "
    "You should improve your instructions based on these suggestions."
)

_ROLLOUT_RECORD = 'instruction="{instruction}" score={score} analysis="{analysis}"'

OUTCOMES = ("ok", "unplayable")


class EmptyAnswerError(ValueError):
    pass


@dataclass(frozen=True)
class RewardReport:
    quality: int
    difficulty: float
    lambda_weight: float
    combined: float

    def __post_init__(self) -> None:
        if self.quality not in (1, 2, 3):
            raise ValueError(f"quality must be 1, 2, or 3, got {self.quality}")
        if not -1.0 <= self.difficulty <= 0.0:
            raise ValueError(f"difficulty must be in [-1, 0], got {self.difficulty}")
        if self.lambda_weight < 0:
            raise ValueError(f"lambda_weight must be >= 0, got {self.lambda_weight}")
        expected = self.quality + self.lambda_weight * self.difficulty
        if self.combined != expected:
            raise ValueError(
                f"combined reward {self.combined!r} != quality + lambda * difficulty = {expected!r}"
            )


def make_reward(quality: int, difficulty: float, lambda_weight: float) -> RewardReport:
    return RewardReport(quality, difficulty, lambda_weight, quality + lambda_weight * difficulty)


@dataclass(frozen=True)
class ToolUseExample:
    query: str
    tool: str
    invocation: Invocation
    answer: str
    tool_output: ToolOutput
    reward: RewardReport

    def __post_init__(self) -> None:
        if not self.query:
            raise ValueError("example query must be non-empty")
        if self.invocation.tool_id != self.tool:
            raise ValueError(
                f"example for tool {self.tool!r} holds a call to {self.invocation.tool_id!r}"
            )
        if self.tool_output.status != STATUS_OK:
            raise ValueError(
                f"examples are built from successful executions, got status {self.tool_output.status!r}"
            )


def as_demonstration(example: ToolUseExample) -> Demonstration:
    return Demonstration(example.query, example.invocation, example.answer, example.reward.combined)


def example_to_dict(example: ToolUseExample) -> dict[str, Any]:
    return {
        "query": example.query,
        "tool": example.tool,
        "invocation": {
            "name": example.invocation.tool_id,
            "arguments": dict(example.invocation.arguments),
        },
        "answer": example.answer,
        "tool_output": {"status": example.tool_output.status, "payload": example.tool_output.payload},
        "reward": {
            "quality": example.reward.quality,
            "difficulty": example.reward.difficulty,
            "lambda_weight": example.reward.lambda_weight,
            "combined": example.reward.combined,
        },
    }


def example_from_dict(data: Mapping[str, Any]) -> ToolUseExample:
    reward = data["reward"]
    return ToolUseExample(
        query=data["query"],
        tool=data["tool"],
        invocation=Invocation(data["invocation"]["name"], dict(data["invocation"]["arguments"])),
        answer=data["answer"],
        tool_output=ToolOutput(data["tool_output"]["status"], data["tool_output"]["payload"]),
        reward=RewardReport(
            quality=reward["quality"],
            difficulty=reward["difficulty"],
            lambda_weight=reward["lambda_weight"],
            combined=reward["combined"],
        ),
    )


@dataclass(frozen=True)
class ValidityVerdict:
    err_code: int
    analysis: str = ""

    def __post_init__(self) -> None:
        if self.err_code not in (-1, 0):
            raise ValueError(f"err_code must be -1 or 0, got {self.err_code}")
        if self.err_code == 0 and self.analysis:
            raise ValueError("a passing verdict carries no analysis")
        if self.err_code == -1 and not self.analysis:
            raise ValueError("a failing verdict needs an analysis")

    @classmethod
    def from_parsed(cls, parsed: Mapping[str, Any]) -> "ValidityVerdict":
        err_code = parsed["err_code"]
        if err_code == 0:
            return cls(0, "")
        analysis = parsed.get("analysis", "") or "(no analysis provided)"
        return cls(-1, analysis)


@dataclass(frozen=True)
class AttemptRecord:
    raw_completion: str
    invocation: Invocation | None = None
    output: ToolOutput | None = None
    verdict: ValidityVerdict | None = None
    note: str = ""

    @property
    def accepted(self) -> bool:
        return (
            self.output is not None
            and self.output.status == STATUS_OK
            and self.verdict is not None
            and self.verdict.err_code == 0
        )


def attempt_to_dict(attempt: AttemptRecord) -> dict[str, Any]:
    return {
        "parsed": attempt.invocation is not None,
        "function": attempt.invocation.tool_id if attempt.invocation else None,
        "status": attempt.output.status if attempt.output else None,
        "err_code": attempt.verdict.err_code if attempt.verdict else None,
        "accepted": attempt.accepted,
        "note": attempt.note,
    }


def _attempt_record_line(
    fn_call: str, fn_output: str, status: str, reflection: str
) -> str:
    return _ATTEMPT_RECORD.format(
        fn_call=fn_call, fn_output=fn_output, status=status, reflection=reflection
    )


def _attempt_history(records: Sequence[str]) -> str:
    if not records:
        return ""
    return _ATTEMPT_HISTORY_HEADER + "\n" + "\n".join(records)


def _record_for_attempt(attempt: AttemptRecord) -> str:
    if attempt.invocation is None:
        return _attempt_record_line(
            fn_call=attempt.raw_completion[:200],
            fn_output="",
            status="invalid",
            reflection=attempt.note,
        )
    reflection = ""
    if attempt.verdict is not None and attempt.verdict.analysis:
        reflection = attempt.verdict.analysis
    elif attempt.note:
        reflection = attempt.note
    return _attempt_record_line(
        fn_call=invocation_to_json(attempt.invocation),
        fn_output=attempt.output.payload if attempt.output else "",
        status=attempt.output.status if attempt.output else "invalid",
        reflection=reflection,
    )


def _invocation_from_parsed(parsed: Mapping[str, Any]) -> tuple[str, dict[str, Any]]:
    params = parsed["parameters"]
    if isinstance(params.get("properties"), dict):
        return parsed["name"], dict(params["properties"])
    return parsed["name"], dict(params)


def _validity_output(output: ToolOutput) -> str:
    return json.dumps({"response": output.payload, "error": output.error_detail or ""})


def rejection_sample_invocations(
    doc_text: str,
    function_name: str,
    generator: GeneratorRef,
    executor: ToolExecutor,
    templates: Mapping[str, MetaPromptTemplate],
    budget: int = 8,
    want: int = 1,
    prior_record: str | None = None,
) -> tuple[list[tuple[Invocation, ToolOutput]], list[AttemptRecord]]:
    """Sample up to `want` invocations that execute cleanly and pass the validity
    critique. Every generation attempt, parseable or not, consumes budget, and
    every critiqued attempt feeds the history of the next generation prompt."""
    attempts: list[AttemptRecord] = []
    accepted: list[tuple[Invocation, ToolOutput]] = []
    records: list[str] = [prior_record] if prior_record else []
    spent = 0
    while len(accepted) < want and spent < budget:
        spent += 1
        completion = complete_template(
            generator,
            templates["m1"],
            {
                "Documentation": doc_text,
                "function_name": function_name,
                "history": _attempt_history(records),
            },
        )
        try:
            parsed = parse_structured_output(completion, INVOCATION_SCHEMA)
        except NoParseError:
            attempt = AttemptRecord(completion.text, note="output was not a parseable function call")
            attempts.append(attempt)
            records.append(_record_for_attempt(attempt))
            continue
        name, arguments = _invocation_from_parsed(parsed)
        if name != function_name:
            attempt = AttemptRecord(
                completion.text,
                invocation=Invocation(name, arguments),
                note=f"called {name!r} instead of {function_name!r}",
            )
            attempts.append(attempt)
            records.append(_record_for_attempt(attempt))
            continue
        invocation = Invocation(function_name, arguments)
        output = executor.execute(invocation)
        critique = complete_template(
            generator,
            templates["m2"],
            {
                "Documentation": doc_text,
                "function_name": function_name,
                "fn_call": invocation_to_json(invocation),
                "fn_output": _validity_output(output),
            },
        )
        try:
            verdict = ValidityVerdict.from_parsed(parse_structured_output(critique, VALIDITY_SCHEMA))
        except (NoParseError, RangeViolationError) as exc:
            attempt = AttemptRecord(
                completion.text,
                invocation=invocation,
                output=output,
                note=f"validity critique unusable: {exc}",
            )
            attempts.append(attempt)
            records.append(_record_for_attempt(attempt))
            continue
        attempt = AttemptRecord(completion.text, invocation, output, verdict)
        attempts.append(attempt)
        records.append(_record_for_attempt(attempt))
        if output.status == STATUS_OK and verdict.err_code == 0:
            accepted.append((invocation, output))
    return accepted, attempts


def _instruction_history(previous: Sequence[tuple[str, int]], analysis: str) -> str:
    if not previous:
        return ""
    lines = [_INSTRUCTION_HISTORY_HEADER]
    lines += [
        _INSTRUCTION_RECORD.format(instruction=instruction, score=score)
        for instruction, score in previous
    ]
    if analysis:
        lines.append(_INSTRUCTION_ANALYSIS.format(analysis=analysis))
    return "\n".join(lines)


def generate_query(
    doc_text: str,
    function_name: str,
    invocation: Invocation,
    output: ToolOutput,
    generator: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
    history: str = "",
) -> str:
    bindings = {
        "Documentation": doc_text,
        "function_name": function_name,
        "fn_call": invocation_to_json(invocation),
        "fn_output": output.payload,
        "history": history,
    }
    completion = complete_template(generator, templates["m3"], bindings)
    try:
        parsed = parse_structured_output(completion, INSTRUCTION_SCHEMA)
    except NoParseError:
        completion = complete_template(generator, templates["m3"], bindings)
        parsed = parse_structured_output(completion, INSTRUCTION_SCHEMA)
    return parsed["instruction"].strip()


def generate_answer(
    doc_text: str,
    instruction: str,
    output: ToolOutput,
    generator: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
) -> str:
    bindings = {"Documentation": doc_text, "instruction": instruction, "fn_output": output.payload}
    answer = complete_template(generator, templates["m4"], bindings).text.strip()
    if not answer:
        answer = complete_template(generator, templates["m4"], bindings).text.strip()
    if not answer:
        raise EmptyAnswerError(f"empty answer for instruction {instruction[:80]!r}")
    return answer


def score_quality(
    instruction: str,
    invocation: Invocation,
    answer: str,
    generator: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
) -> tuple[int, str]:
    bindings = {
        "instruction": instruction,
        "fn_call": invocation_to_json(invocation),
        "answer": answer,
    }
    completion = complete_template(generator, templates["m5"], bindings)
    try:
        parsed = parse_structured_output(completion, QUALITY_SCHEMA)
    except (NoParseError, RangeViolationError):
        completion = complete_template(generator, templates["m5"], bindings)
        parsed = parse_structured_output(completion, QUALITY_SCHEMA)
    return parsed["score"], parsed.get("analysis", "")


def score_difficulty(
    query: str,
    tool: ToolSpec,
    gold: Invocation,
    task_model: GeneratorRef,
    inference: InferenceConfig,
    matching: str = "exact",
    templates: Mapping[str, MetaPromptTemplate] | None = None,
) -> float:
    """Negated task-model metric on the query given only the documentation: an
    example the model already solves zero-shot contributes nothing, so it scores
    0; one the model misses scores -1 and the reward prefers keeping it."""
    prompt_tool = PromptTool(tool.tool_id, tool.documentation, demonstrations=())
    metric, _transcript = harness.run_and_score(
        query,
        [prompt_tool],
        [gold],
        task_model,
        replace(inference, demos_per_tool=0),
        matching=matching,
        templates=templates,
    )
    return -metric


def reflect_on_rollouts(
    doc_text: str,
    function_name: str,
    invocation: Invocation,
    rollouts: Sequence["Rollout"],
    generator: GeneratorRef,
    templates: Mapping[str, MetaPromptTemplate],
) -> str:
    records = "\n".join(
        _ROLLOUT_RECORD.format(
            instruction=r.instruction, score=r.quality, analysis=r.quality_analysis
        )
        for r in rollouts
    )
    completion = complete_template(
        generator,
        templates["m6"],
        {
            "Documentation": doc_text,
            "fn_call": invocation_to_json(invocation),
            "function_name": function_name,
            "records": records,
        },
    )
    return completion.text.strip()


@dataclass(frozen=True)
class Rollout:
    instruction: str
    answer: str
    quality: int
    quality_analysis: str
    reward: RewardReport
    reflection: str


@dataclass(frozen=True)
class SeedPayload:
    """Root of the example search: no example yet, only the documentation."""


@dataclass(frozen=True)
class ExamplePayload:
    example: ToolUseExample


@dataclass
class ExampleSearchProblem:
    tool: ToolSpec
    example_generator: GeneratorRef
    task_model: GeneratorRef
    executor: ToolExecutor
    search: SearchConfig
    inference: InferenceConfig
    templates: Mapping[str, MetaPromptTemplate]
    matching: str = "exact"
    rejection_budget: int = 8

    def __post_init__(self) -> None:
        self.doc_text = documentation_text(self.tool.tool_id, self.tool.documentation)
        self.attempt_log: list[AttemptRecord] = []

    def initial(self) -> list[Candidate]:
        return [Candidate(SeedPayload())]

    def propose(self, node: SearchNode, want: int) -> list[Candidate]:
        prior_record = None
        if isinstance(node.payload, ExamplePayload):
            example = node.payload.example
            prior_record = _attempt_record_line(
                fn_call=invocation_to_json(example.invocation),
                fn_output=example.tool_output.payload,
                status=example.tool_output.status,
                reflection=node.reflection.text,
            )
        pairs, attempts = rejection_sample_invocations(
            self.doc_text,
            self.tool.tool_id,
            self.example_generator,
            self.executor,
            self.templates,
            budget=self.rejection_budget,
            want=want,
            prior_record=prior_record,
        )
        self.attempt_log.extend(attempts)
        candidates = []
        for invocation, output in pairs:
            candidate = self._rollout_candidate(invocation, output)
            if candidate is not None:
                candidates.append(candidate)
        return candidates

    def _rollout_candidate(self, invocation: Invocation, output: ToolOutput) -> Candidate | None:
        """Run the reflection rollouts for one accepted invocation and keep the
        best-rewarded rollout as the candidate example. A rollout that cannot
        produce a well-formed query, answer, or score drops the invocation."""
        rollouts: list[Rollout] = []
        try:
            for _k in range(self.search.reflection_rollouts):
                history = ""
                if rollouts:
                    history = _instruction_history(
                        [(r.instruction, r.quality) for r in rollouts], rollouts[-1].reflection
                    )
                instruction = generate_query(
                    self.doc_text,
                    self.tool.tool_id,
                    invocation,
                    output,
                    self.example_generator,
                    self.templates,
                    history,
                )
                answer = generate_answer(
                    self.doc_text, instruction, output, self.example_generator, self.templates
                )
                quality, quality_analysis = score_quality(
                    instruction, invocation, answer, self.example_generator, self.templates
                )
                difficulty = score_difficulty(
                    instruction,
                    self.tool,
                    invocation,
                    self.task_model,
                    self.inference,
                    self.matching,
                    self.templates,
                )
                reward = make_reward(quality, difficulty, self.search.lambda_weight)
                reflection = reflect_on_rollouts(
                    self.doc_text,
                    self.tool.tool_id,
                    invocation,
                    rollouts
                    + [Rollout(instruction, answer, quality, quality_analysis, reward, "")],
                    self.example_generator,
                    self.templates,
                )
                rollouts.append(
                    Rollout(instruction, answer, quality, quality_analysis, reward, reflection)
                )
        except (NoParseError, RangeViolationError, EmptyAnswerError):
            return None
        if not rollouts:
            return None
        best = min(enumerate(rollouts), key=lambda pair: (-pair[1].reward.combined, pair[0]))[1]
        example = ToolUseExample(
            query=best.instruction,
            tool=self.tool.tool_id,
            invocation=invocation,
            answer=best.answer,
            tool_output=output,
            reward=best.reward,
        )
        return Candidate(ExamplePayload(example), ReflectionNote(best.reflection, "m6"))

    def evaluate(self, candidate: Candidate, depth: int) -> float:
        if isinstance(candidate.payload, SeedPayload):
            return float("-inf")
        return candidate.payload.example.reward.combined

    def payload_to_json(self, payload: Any) -> dict[str, Any]:
        if isinstance(payload, SeedPayload):
            return {"seed": True}
        return example_to_dict(payload.example)


@dataclass
class ExampleOptimizationResult:
    tool_id: str
    outcome: str
    examples: tuple[ToolUseExample, ...]
    search: SearchResult
    attempts: tuple[AttemptRecord, ...]


def optimize_examples(
    tool: ToolSpec,
    example_generator: GeneratorRef,
    task_model: GeneratorRef,
    executor: ToolExecutor,
    search: SearchConfig,
    inference: InferenceConfig,
    matching: str = "exact",
    rejection_budget: int = 8,
    templates: Mapping[str, MetaPromptTemplate] | None = None,
    trace: TraceLog | None = None,
) -> ExampleOptimizationResult:
    templates = templates or harness.default_templates()
    problem = ExampleSearchProblem(
        tool=tool,
        example_generator=example_generator,
        task_model=task_model,
        executor=executor,
        search=search,
        inference=inference,
        templates=templates,
        matching=matching,
        rejection_budget=rejection_budget,
    )
    if trace is not None:
        trace.problem = problem
    result = run_search(problem, search, trace)
    examples = tuple(
        node.payload.example
        for node in result.final_beam
        if isinstance(node.payload, ExamplePayload)
    )
    outcome = "ok" if examples else "unplayable"
    return ExampleOptimizationResult(
        tool_id=tool.tool_id,
        outcome=outcome,
        examples=examples,
        search=result,
        attempts=tuple(problem.attempt_log),
    )
