"""Improve an LLM's zero-shot tool use by playing with each tool: sample
invocations that really execute, turn the good ones into demonstration
examples, and refine the tool documentation against a task model."""

from .artifacts import canonical_json, stable_seed, write_json_atomic
from .doc_opt import (
    DocCandidate,
    DocOptimizationResult,
    evaluate_documentation,
    optimize_documentation,
    propose_documentation,
)
from .example_opt import (
    ExampleOptimizationResult,
    RewardReport,
    ToolUseExample,
    make_reward,
    optimize_examples,
    rejection_sample_invocations,
)
from .executor import (
    ExecutionLimits,
    ExecutorConfigError,
    Invocation,
    ToolExecutor,
    ToolOutput,
    execute,
)
from .gateway import (
    BackendConfig,
    Completion,
    GeneratorRef,
    MetaPromptTemplate,
    MockBackend,
    complete,
    complete_template,
    load_mock_script,
    load_template,
    load_templates,
    parse_structured_output,
    render_meta_prompt,
)
from .harness import (
    CategoryReport,
    Demonstration,
    InferenceConfig,
    PromptTool,
    Transcript,
    aggregate_metrics,
    judge_solvable,
    run_and_score,
    run_task_model,
    score_invocation,
    select_demonstrations,
)
from .registry import (
    ParameterDoc,
    RegistryError,
    ToolDocumentation,
    ToolRegistry,
    ToolSpec,
    drop_parameter_descriptions,
    load_registry,
    noise_registry,
    parse_registry,
    save_registry,
)
from .search import (
    Candidate,
    ReflectionNote,
    SearchConfig,
    SearchNode,
    SearchResult,
    run_beam_search,
    run_monte_carlo,
    run_search,
    subsample,
)

__version__ = "0.1.0"
