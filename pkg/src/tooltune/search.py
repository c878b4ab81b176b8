"""Beam search over candidate payloads with reward-based subsampling, plus a
single-trajectory Monte-Carlo variant. The search is agnostic to what a payload
is; example and documentation optimization both plug in through SearchProblem."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

from .artifacts import json_digest, text_digest, write_text_atomic

STRATEGIES = ("beam", "monte_carlo")

REFLECTION_SOURCES = ("m6", "m8", "none")


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    strategy: str = "beam"
    width: int = 10
    branching: int = 3
    max_depth: int = 3
    reflection_rollouts: int = 3
    lambda_weight: float = 1.0
    early_stop_plateau: bool = False

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise SearchError(f"unknown strategy {self.strategy!r}")
        if self.width < 1:
            raise SearchError(f"width must be >= 1, got {self.width}")
        if self.branching < 1:
            raise SearchError(f"branching must be >= 1, got {self.branching}")
        if self.max_depth < 0:
            raise SearchError(f"max_depth must be >= 0, got {self.max_depth}")
        if self.reflection_rollouts < 0:
            raise SearchError(f"reflection_rollouts must be >= 0, got {self.reflection_rollouts}")
        if self.lambda_weight < 0:
            raise SearchError(f"lambda_weight must be >= 0, got {self.lambda_weight}")


@dataclass(frozen=True)
class ReflectionNote:
    text: str = ""
    source_template: str = "none"

    def __post_init__(self) -> None:
        if self.source_template not in REFLECTION_SOURCES:
            raise SearchError(f"unknown reflection source {self.source_template!r}")


@dataclass(frozen=True)
class Candidate:
    payload: Any
    reflection: ReflectionNote = ReflectionNote()


@dataclass(frozen=True)
class SearchNode:
    node_id: int
    payload: Any
    reward: float
    reflection: ReflectionNote = ReflectionNote()
    parent: int | None = None
    depth: int = 0


class SearchProblem(Protocol):
    def initial(self) -> list[Candidate]: ...

    def propose(self, node: SearchNode, want: int) -> list[Candidate]: ...

    def evaluate(self, candidate: Candidate, depth: int) -> float: ...


@dataclass
class SearchResult:
    best: SearchNode
    final_beam: list[SearchNode]
    full_tree: list[SearchNode]
    iterations: int
    evaluations: int


def subsample(nodes: list[SearchNode], width: int) -> list[SearchNode]:
    """Top-width nodes by reward; ties broken by proposal order (node_id)."""
    if width < 1:
        raise SearchError(f"subsample width must be >= 1, got {width}")
    return sorted(nodes, key=lambda n: (-n.reward, n.node_id))[:width]


class TraceLog:
    """Append-only JSONL record of every evaluated node, for post-hoc inspection.
    Payload and reflection are logged as digests so the trace stays small."""

    def __init__(self, path: str | Path | None, problem: Any = None) -> None:
        self.path = Path(path) if path else None
        self.problem = problem
        self.lines: list[str] = []

    def _payload_digest(self, payload: Any) -> str:
        to_json = getattr(self.problem, "payload_to_json", None)
        if to_json is not None:
            return json_digest(to_json(payload))
        return text_digest(repr(payload))

    def record(self, node: SearchNode) -> None:
        entry = {
            "node_id": node.node_id,
            "parent": node.parent,
            "depth": node.depth,
            "reward": node.reward,
            "payload_sha256": self._payload_digest(node.payload),
            "reflection_sha256": text_digest(node.reflection.text),
        }
        self.lines.append(json.dumps(entry, sort_keys=True))

    def flush(self) -> None:
        if self.path is not None:
            write_text_atomic(self.path, "\n".join(self.lines) + ("\n" if self.lines else ""))


class _Runner:
    def __init__(self, problem: SearchProblem, config: SearchConfig, trace: TraceLog | None) -> None:
        self.problem = problem
        self.config = config
        self.trace = trace
        self.nodes: list[SearchNode] = []
        self.evaluations = 0

    def admit(self, candidate: Candidate, parent: int | None, depth: int) -> SearchNode:
        reward = self.problem.evaluate(candidate, depth)
        self.evaluations += 1
        node = SearchNode(
            node_id=len(self.nodes),
            payload=candidate.payload,
            reward=reward,
            reflection=candidate.reflection,
            parent=parent,
            depth=depth,
        )
        self.nodes.append(node)
        if self.trace is not None:
            self.trace.record(node)
        return node

    def best(self) -> SearchNode:
        return min(self.nodes, key=lambda n: (-n.reward, n.node_id))

    def result(self, final_beam: list[SearchNode], iterations: int) -> SearchResult:
        if self.trace is not None:
            self.trace.flush()
        return SearchResult(
            best=self.best(),
            final_beam=final_beam,
            full_tree=list(self.nodes),
            iterations=iterations,
            evaluations=self.evaluations,
        )


def run_beam_search(
    problem: SearchProblem, config: SearchConfig, trace: TraceLog | None = None
) -> SearchResult:
    runner = _Runner(problem, config, trace)
    roots = [runner.admit(c, parent=None, depth=0) for c in problem.initial()]
    if not roots:
        raise SearchError("search problem produced no initial candidates")
    beam = subsample(roots, config.width)
    iterations = 0
    for depth in range(1, config.max_depth + 1):
        pool: list[SearchNode] = []
        for node in beam:
            children = problem.propose(node, config.branching)[: config.branching]
            for candidate in children:
                pool.append(runner.admit(candidate, parent=node.node_id, depth=depth))
        if not pool:
            break
        previous_best = max(n.reward for n in beam)
        beam = subsample(pool, config.width)
        iterations += 1
        if config.early_stop_plateau and beam[0].reward <= previous_best:
            break
    return runner.result(beam, iterations)


def run_monte_carlo(
    problem: SearchProblem, config: SearchConfig, trace: TraceLog | None = None
) -> SearchResult:
    """Single trajectory: one proposal per depth, adopted unconditionally. The
    global best over the whole trajectory is still tracked for the result."""
    runner = _Runner(problem, config, trace)
    initial = problem.initial()
    if not initial:
        raise SearchError("search problem produced no initial candidates")
    current = runner.admit(initial[0], parent=None, depth=0)
    iterations = 0
    for depth in range(1, config.max_depth + 1):
        children = problem.propose(current, 1)[:1]
        if not children:
            break
        current = runner.admit(children[0], parent=current.node_id, depth=depth)
        iterations += 1
    return runner.result([current], iterations)


def run_search(
    problem: SearchProblem, config: SearchConfig, trace: TraceLog | None = None
) -> SearchResult:
    if config.strategy == "beam":
        return run_beam_search(problem, config, trace)
    return run_monte_carlo(problem, config, trace)
