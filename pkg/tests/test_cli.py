import json
from pathlib import Path

import pytest

from tooltune.artifacts import read_json
from tooltune.cli import CliError, config_from_dict, config_snapshot, main, resolve_seed
from tooltune.registry import load_registry

from helpers import registry_entry, write_registry_file

M1 = "write 1 example API call"
M2 = "analyze the response and check if there are any errors"
M3 = "generate a user instruction in natural language"
M4 = "produce an effective and short answer"
M5 = "give a `score` based on the following rules"
M6 = "identify and contrast the patterns of instructions"
M7 = "further enhance the description"
M8 = "critique the descriptions based on these results"

ADD_CALL = '{"name": "add", "parameters": {"properties": {"a": 2, "b": 3}}}'
RESTORED_MARK = "the first addend value"
RESTORED_DOC = json.dumps(
    {
        "description": "Adds two integers and returns their sum.",
        "parameters": {
            "properties": {
                "a": {"type": "integer", "description": "the first addend value"},
                "b": {"type": "integer", "description": "the second addend value"},
            },
            "required": ["a", "b"],
        },
    }
)

PIPELINE_RULES = [
    {"contains": M1, "response": ADD_CALL},
    {"contains": M2, "response": '{"analysis": "", "err_code": 0}'},
    {"contains": M3, "response": '{"instruction": "What do I get combining 2 with 3?"}'},
    {"contains": M4, "response": "You get 5."},
    {"contains": M5, "response": '{"score": 3}'},
    {"contains": M6, "response": "Keep every value explicit."},
    {"contains": M7, "response": RESTORED_DOC},
    {"contains": M8, "response": "The parameter descriptions are missing."},
    # the task model only finds the right call once the restored text is visible
    {"contains": RESTORED_MARK, "response": ADD_CALL},
]

DEGRADED_PROPERTIES = {
    "a": {"type": "integer", "description": ""},
    "b": {"type": "integer", "description": ""},
}


def add_entry(runner_script):
    return registry_entry(
        "add",
        {"kind": "subprocess", "command": ["python3", str(runner_script)], "function": "add"},
        properties=dict(DEGRADED_PROPERTIES),
        required=["a", "b"],
    )


def write_mock(path, rules=PIPELINE_RULES, default="I cannot tell."):
    path.write_text(
        json.dumps({"policy": "first_match", "default": default, "rules": rules}, indent=2)
    )
    return path


def write_config(path, **overrides):
    data = {
        "seed": 11,
        "search": {"width": 2, "branching": 1, "max_depth": 1, "reflection_rollouts": 1},
        "inference": {"demos_per_tool": 1},
        "rejection_budget": 4,
        "category_weights": {"add": 2.0},
    }
    data.update(overrides)
    path.write_text(json.dumps(data, indent=2))
    return path


@pytest.fixture
def pipeline(tmp_path, runner_script):
    registry = write_registry_file(tmp_path / "registry.json", [add_entry(runner_script)])
    return {
        "registry": registry,
        "mock": write_mock(tmp_path / "mock.json"),
        "config": write_config(tmp_path / "config.json"),
        "out": tmp_path / "out",
        "tmp": tmp_path,
    }


def run_stage(pipeline, command, *extra):
    return main(
        [
            command,
            "--registry",
            str(pipeline["registry"]),
            "--config",
            str(pipeline["config"]),
            "--out",
            str(pipeline["out"]),
            "--mock-script",
            str(pipeline["mock"]),
            *extra,
        ]
    )


# --- config handling -----------------------------------------------------------


def test_config_lambda_key_and_snapshot_round_trip():
    config = config_from_dict(
        {
            "seed": 3,
            "search": {"lambda": 0.25, "width": 4},
            "inference": {"demos_per_tool": 2},
            "matching": "structural",
            "category_weights": {"x": 0.5},
        }
    )
    assert config.search.lambda_weight == 0.25
    assert config.search.width == 4
    assert config_from_dict(config_snapshot(config)) == config


@pytest.mark.parametrize(
    "data, needle",
    [
        ({"serach": {}}, "serach"),
        ({"search": {"widht": 2}}, "widht"),
        ({"inference": {"demos": 1}}, "demos"),
        ({"matching": "fuzzy"}, "fuzzy"),
        ({"search": {"width": 0}}, "bad config value"),
    ],
)
def test_config_rejects_unknown_or_bad_values(data, needle):
    with pytest.raises(CliError, match=needle):
        config_from_dict(data)


def test_seed_resolution_precedence():
    config = config_from_dict({"seed": 9})
    assert resolve_seed(None, config) == 9
    assert resolve_seed(4, config) == 4
    with pytest.raises(CliError, match="seed is required"):
        resolve_seed(None, config_from_dict({}))


def test_missing_seed_is_a_clean_cli_error(pipeline, capsys):
    (pipeline["tmp"] / "noseed.json").write_text("{}")
    code = main(
        [
            "optimize-examples",
            "--registry",
            str(pipeline["registry"]),
            "--config",
            str(pipeline["tmp"] / "noseed.json"),
            "--out",
            str(pipeline["out"]),
            "--mock-script",
            str(pipeline["mock"]),
        ]
    )
    assert code == 1
    assert "a seed is required" in capsys.readouterr().err


def test_missing_mock_script_is_a_clean_cli_error(pipeline, capsys):
    pipeline["mock"] = pipeline["tmp"] / "absent.json"
    assert run_stage(pipeline, "optimize-examples") == 1
    assert "cannot load mock script" in capsys.readouterr().err


def test_tools_selector_must_match(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples", "--tools", "nosuch*") == 1
    assert "matches no tool" in capsys.readouterr().err


# --- pipeline ------------------------------------------------------------------


def test_examples_stage_writes_artifact_and_manifest(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    out = capsys.readouterr().out
    assert "add: ok, 1 examples, best reward 3.000" in out

    artifact = read_json(pipeline["out"] / "examples" / "add.json")
    assert artifact["outcome"] == "ok"
    assert len(artifact["examples"]) == 1
    example = artifact["examples"][0]
    assert example["query"] == "What do I get combining 2 with 3?"
    assert example["invocation"] == {"name": "add", "arguments": {"a": 2, "b": 3}}
    assert example["answer"] == "You get 5."
    assert example["tool_output"] == {"status": "ok", "payload": "5"}
    assert example["reward"]["quality"] == 3
    assert example["reward"]["difficulty"] == 0.0
    assert artifact["search"]["iterations"] == 1
    assert artifact["search"]["best_reward"] == 3.0
    assert [a["accepted"] for a in artifact["attempts"]] == [True]

    manifest = read_json(pipeline["out"] / "manifest-examples.json")
    entry = manifest["tools"]["add"]
    assert entry["status"] == "done"
    assert entry["artifact"] == "examples/add.json"
    assert entry["tool_calls"] == 1
    assert entry["llm_calls"] > 0
    assert manifest["last_run"] == {"executed_tools": ["add"], "skipped_tools": []}
    assert {a["path"] for a in manifest["artifacts"]} == {
        "examples/add.json",
        "trace/examples-add.jsonl",
    }
    assert (pipeline["out"] / "trace" / "examples-add.jsonl").exists()


def test_rerun_skips_up_to_date_tools(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    digest_before = read_json(pipeline["out"] / "manifest-examples.json")["tools"]["add"]["sha256"]
    capsys.readouterr()
    assert run_stage(pipeline, "optimize-examples") == 0
    assert "add: up to date, skipped" in capsys.readouterr().out
    manifest = read_json(pipeline["out"] / "manifest-examples.json")
    assert manifest["last_run"] == {"executed_tools": [], "skipped_tools": ["add"]}
    assert manifest["tools"]["add"]["sha256"] == digest_before


def test_docs_stage_recovers_description(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    capsys.readouterr()
    assert run_stage(pipeline, "optimize-docs") == 0
    assert "add: 0.0% -> 100.0% (node 1)" in capsys.readouterr().out

    artifact = read_json(pipeline["out"] / "docs" / "add.json")
    assert artifact["baseline_score"] == 0.0
    assert artifact["optimized_score"] == 1.0
    assert artifact["chosen_node_id"] == 1
    assert artifact["original"]["parameters"]["properties"]["a"]["description"] == ""
    assert artifact["optimized"]["parameters"]["properties"]["a"]["description"] == RESTORED_MARK
    assert artifact["optimized"]["version_tag"] == 1
    assert artifact["trajectory"] == [
        {"depth": 0, "node_id": 0, "score": 0.0},
        {"depth": 1, "node_id": 1, "score": 1.0},
    ]
    diff_text = (pipeline["out"] / "docs" / "add.diff.txt").read_text()
    assert RESTORED_MARK in diff_text
    manifest = read_json(pipeline["out"] / "manifest-docs.json")
    assert manifest["tools"]["add"]["status"] == "done"


def test_docs_stage_fails_without_examples(pipeline, capsys):
    assert run_stage(pipeline, "optimize-docs") == 2
    err = capsys.readouterr().err
    assert "no examples artifact" in err
    manifest = read_json(pipeline["out"] / "manifest-docs.json")
    assert manifest["tools"]["add"]["status"] == "failed"


def test_evaluate_reports_improvement(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    assert run_stage(pipeline, "optimize-docs") == 0
    capsys.readouterr()
    assert run_stage(pipeline, "evaluate") == 0
    out = capsys.readouterr().out
    assert "category" in out and "baseline" in out
    assert "+100.0" in out

    report = read_json(pipeline["out"] / "eval" / "report.json")
    assert report["baseline"] == {"unweighted": 0.0, "weighted": 0.0}
    assert report["optimized"] == {"unweighted": 1.0, "weighted": 1.0}
    assert report["delta"]["unweighted"] == 1.0
    category = report["categories"]["add"]
    assert category["count"] == 1
    assert category["weight"] == 2.0
    assert report["entries"][0]["query"] == "What do I get combining 2 with 3?"
    assert (pipeline["out"] / "manifest-evaluate.json").exists()


def test_evaluate_with_queries_file(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    assert run_stage(pipeline, "optimize-docs") == 0
    queries = pipeline["tmp"] / "queries.json"
    queries.write_text(
        json.dumps(
            [
                {
                    "tool": "add",
                    "query": "combine 2 with 3",
                    "gold": {"name": "add", "arguments": {"a": 2, "b": 3}},
                    "category": "simple",
                    "weight": 0.5,
                },
                {
                    "tool": "add",
                    "query": "sum 2 and 3 please",
                    "gold": {"name": "add", "arguments": {"a": 2, "b": 3}},
                },
            ]
        )
    )
    capsys.readouterr()
    assert run_stage(pipeline, "evaluate", "--queries", str(queries)) == 0
    report = read_json(pipeline["out"] / "eval" / "report.json")
    assert set(report["categories"]) == {"simple", "add"}
    assert report["categories"]["simple"]["weight"] == 0.5
    assert report["categories"]["add"]["weight"] == 2.0
    assert report["optimized"]["unweighted"] == 1.0


def test_evaluate_rejects_unknown_tools_in_queries(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    queries = pipeline["tmp"] / "queries.json"
    queries.write_text(
        json.dumps([{"tool": "mul", "query": "q", "gold": {"name": "mul", "arguments": {}}}])
    )
    capsys.readouterr()
    assert run_stage(pipeline, "evaluate", "--queries", str(queries)) == 1
    assert "mul" in capsys.readouterr().err


# --- partial failure -----------------------------------------------------------


def test_one_failing_tool_yields_exit_2(pipeline, capsys, runner_script):
    lookup = registry_entry(
        "lookup",
        {
            "kind": "rest",
            "method": "GET",
            "url": "http://127.0.0.1:1/item/{item_id}",
            "placement": {"item_id": "path"},
        },
        description="Looks up an item.",
        properties={"item_id": {"type": "string", "description": "item identifier"}},
        required=["item_id"],
    )
    write_registry_file(pipeline["registry"], [add_entry(runner_script), lookup])
    # route lookup's generation to a call that leaves the path slot unbound
    bad_call = '{"name": "lookup", "parameters": {"properties": {"q": "x"}}}'
    write_mock(pipeline["mock"], [{"contains": "lookup", "response": bad_call}] + PIPELINE_RULES)

    assert run_stage(pipeline, "optimize-examples") == 2
    captured = capsys.readouterr()
    assert "add: ok" in captured.out
    assert "lookup: failed" in captured.err
    manifest = read_json(pipeline["out"] / "manifest-examples.json")
    assert manifest["tools"]["add"]["status"] == "done"
    assert manifest["tools"]["lookup"]["status"] == "failed"
    assert "ExecutorConfigError" in manifest["tools"]["lookup"]["error"]

    # a rerun keeps the finished tool and retries only the failed one
    assert run_stage(pipeline, "optimize-examples") == 2
    captured = capsys.readouterr()
    assert "add: up to date, skipped" in captured.out
    manifest = read_json(pipeline["out"] / "manifest-examples.json")
    assert manifest["last_run"]["skipped_tools"] == ["add"]


# --- replay ----------------------------------------------------------------------


def test_replay_reproduces_examples_and_docs(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    assert run_stage(pipeline, "optimize-docs") == 0
    capsys.readouterr()
    for stage in ("examples", "docs"):
        code = main(
            [
                "replay",
                "--manifest",
                str(pipeline["out"] / f"manifest-{stage}.json"),
                "--out",
                str(pipeline["tmp"] / f"replay-{stage}"),
            ]
        )
        assert code == 0, capsys.readouterr().err
        assert "replay ok: 1 artifact(s) reproduced byte for byte" in capsys.readouterr().out


def test_replay_detects_mutated_mock_script(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    rules = [dict(r) for r in PIPELINE_RULES]
    rules[5]["response"] = "A different reflection."
    write_mock(pipeline["mock"], rules)
    capsys.readouterr()
    code = main(["replay", "--manifest", str(pipeline["out"] / "manifest-examples.json")])
    assert code == 1
    assert "no longer matches the recorded digest" in capsys.readouterr().err


def test_replay_requires_mock_backed_manifest(pipeline, capsys):
    assert run_stage(pipeline, "optimize-examples") == 0
    manifest_path = pipeline["out"] / "manifest-examples.json"
    data = read_json(manifest_path)
    data["mock_script"] = None
    manifest_path.write_text(json.dumps(data))
    capsys.readouterr()
    assert main(["replay", "--manifest", str(manifest_path)]) == 1
    assert "only works for runs driven by --mock-script" in capsys.readouterr().err


# --- noise -----------------------------------------------------------------------


@pytest.fixture
def described_registry(tmp_path, runner_script):
    entries = [
        registry_entry(
            "add",
            {"kind": "subprocess", "command": ["python3", str(runner_script)], "function": "add"},
        ),
        registry_entry(
            "echo",
            {"kind": "subprocess", "command": ["python3", str(runner_script)], "function": "echo"},
            description="Echoes text.",
            properties={"text": {"type": "string", "description": "what to repeat"}},
            required=["text"],
        ),
    ]
    return write_registry_file(tmp_path / "full.json", entries)


def test_noise_drops_descriptions_deterministically(described_registry, tmp_path, capsys):
    out_a = tmp_path / "a.json"
    out_b = tmp_path / "b.json"
    for out in (out_a, out_b):
        assert main(
            ["noise", "--registry", str(described_registry), "--seed", "5", "--p", "0.5",
             "--out", str(out)]
        ) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert "of 3 parameter descriptions (p=0.5)" in capsys.readouterr().out
    noised = load_registry(out_a)
    originals = load_registry(described_registry)
    kept = [p.description for t in noised for p in t.documentation.parameters]
    assert any(not d for d in kept) or kept == [
        p.description for t in originals for p in t.documentation.parameters
    ]


def test_noise_p_one_empties_everything(described_registry, tmp_path, capsys):
    out = tmp_path / "all.json"
    assert main(
        ["noise", "--registry", str(described_registry), "--seed", "1", "--p", "1.0",
         "--out", str(out)]
    ) == 0
    assert "dropped 3 of 3" in capsys.readouterr().out
    noised = load_registry(out)
    assert all(p.description == "" for t in noised for p in t.documentation.parameters)


def test_noise_default_output_path(described_registry, capsys):
    assert main(["noise", "--registry", str(described_registry), "--seed", "2"]) == 0
    expected = Path(str(described_registry)).with_suffix(".noised.json")
    assert expected.exists()
    assert str(expected) in capsys.readouterr().out


def test_noise_rejects_bad_probability(described_registry, capsys):
    code = main(["noise", "--registry", str(described_registry), "--seed", "2", "--p", "1.5"])
    assert code == 1
    assert "error:" in capsys.readouterr().err
