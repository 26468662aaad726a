import random

import pytest

from src.controller import TaskParser, parse_task_request, task_id_for
from src.errors import MalformedOption, TemplateNotFound, UnrecognizedTaskKind, UnresolvedPlaceholder
from src.workflow_model import (
    TaskNode,
    TaskRequest,
    TaskSpec,
    TemplateCatalog,
    WorkflowSpec,
    canonical_json,
    instantiate_workflow,
    validate_workflow,
)
from tests.conftest import TEMPLATES, mock_handle


@pytest.fixture
def catalog():
    return TemplateCatalog.load(TEMPLATES)


def chain(*ids, edges=None):
    edges = edges or {b: (a,) for a, b in zip(ids, ids[1:])}
    return WorkflowSpec(spec_id="t", nodes=tuple(
        TaskNode(node_id=i, operator_kind="task-management", depends_on=edges.get(i, ())) for i in ids))


def test_keyword_table_picks_novel_generation(catalog):
    spec = parse_task_request(TaskRequest(raw_text="write a novel from outline.json"), catalog)
    assert spec.kind == "novel-generation"
    assert spec.parameters["outline_path"] == "outline.json"
    assert spec.parameters["chapter"] == 1


def test_blank_request_is_rejected(catalog):
    with pytest.raises(UnrecognizedTaskKind):
        parse_task_request(TaskRequest(raw_text="   "), catalog)


def test_kind_option_overrides_text(catalog):
    spec = parse_task_request(TaskRequest(raw_text="x", options={"kind": "generic-dag", "spec": "wf.json"}), catalog)
    assert spec.kind == "generic-dag"
    assert spec.parameters["spec"] == "wf.json"


def test_unmatched_text_is_unrecognized(catalog):
    with pytest.raises(UnrecognizedTaskKind):
        parse_task_request(TaskRequest(raw_text="make me a sandwich"), catalog)


def test_malformed_integer_option(catalog):
    with pytest.raises(MalformedOption) as exc:
        parse_task_request(TaskRequest(raw_text="novel", options={"chapter": "three"}), catalog)
    assert exc.value.option == "chapter"


def test_parse_is_deterministic(catalog):
    req = TaskRequest(raw_text="write chapter 4 of the story", options={"seed": "7"})
    first, second = parse_task_request(req, catalog), parse_task_request(req, catalog)
    assert canonical_json(first) == canonical_json(second)
    assert first.parameters["chapter"] == 4 and first.parameters["seed"] == 7
    assert first.task_id == task_id_for("novel-generation", req.raw_text, dict(req.options))


@pytest.mark.asyncio
async def test_reasoning_fallback_names_a_catalogued_kind(catalog):
    """Keyword miss falls back to the reasoning operator."""
    handle = mock_handle({"classify:task": {"text": "1. it lists steps\nANSWER: generic-dag"}})
    parser = TaskParser(catalog, reasoning_handle=handle, use_reasoning=True)
    spec = await parser.parse(TaskRequest(raw_text="orchestrate these jobs"))
    assert spec.kind == "generic-dag"


@pytest.mark.asyncio
async def test_reasoning_fallback_rejects_unknown_kind(catalog):
    handle = mock_handle({"classify:task": {"text": "ANSWER: poetry"}})
    parser = TaskParser(catalog, reasoning_handle=handle, use_reasoning=True)
    with pytest.raises(UnrecognizedTaskKind):
        await parser.parse(TaskRequest(raw_text="orchestrate these jobs"))


def test_novel_template_has_the_story_loop(catalog):
    spec = parse_task_request(TaskRequest(raw_text="novel", options={"chapter": "2", "backend": "m"}), catalog)
    workflow = instantiate_workflow(spec, catalog)
    assert set(workflow.node_ids) == {"load-env", "gen-goals", "gen-candidates", "decide", "write", "commit",
                                      "ending-check"}
    assert workflow.metadata == {"kind": "novel-generation", "chapter": "ch2"}
    assert workflow.node("gen-candidates").params["n_candidates"] == 3
    assert workflow.node("write").params["resource"] == "m"
    assert validate_workflow(workflow).ok


def test_empty_generic_dag_is_unresolved(catalog):
    spec = TaskSpec(task_id="t1", kind="generic-dag", parameters={"nodes": []})
    with pytest.raises(UnresolvedPlaceholder) as exc:
        instantiate_workflow(spec, catalog)
    assert exc.value.names == ["nodes"]


def test_generic_dag_with_nodes(catalog):
    nodes = [{"node_id": "a", "operator_kind": "task-management"},
             {"node_id": "b", "operator_kind": "task-management", "depends_on": ["a"]}]
    workflow = instantiate_workflow(TaskSpec(task_id="t2", kind="generic-dag", parameters={"nodes": nodes}), catalog)
    assert workflow.spec_id == "t2"
    assert workflow.node("b").depends_on == ("a",)


def test_unknown_kind_has_no_template(catalog):
    with pytest.raises(TemplateNotFound):
        instantiate_workflow(TaskSpec(task_id="t", kind="nonexistent"), catalog)


def test_chain_validates_clean():
    assert validate_workflow(chain("A", "B", "C")).violations == ()


def test_two_node_cycle_reported():
    report = validate_workflow(chain("A", "B", edges={"A": ("B",), "B": ("A",)}))
    assert len(report.cycles()) == 1
    assert sorted(report.cycles()[0]) == ["A", "B"]


def test_dangling_and_duplicate_ids():
    spec = WorkflowSpec(spec_id="t", nodes=(
        TaskNode(node_id="A", operator_kind="memory"),
        TaskNode(node_id="A", operator_kind="memory"),
        TaskNode(node_id="B", operator_kind="memory", depends_on=("Z",)),
    ))
    kinds = sorted(v.kind for v in validate_workflow(spec).violations)
    assert kinds == ["dangling_dependency", "duplicate_id"]


def _has_cycle(edges):
    """Reference DFS: node -> deps."""
    state = {}

    def visit(n):
        state[n] = 1
        for d in edges[n]:
            if state.get(d) == 1 or (d not in state and visit(d)):
                return True
        state[n] = 2
        return False

    return any(n not in state and visit(n) for n in edges)


def test_cycle_detection_matches_reference_dfs():
    rng = random.Random(11)
    for trial in range(100):
        n = rng.randint(2, 10)
        ids = [f"n{i}" for i in range(n)]
        edges = {i: [] for i in ids}
        for b in range(1, n):
            for a in range(b):
                if rng.random() < 0.3:
                    edges[ids[b]].append(ids[a])
        if trial % 2:
            a, b = sorted(rng.sample(range(n), 2))
            edges[ids[a]].append(ids[b])
            if ids[a] not in edges[ids[b]]:
                edges[ids[b]].append(ids[a])
        spec = chain(*ids, edges={k: tuple(dict.fromkeys(v)) for k, v in edges.items()})
        assert (not validate_workflow(spec).ok) == _has_cycle(edges)
