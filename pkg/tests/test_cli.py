import json

import pytest

from src.cli import main
from tests.conftest import DNF_DATA


def write_spec(path, edges, **extra):
    nodes = [{"node_id": n, "operator_kind": "task-management", "depends_on": deps,
              "params": {"op": "echo", "value": n}} for n, deps in edges.items()]
    path.write_text(json.dumps({"spec_id": "cli", "nodes": nodes, **extra}))
    return path


def test_validate_reports_cycle(tmp_path, capsys):
    spec = write_spec(tmp_path / "cyclic.json", {"A": ["B"], "B": ["A"]})
    assert main(["--json", "validate", "--spec", str(spec)]) == 1
    out = json.loads(capsys.readouterr().out)
    assert out["ok"] is False
    assert [v["kind"] for v in out["violations"]] == ["cycle"]


def test_plan_prints_stages(tmp_path, capsys):
    spec = write_spec(tmp_path / "diamond.json", {"A": [], "B": ["A"], "C": ["A"], "D": ["B", "C"]})
    assert main(["--json", "plan", "--spec", str(spec)]) == 0
    assert json.loads(capsys.readouterr().out)["stages"] == [["A"], ["B", "C"], ["D"]]


def test_run_executes_echo_nodes(tmp_path, capsys):
    spec = write_spec(tmp_path / "chain.json", {"A": [], "B": ["A"]})
    events = tmp_path / "events.ndjson"
    code = main(["--json", "run", "--spec", str(spec), "--root", str(tmp_path / "store"), "--events", str(events)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["statuses"] == {"A": "succeeded", "B": "succeeded"}
    assert len(events.read_text().splitlines()) == 6


def test_dnf_train_then_eval(tmp_path, capsys):
    model = tmp_path / "model.json"
    assert main(["--json", "dnf", "train", "--data", str(DNF_DATA), "--clauses", "4", "--seed", "7",
                 "--out", str(model)]) == 0
    capsys.readouterr()
    assert main(["--json", "dnf", "eval", "--model", str(model), "--data", str(DNF_DATA)]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == 1.0


def test_versions_of_unknown_key(tmp_path, capsys):
    assert main(["versions", "nothing", "--root", str(tmp_path)]) == 1
    assert "nothing" in capsys.readouterr().err


def test_missing_spec_source_is_usage_error(capsys):
    assert main(["plan"]) == 2


def test_unknown_command_is_usage_error(capsys):
    assert main(["explode"]) == 2


def test_agents_list_on_empty_registry(tmp_path, capsys):
    assert main(["--json", "agents", "--registry", str(tmp_path / "registry.json"), "list"]) == 0
    assert json.loads(capsys.readouterr().out) == {"agents": []}


@pytest.mark.parametrize("parallelism", ["0", "-1"])
def test_non_positive_parallelism_is_usage_error(tmp_path, capsys, parallelism):
    spec = write_spec(tmp_path / "chain.json", {"A": [], "B": ["A"]})
    code = main(["run", "--spec", str(spec), "--root", str(tmp_path / "store"), "--parallelism", parallelism])
    assert code == 2
    assert "parallelism" in capsys.readouterr().err


def test_zero_candidates_is_usage_error(demo_project, tmp_path):
    assert main(["creagentive", "run", "--project", str(demo_project), "--out", str(tmp_path / "out"),
                 "--candidates", "0"]) == 2


def test_missing_model_file_is_environment_error(tmp_path, capsys):
    assert main(["dnf", "eval", "--model", str(tmp_path / "missing.json"), "--data", str(DNF_DATA)]) == 3
    assert "missing.json" in capsys.readouterr().err


def test_malformed_model_file_is_environment_error(tmp_path, capsys):
    model = tmp_path / "model.json"
    model.write_text("{not json")
    assert main(["dnf", "eval", "--model", str(model), "--data", str(DNF_DATA)]) == 3
    assert "malformed JSON" in capsys.readouterr().err


def test_json_flag_after_the_command(tmp_path, capsys):
    spec = write_spec(tmp_path / "diamond.json", {"A": [], "B": ["A"], "C": ["A"], "D": ["B", "C"]})
    assert main(["plan", "--spec", str(spec), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["stages"] == [["A"], ["B", "C"], ["D"]]
    assert main(["agents", "--registry", str(tmp_path / "registry.json"), "list", "--json"]) == 0
    assert json.loads(capsys.readouterr().out) == {"agents": []}
    assert main(["plan", "--spec", str(spec)]) == 0
    assert json.loads(capsys.readouterr().out) == [["A"], ["B", "C"], ["D"]]
