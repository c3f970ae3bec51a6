import json

import pytest
from click.testing import CliRunner

from commands import BASELINE_RESULTS_FILE, RESULTS_FILE, cmd_demo, cmd_eval, cmd_inspect, cmd_mine
from config import RetrievalSettings
from main import cli
from models import EvalResult
from services.dataset import load_tasks
from services.demo import DEMO_MARKER, demo_script
from services.evaluation import aggregate, net_contribution, over_budget
from services.provider import ScriptedProvider
from utils.storage import read_jsonl

TRAIN_IDS = ["train-101", "train-102", "train-103"]
HELDOUT_IDS = ["heldout-201", "heldout-202", "heldout-203"]


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("demo") / "out"
    status = cmd_demo(workdir)
    return status, workdir


def _demo_provider(config, tasks, audit=None):
    return ScriptedProvider(demo_script(list(tasks.values()), config.stop_marker), audit=audit)


def _mine(config, task_ids=None):
    tasks = load_tasks(config)
    return cmd_mine(config, task_ids, provider=_demo_provider(config, tasks), tasks=tasks), tasks


def test_demo_exits_cleanly(demo_run):
    status, workdir = demo_run
    assert status == 0
    assert (workdir / DEMO_MARKER).exists()
    assert (workdir / "audit.jsonl").exists()
    index = read_jsonl(workdir / "library" / "index.jsonl")
    assert [record["task_id"] for record in index] == TRAIN_IDS


def test_demo_loss_curve_improves(demo_run):
    _, workdir = demo_run
    for task_id in TRAIN_IDS:
        records = read_jsonl(workdir / "runs" / task_id / "index.jsonl")
        assert len(records) == 4
        assert records[0]["outcome"] > 0
        assert any(record["outcome"] == 0 for record in records[:3])
        assert [record["prompt_version_before"] for record in records] == [0, 1, 2, 3]
        assert sum(record["is_best"] for record in records) >= 1
        assert records[-1]["is_best"]
        assert (workdir / "runs" / task_id / "best.md").exists()


def test_demo_heldout_tasks_pass_with_skills_only(demo_run):
    _, workdir = demo_run
    results = read_jsonl(workdir / "results" / RESULTS_FILE)
    baseline = read_jsonl(workdir / "results" / BASELINE_RESULTS_FILE)
    assert [record["task_id"] for record in results] == HELDOUT_IDS
    assert all(record["passed"] and len(record["retrieved_ids"]) == 3 for record in results)
    assert not any(record["passed"] for record in baseline)
    assert all(record["injected_tokens"] == 0 for record in baseline)


def test_demo_rerun_is_byte_identical(demo_run, tmp_path):
    _, workdir = demo_run
    rerun = tmp_path / "again"
    assert cmd_demo(rerun) == 0
    for relative in ("results/results.jsonl", "results/results.baseline.jsonl", "library/index.jsonl",
                     "library/train-102.skill.md", "runs/train-101/index.jsonl"):
        assert (rerun / relative).read_bytes() == (workdir / relative).read_bytes()
    assert cmd_demo(rerun) == 0
    assert (rerun / "results" / RESULTS_FILE).read_bytes() == (workdir / "results" / RESULTS_FILE).read_bytes()


def test_demo_refuses_foreign_directory(tmp_path, capsys):
    (tmp_path / "notes.txt").write_text("keep me", encoding="utf-8")
    assert cmd_demo(tmp_path) == 1
    assert (tmp_path / "notes.txt").exists()
    assert "not created by the demo" in capsys.readouterr().err


def test_mine_without_source_fails(app_config, make_provider, capsys):
    tasks = load_tasks(app_config)
    tasks["train-101"] = tasks["train-101"].model_copy(update={"solution": None})
    assert cmd_mine(app_config, ["train-101"], provider=make_provider([]), tasks=tasks) == 1
    captured = capsys.readouterr()
    assert "ERROR train-101: MissingSource" in captured.err
    assert "failed" in captured.out


def test_mine_unknown_task(app_config, make_provider, capsys):
    assert cmd_mine(app_config, ["train-999"], provider=make_provider([])) == 1
    assert "unknown task id" in capsys.readouterr().err


def test_mine_rerun_gives_identical_library(app_config, tmp_path):
    status, _ = _mine(app_config, ["train-101"])
    assert status == 0
    index_path = tmp_path / "library" / "index.jsonl"
    first = index_path.read_bytes()
    skill = (tmp_path / "library" / "train-101.skill.md").read_bytes()
    status, _ = _mine(app_config, ["train-101"])
    assert status == 0
    assert index_path.read_bytes() == first
    assert (tmp_path / "library" / "train-101.skill.md").read_bytes() == skill


def test_parallel_mining_matches_sequential(app_config, tmp_path):
    assert _mine(app_config)[0] == 0
    sequential = (tmp_path / "library" / "index.jsonl").read_bytes()
    parallel_config = app_config.model_copy(update={"parallel": 3}, deep=True)
    parallel_config.paths.library_dir = str(tmp_path / "library_parallel")
    parallel_config.paths.runs_dir = str(tmp_path / "runs_parallel")
    assert _mine(parallel_config)[0] == 0
    assert (tmp_path / "library_parallel" / "index.jsonl").read_bytes() == sequential


def test_eval_with_empty_library(app_config, make_provider, capsys):
    assert cmd_eval(app_config, provider=make_provider([])) == 1
    assert "library empty" in capsys.readouterr().err


def test_more_skills_inject_more_tokens(app_config, tmp_path):
    _, tasks = _mine(app_config)
    tokens = {}
    for k in (1, 3):
        config = app_config.model_copy(update={"retrieval": RetrievalSettings(k=k, mode="model")})
        assert cmd_eval(config, provider=_demo_provider(config, tasks), tasks=tasks) == 0
        records = read_jsonl(tmp_path / "results" / RESULTS_FILE)
        assert all(len(record["retrieved_ids"]) == k and record["k"] == k for record in records)
        tokens[k] = {record["task_id"]: record["injected_tokens"] for record in records}
    assert all(tokens[1][task_id] < tokens[3][task_id] for task_id in HELDOUT_IDS)


def test_eval_snapshot_of_first_iteration(app_config, tmp_path, capsys):
    _, tasks = _mine(app_config)
    capsys.readouterr()
    assert cmd_eval(app_config, provider=_demo_provider(app_config, tasks), tasks=tasks, snapshot=0) == 0
    records = read_jsonl(tmp_path / "results" / "results.snapshot_0.jsonl")
    assert not any(record["passed"] for record in records)
    assert "pass rate: 0/3" in capsys.readouterr().out


def test_inspect_targets(app_config, capsys):
    _mine(app_config, ["train-101"])
    capsys.readouterr()

    assert cmd_inspect(app_config, "library") == 0
    assert "target-then-bulk-update" in capsys.readouterr().out

    assert cmd_inspect(app_config, "run:train-101") == 0
    rows = capsys.readouterr().out.splitlines()[2:]
    assert len(rows) == 4
    assert "*" in rows[3]

    assert cmd_inspect(app_config, "skill:train-101") == 0
    assert capsys.readouterr().out.startswith("---\nname: target-then-bulk-update")

    assert cmd_inspect(app_config, "losses") == 0
    assert len(capsys.readouterr().out.splitlines()) == 6

    assert cmd_inspect(app_config, "skill:missing") == 1
    assert "UnknownTarget" in capsys.readouterr().err


def test_cli_inspect_unknown_target(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    result = CliRunner().invoke(cli, ["inspect", "bogus"])
    assert result.exit_code == 1
    assert "UnknownTarget" in result.output


def test_cli_rejects_broken_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "broken.json").write_text("{not json", encoding="utf-8")
    result = CliRunner().invoke(cli, ["mine", "--config", "broken.json"])
    assert result.exit_code == 2
    assert "not valid JSON" in result.output


def test_cli_mine_needs_credentials(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr("services.provider.MINDSKILL_API_KEY", None)
    (tmp_path / "config.json").write_text(json.dumps({"train_seeds": [101], "heldout_seeds": []}), encoding="utf-8")
    result = CliRunner().invoke(cli, ["mine", "--config", "config.json", "--q", "1"])
    assert result.exit_code == 1
    assert "MINDSKILL_API_KEY" in result.output


def _result(task_id, passed, ids, tokens=10):
    return EvalResult(task_id=task_id, k=len(ids), passed=passed, loss=0.0 if passed else 0.5,
                      injected_tokens=tokens, retrieved_ids=ids)


def test_aggregate_and_net_contribution():
    results = [_result("a", True, ["s1", "s2"]), _result("b", False, ["s1"], 30), _result("c", True, ["s2"])]
    baseline = [_result("a", False, []), _result("b", True, []), _result("c", True, [])]
    summary = aggregate(results)
    assert summary["passed"] == 2 and summary["tasks"] == 3
    assert summary["pass_rate"] == pytest.approx(2 / 3)
    assert summary["total_injected_tokens"] == 50
    assert net_contribution(results, baseline) == {"s1": 0, "s2": 1}
    assert [result.task_id for result in over_budget(results, 20)] == ["b"]
    assert aggregate([])["pass_rate"] == 0.0
