import random

import pytest

from models import CheckResult, EnvSession, ToolCall
from services import environment
from services.environment import (
    API_CATALOGUE,
    PAGE_SIZE,
    TOY_USER,
    TOYWORLD_ID,
    ActionSyntaxError,
    UnknownChecker,
    UnknownEnv,
    UnknownLabel,
    configure_toyworld,
    grade_checks,
    reference_solution,
    parse_action,
    toy_password,
    toy_token,
)


def _logged_in(seed: int) -> EnvSession:
    session = environment.reset(TOYWORLD_ID, seed)
    assert environment.exec_action(session, ToolCall(api="login", args={"user": TOY_USER, "password": toy_password(seed)})).ok
    return session


# ---------------------------------------------------------------- action grammar

def test_parse_action_values():
    call = parse_action("update_item(token='abc', id=3, time=-15, enabled=true, tags=['a', \"b\"])")
    assert call.api == "update_item"
    assert call.args == {"token": "abc", "id": 3, "time": -15, "enabled": True, "tags": ["a", "b"]}
    assert parse_action("  `show_apis()`  ").args == {}
    assert parse_action("update_item(id=1, enabled=False)").args["enabled"] is False


@pytest.mark.parametrize(
    "text",
    ["", "login", "login('operator')", "a.b(x=1)", "f(x=1.5)", "f(x=[[1]])", "f(x=1, x=2)", "f(**kw)", "f(x=y)"],
)
def test_parse_action_rejects(text):
    with pytest.raises(ActionSyntaxError):
        parse_action(text)


def test_rendered_calls_parse_back():
    call = ToolCall(api="update_item", args={"token": "t'k", "id": 2, "enabled": True})
    assert parse_action(call.render()) == call


# ---------------------------------------------------------------- contract

def test_reset_is_deterministic():
    first, second = environment.reset(TOYWORLD_ID, 42), environment.reset(TOYWORLD_ID, 42)
    assert environment.serialize_state(first) == environment.serialize_state(second)
    assert environment.serialize_state(first) != environment.serialize_state(environment.reset(TOYWORLD_ID, 43))


def test_unknown_env():
    with pytest.raises(UnknownEnv):
        environment.reset("nowhere", 1)


def test_failed_call_leaves_state_and_consumes_step():
    session = environment.reset(TOYWORLD_ID, 5)
    before = environment.serialize_state(session)
    result = environment.exec_action(session, ToolCall(api="list_items", args={"token": "nope"}))
    assert not result.ok
    assert result.render().startswith("Error: ")
    assert environment.serialize_state(session) == before
    assert session.step_count == 1
    assert session.errors and "list_items" in session.errors[0]


def test_syntax_error_is_in_band():
    session = environment.reset(TOYWORLD_ID, 5)
    result = environment.exec_text(session, "login(")
    assert not result.ok
    assert "could not parse action" in result.error
    assert session.step_count == 1


def test_unknown_api_and_unexpected_args_are_in_band():
    session = _logged_in(6)
    assert "show_apis" in environment.exec_action(session, ToolCall(api="drop_table")).error
    result = environment.exec_action(session, ToolCall(api="list_items", args={"token": toy_token(6), "size": 10}))
    assert "size" in result.error


def test_show_apis_needs_no_token():
    session = environment.reset(TOYWORLD_ID, 1)
    result = environment.exec_action(session, ToolCall(api="show_apis"))
    assert result.ok
    assert [entry["name"] for entry in result.payload] == [entry["name"] for entry in API_CATALOGUE]


def test_login_checks_credentials():
    session = environment.reset(TOYWORLD_ID, 9)
    assert not environment.exec_action(session, ToolCall(api="login", args={"user": TOY_USER, "password": "guess"})).ok
    assert session.state["logged_in"] is False


def test_page_zero_is_an_error():
    session = _logged_in(3)
    result = environment.exec_action(session, ToolCall(api="list_items", args={"token": toy_token(3), "page": 0}))
    assert not result.ok


@pytest.mark.parametrize("size", range(0, 11))
def test_pagination_concatenates_to_full_store(size):
    items = [{"id": i + 1, "label": f"item{i}", "enabled": i % 2 == 0, "time": 15 * i} for i in range(size)]
    configure_toyworld({500: items})
    session = _logged_in(500)
    collected, page = [], 1
    while True:
        result = environment.exec_action(session, ToolCall(api="list_items", args={"token": toy_token(500), "page": page}))
        assert result.ok
        assert len(result.payload) <= PAGE_SIZE
        if not result.payload:
            break
        collected += result.payload
        page += 1
    assert collected == items
    assert page == (size + PAGE_SIZE - 1) // PAGE_SIZE + 1


def test_update_create_delete():
    session = _logged_in(11)
    token = toy_token(11)
    count = len(session.state["items"])
    updated = environment.exec_action(session, ToolCall(api="update_item", args={"token": token, "id": 1, "time": 45, "enabled": False}))
    assert updated.payload["time"] == 45 and updated.payload["enabled"] is False
    assert not environment.exec_action(session, ToolCall(api="update_item", args={"token": token, "id": 1})).ok
    assert not environment.exec_action(session, ToolCall(api="update_item", args={"token": token, "id": 1, "time": -5})).ok
    created = environment.exec_action(session, ToolCall(api="create_item", args={"token": token, "label": "new"}))
    assert created.payload["id"] == count + 1
    assert environment.exec_action(session, ToolCall(api="delete_item", args={"token": token, "id": 1})).ok
    assert not environment.exec_action(session, ToolCall(api="delete_item", args={"token": token, "id": 1})).ok
    assert len(session.state["items"]) == count


# ---------------------------------------------------------------- outcome

def test_reference_solution_scores_zero(toy_env):
    for seed in (101, 102, 103, 201, 202, 203):
        task = toy_env.make_task(seed)
        session = environment.reset(TOYWORLD_ID, seed)
        for action in task.solution:
            assert environment.exec_text(session, action).ok
        grade = environment.evaluate(session, task)
        assert grade.loss == 0
        assert grade.feedback == "All 4 checks passed."


def _oracle_loss(initial_items, final_items, label, shift):
    """Independent restatement of the shift-and-disable checks."""
    target = [item for item in initial_items if item["label"] == label][0]
    final_by_id = {item["id"]: item for item in final_items}
    failures = 0
    now = final_by_id.get(target["id"])
    failures += now is None or now["time"] != target["time"] + shift
    failures += now is None or not now["enabled"]
    failures += any(item["enabled"] for item in final_items if item["id"] != target["id"])
    failures += len(final_items) != len(initial_items)
    return failures / 4


def _random_action(rng: random.Random, session: EnvSession, seed: int) -> ToolCall:
    token = toy_token(seed) if rng.random() < 0.9 else "bad-token"
    ids = [item["id"] for item in session.state["items"]] or [1]
    choice = rng.random()
    if choice < 0.5:
        args = {"token": token, "id": rng.choice(ids)}
        if rng.random() < 0.6:
            args["enabled"] = rng.random() < 0.5
        if rng.random() < 0.6:
            args["time"] = rng.randrange(0, 1500, 15)
        return ToolCall(api="update_item", args=args)
    if choice < 0.6:
        return ToolCall(api="delete_item", args={"token": token, "id": rng.choice(ids)})
    if choice < 0.7:
        return ToolCall(api="create_item", args={"token": token, "label": "extra"})
    return ToolCall(api="list_items", args={"token": token, "page": rng.randint(1, 3)})


def test_evaluate_matches_oracle_on_random_terminal_states(toy_env):
    rng = random.Random(2024)
    for trial in range(50):
        seed = 300 + trial
        task = toy_env.make_task(seed)
        session = _logged_in(seed)
        for _ in range(rng.randint(0, 12)):
            environment.exec_action(session, _random_action(rng, session, seed))
        grade = environment.evaluate(session, task)
        initial = toy_env.initial_state(seed)["items"]
        expected = _oracle_loss(initial, session.state["items"], task.checker_args["label"], task.checker_args["shift"])
        assert grade.loss == expected, f"seed {seed}"


def test_binary_grading_collapses_checks(toy_env):
    task = toy_env.make_task(101).model_copy(update={"grading": "binary"})
    session = environment.reset(TOYWORLD_ID, 101)
    grade = environment.evaluate(session, task)
    assert grade.loss == 1.0
    assert [check.name for check in grade.checks] == ["task_complete"]


def test_graded_feedback_lists_failures_and_errors():
    checks = [CheckResult(name="a", passed=True), CheckResult(name="b", passed=False, detail="b is wrong")]
    grade = grade_checks(checks, errors=[f"e{i}" for i in range(15)])
    assert grade.loss == 0.5
    assert "- b: b is wrong" in grade.feedback
    assert "- e14" in grade.feedback and "- e4\n" not in grade.feedback


def test_unknown_checker(toy_task):
    bad = toy_task.model_copy(update={"checker_ref": "nothing"})
    with pytest.raises(UnknownChecker):
        environment.evaluate(environment.reset(TOYWORLD_ID, toy_task.scenario_seed), bad)


def test_generated_tasks_are_stable(toy_env):
    first, second = toy_env.make_task(104), toy_env.make_task(104)
    assert first == second
    assert first.task_id == "train-104"
    assert first.checker_args["shift"] in (30, 60, 90)


def test_missing_label_fails_target_checks(toy_task):
    task = toy_task.model_copy(update={"checker_args": {"label": "no-such-label", "shift": 30}})
    grade = environment.evaluate(environment.reset(TOYWORLD_ID, task.scenario_seed), task)
    failed = {check.name: check.detail for check in grade.checks if not check.passed}
    assert set(failed) == {"target_shifted", "target_enabled", "non_targets_disabled"}
    assert "no-such-label" in failed["target_shifted"]
    assert grade.loss == 0.75


def test_reference_solution_needs_known_label(toy_env):
    with pytest.raises(UnknownLabel, match="no-such-label"):
        reference_solution(toy_env.items_for(101), "no-such-label", 30, 101)
