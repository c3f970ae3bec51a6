"""
Environment contract (reset / exec_action / evaluate) and ToyWorld, the
built-in deterministic "tracker" app used for offline end-to-end runs.

Actions are single-line call expressions, e.g.::

    list_items(token='3f2a...', page=2)

See docs/action_syntax.md for the grammar.
"""
import ast
import copy
import hashlib
import json
import logging
import random
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from models import CheckResult, EnvSession, MindSkillError, OutcomeGrade, PreconditionViolation, TaskSpec, ToolCall, ToolResult

logger = logging.getLogger(__name__)


class UnknownEnv(MindSkillError):
    pass


class UnknownChecker(MindSkillError):
    pass


class UnknownLabel(MindSkillError):
    """A task names an item label that its seed's inventory does not have."""


class ActionSyntaxError(MindSkillError):
    """Action text does not follow the call grammar. Only ever surfaced in-band."""


Checker = Callable[[Dict[str, Any], Dict[str, Any], Dict[str, Any]], List[CheckResult]]


# ---------------------------------------------------------------- action grammar

_BOOL_NAMES = {"True": True, "False": False, "true": True, "false": False}


def _literal(node: ast.AST) -> Any:
    if isinstance(node, ast.Constant) and isinstance(node.value, (str, int, bool)) and not isinstance(node.value, float):
        return node.value
    if isinstance(node, ast.Name) and node.id in _BOOL_NAMES:
        return _BOOL_NAMES[node.id]
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub) and isinstance(node.operand, ast.Constant):
        if isinstance(node.operand.value, int) and not isinstance(node.operand.value, bool):
            return -node.operand.value
    if isinstance(node, (ast.List, ast.Tuple)):
        values = [_literal(element) for element in node.elts]
        if any(isinstance(value, list) for value in values):
            raise ActionSyntaxError("lists may not be nested")
        return values
    raise ActionSyntaxError(f"unsupported value {ast.dump(node)[:60]}; use strings, integers, booleans or flat lists")


def parse_action(text: str) -> ToolCall:
    """Parse ``api(name=value, ...)`` into a ToolCall."""
    source = text.strip().strip("`").strip().rstrip(";")
    if not source:
        raise ActionSyntaxError("empty action")
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as e:
        raise ActionSyntaxError(f"not a call expression: {e.msg}")
    call = tree.body
    if not isinstance(call, ast.Call) or not isinstance(call.func, ast.Name):
        raise ActionSyntaxError("expected a call of the form api(name=value, ...)")
    if call.args:
        raise ActionSyntaxError("positional arguments are not supported; pass every argument as name=value")
    args: Dict[str, Any] = {}
    for keyword in call.keywords:
        if keyword.arg is None:
            raise ActionSyntaxError("**kwargs expansion is not supported")
        if keyword.arg in args:
            raise ActionSyntaxError(f"argument '{keyword.arg}' given twice")
        args[keyword.arg] = _literal(keyword.value)
    return ToolCall(api=call.func.id, args=args)


# ---------------------------------------------------------------- contract

class ApiError(Exception):
    """In-band failure of a single API call."""


class Environment(ABC):
    env_id: str = ""

    @abstractmethod
    def initial_state(self, scenario_seed: int) -> Dict[str, Any]:
        """Deterministic initial state for a seed."""

    @abstractmethod
    def dispatch(self, state: Dict[str, Any], call: ToolCall) -> Any:
        """Apply ``call`` to ``state`` in place and return the payload; raise ApiError on failure."""

    @property
    @abstractmethod
    def checkers(self) -> Dict[str, Checker]:
        pass


_REGISTRY: Dict[str, Environment] = {}


def register_environment(env: Environment) -> Environment:
    _REGISTRY[env.env_id] = env
    logger.debug(f"Registered environment {env.env_id} ({type(env).__name__})")
    return env


def get_environment(env_id: str) -> Environment:
    try:
        return _REGISTRY[env_id]
    except KeyError:
        raise UnknownEnv(f"unknown environment '{env_id}' (registered: {sorted(_REGISTRY)})")


def serialize_state(session: EnvSession) -> str:
    return json.dumps(session.state, sort_keys=True)


def reset(env_id: str, scenario_seed: int) -> EnvSession:
    env = get_environment(env_id)
    return EnvSession(env_id=env_id, scenario_seed=scenario_seed, state=env.initial_state(scenario_seed))


def exec_action(session: EnvSession, call: ToolCall) -> ToolResult:
    """Execute one call. Failures are returned in-band and leave the state untouched."""
    env = get_environment(session.env_id)
    working = copy.deepcopy(session.state)
    session.step_count += 1
    try:
        payload = env.dispatch(working, call)
    except ApiError as e:
        result = ToolResult(ok=False, error=str(e))
    except Exception as e:
        logger.error(f"{session.env_id}: unexpected failure executing {call.api}", exc_info=True)
        result = ToolResult(ok=False, error=f"internal error in {call.api}: {e}")
    else:
        session.state = working
        result = ToolResult(ok=True, payload=payload)
    if not result.ok:
        session.errors.append(f"step {session.step_count}: {call.api}: {result.error}")
    return result


def exec_text(session: EnvSession, action_text: str) -> ToolResult:
    """Parse and execute action text; syntax errors consume a step like any other failure."""
    try:
        call = parse_action(action_text)
    except ActionSyntaxError as e:
        session.step_count += 1
        session.errors.append(f"step {session.step_count}: could not parse action: {e}")
        return ToolResult(ok=False, error=f"could not parse action: {e}")
    return exec_action(session, call)


def grade_checks(checks: Sequence[CheckResult], grading: str = "graded", errors: Sequence[str] = ()) -> OutcomeGrade:
    """Turn checker output into an OutcomeGrade.

    Graded mode: loss is the failed-check fraction. Binary mode collapses
    everything into one holistic check.
    """
    checks = list(checks)
    if grading == "binary":
        failed_details = "; ".join(f"{c.name}: {c.detail}" for c in checks if not c.passed)
        checks = [CheckResult(name="task_complete", passed=not failed_details, detail=failed_details)]
    failed = [c for c in checks if not c.passed]
    loss = len(failed) / len(checks) if checks else 1.0

    if not checks:
        feedback = "No checks were evaluated."
    elif not failed:
        feedback = f"All {len(checks)} checks passed."
    else:
        lines = [f"{len(failed)} of {len(checks)} checks failed:"]
        lines += [f"- {c.name}: {c.detail}" for c in failed]
        if errors:
            lines.append("Errors returned by the environment during execution:")
            lines += [f"- {error}" for error in list(errors)[-10:]]
        feedback = "\n".join(lines)
    return OutcomeGrade(loss=loss, feedback=feedback, checks=checks)


def evaluate(session: EnvSession, task: TaskSpec) -> OutcomeGrade:
    if task.env_id != session.env_id:
        raise PreconditionViolation(f"task {task.task_id} targets {task.env_id}, session is {session.env_id}")
    env = get_environment(session.env_id)
    checker = env.checkers.get(task.checker_ref)
    if checker is None:
        raise UnknownChecker(f"environment {env.env_id} has no checker '{task.checker_ref}'")
    initial = env.initial_state(session.scenario_seed)
    grade = grade_checks(checker(initial, session.state, task.checker_args), task.grading, session.errors)
    logger.debug(f"{task.task_id}: outcome loss {grade.loss:g}")
    return grade


# ---------------------------------------------------------------- ToyWorld

TOYWORLD_ID = "toyworld"
PAGE_SIZE = 3
TOY_USER = "operator"
ITEM_FIELDS = ("label", "enabled", "time")
LABEL_POOL = (
    "backup", "cleanup", "digest", "export", "heartbeat", "invoice", "journal", "metrics",
    "nightly", "payroll", "reindex", "rotate", "snapshot", "sync", "upload", "vacuum",
)
SHIFT_CHOICES = (30, 60, 90)

API_CATALOGUE = [
    {"name": "show_apis", "args": [], "description": "List the available apis. No token needed."},
    {"name": "login", "args": ["user", "password"], "description": "Authenticate and return an access token."},
    {"name": "list_items", "args": ["token", "page"], "description": f"List items one page at a time ({PAGE_SIZE} per page, pages start at 1); an empty list means there are no more pages."},
    {"name": "update_item", "args": ["token", "id", "label?", "enabled?", "time?"], "description": "Update the given fields of one item; time is in minutes."},
    {"name": "delete_item", "args": ["token", "id"], "description": "Delete one item."},
    {"name": "create_item", "args": ["token", "label", "enabled?", "time?"], "description": "Create an item and return it."},
]


def toy_password(seed: int) -> str:
    return f"tracker-{seed}"


def toy_token(seed: int) -> str:
    return hashlib.sha256(f"tracker:{seed}:{TOY_USER}".encode("utf-8")).hexdigest()[:16]


def generate_items(seed: int) -> List[Dict[str, Any]]:
    rng = random.Random(seed)
    count = rng.randint(4, 7)
    labels = rng.sample(LABEL_POOL, count)
    return [
        {
            "id": index + 1,
            "label": label,
            "enabled": rng.random() < 0.7,
            "time": rng.randrange(0, 20 * 60, 15),
        }
        for index, label in enumerate(labels)
    ]


def _expect(args: Dict[str, Any], name: str, kind: type) -> Any:
    if name not in args:
        raise ApiError(f"missing argument '{name}'")
    value = args[name]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ApiError(f"argument '{name}' must be an integer")
    if kind is bool and not isinstance(value, bool):
        raise ApiError(f"argument '{name}' must be a boolean")
    if kind is str and (not isinstance(value, str) or not value.strip()):
        raise ApiError(f"argument '{name}' must be a non-empty string")
    return value


def _field_updates(args: Dict[str, Any]) -> Dict[str, Any]:
    updates = {}
    for field, kind in (("label", str), ("enabled", bool), ("time", int)):
        if field in args:
            updates[field] = _expect(args, field, kind)
    if "time" in updates and updates["time"] < 0:
        raise ApiError("argument 'time' must be >= 0")
    return updates


def check_shift_and_disable(initial: Dict[str, Any], final: Dict[str, Any], args: Dict[str, Any]) -> List[CheckResult]:
    label = args["label"]
    shift = int(args.get("shift", 60))
    before = {item["id"]: item for item in initial["items"]}
    after = {item["id"]: item for item in final["items"]}
    target = next((item for item in initial["items"] if item["label"] == label), None)
    if target is None:
        missing = f"no item labeled '{label}' in the initial state"
        return [
            CheckResult(name="target_shifted", passed=False, detail=missing),
            CheckResult(name="non_targets_disabled", passed=False, detail=missing),
            CheckResult(name="count_preserved", passed=len(after) == len(before)),
            CheckResult(name="target_enabled", passed=False, detail=missing),
        ]
    now = after.get(target["id"])

    if now is None:
        shifted = CheckResult(name="target_shifted", passed=False, detail=f"item {target['id']} ({label}) no longer exists")
        still_enabled = CheckResult(name="target_enabled", passed=False, detail=f"item {target['id']} ({label}) no longer exists")
    else:
        expected = target["time"] + shift
        shifted = CheckResult(
            name="target_shifted",
            passed=now["time"] == expected,
            detail="" if now["time"] == expected else f"item {target['id']} ({label}) has time {now['time']}, expected {expected}",
        )
        still_enabled = CheckResult(
            name="target_enabled",
            passed=now["enabled"] is True,
            detail="" if now["enabled"] else f"item {target['id']} ({label}) is disabled",
        )

    still_on = sorted(item_id for item_id, item in after.items() if item_id != target["id"] and item["enabled"])
    disabled = CheckResult(
        name="non_targets_disabled",
        passed=not still_on,
        detail="" if not still_on else f"items still enabled: {still_on}",
    )
    preserved = CheckResult(
        name="count_preserved",
        passed=len(after) == len(before),
        detail="" if len(after) == len(before) else f"{len(after)} items, expected {len(before)}",
    )
    return [shifted, disabled, preserved, still_enabled]


class ToyWorld(Environment):
    """The "tracker" app: authenticate, paginate, mutate.

    ``worlds`` optionally pins the item inventory for specific seeds
    (loaded from a scenario file); other seeds are generated.
    """

    env_id = TOYWORLD_ID

    def __init__(self, worlds: Optional[Dict[int, List[Dict[str, Any]]]] = None):
        self.worlds = {int(seed): items for seed, items in (worlds or {}).items()}
        self._handlers: Dict[str, Callable[[Dict[str, Any], Dict[str, Any]], Any]] = {
            "show_apis": self._show_apis,
            "login": self._login,
            "list_items": self._list_items,
            "update_item": self._update_item,
            "delete_item": self._delete_item,
            "create_item": self._create_item,
        }
        self._allowed = {entry["name"]: {arg.rstrip("?") for arg in entry["args"]} for entry in API_CATALOGUE}

    @property
    def checkers(self) -> Dict[str, Checker]:
        return {"shift_and_disable": check_shift_and_disable}

    def items_for(self, seed: int) -> List[Dict[str, Any]]:
        if seed in self.worlds:
            return sorted(copy.deepcopy(self.worlds[seed]), key=lambda item: item["id"])
        return generate_items(seed)

    def initial_state(self, scenario_seed: int) -> Dict[str, Any]:
        items = self.items_for(scenario_seed)
        return {
            "items": items,
            "next_id": max((item["id"] for item in items), default=0) + 1,
            "credentials": {"user": TOY_USER, "password": toy_password(scenario_seed)},
            "token": toy_token(scenario_seed),
            "logged_in": False,
        }

    def dispatch(self, state: Dict[str, Any], call: ToolCall) -> Any:
        handler = self._handlers.get(call.api)
        if handler is None:
            raise ApiError(f"unknown api '{call.api}'; call show_apis() to list the available apis")
        unexpected = sorted(set(call.args) - self._allowed[call.api])
        if unexpected:
            raise ApiError(f"{call.api} does not accept argument(s) {unexpected}")
        return handler(state, dict(call.args))

    @staticmethod
    def _authenticate(state: Dict[str, Any], args: Dict[str, Any]) -> None:
        if "token" not in args:
            raise ApiError("authentication required: pass the token returned by login")
        if not state["logged_in"] or args["token"] != state["token"]:
            raise ApiError("invalid token")

    @staticmethod
    def _find(state: Dict[str, Any], item_id: int) -> Dict[str, Any]:
        for item in state["items"]:
            if item["id"] == item_id:
                return item
        raise ApiError(f"item {item_id} not found")

    def _show_apis(self, state, args):
        return copy.deepcopy(API_CATALOGUE)

    def _login(self, state, args):
        user = _expect(args, "user", str)
        password = _expect(args, "password", str)
        if user != state["credentials"]["user"] or password != state["credentials"]["password"]:
            raise ApiError("invalid credentials")
        state["logged_in"] = True
        return {"token": state["token"]}

    def _list_items(self, state, args):
        self._authenticate(state, args)
        page = args.get("page", 1)
        if isinstance(page, bool) or not isinstance(page, int) or page < 1:
            raise ApiError("page must be an integer >= 1")
        ordered = sorted(state["items"], key=lambda item: item["id"])
        return ordered[(page - 1) * PAGE_SIZE:page * PAGE_SIZE]

    def _update_item(self, state, args):
        self._authenticate(state, args)
        item = self._find(state, _expect(args, "id", int))
        updates = _field_updates(args)
        if not updates:
            raise ApiError(f"no fields to update; pass one or more of {list(ITEM_FIELDS)}")
        item.update(updates)
        return dict(item)

    def _delete_item(self, state, args):
        self._authenticate(state, args)
        item = self._find(state, _expect(args, "id", int))
        state["items"].remove(item)
        return {"deleted": item["id"]}

    def _create_item(self, state, args):
        self._authenticate(state, args)
        _expect(args, "label", str)
        item = {"id": state["next_id"], "label": args["label"], "enabled": True, "time": 0}
        item.update(_field_updates(args))
        state["items"].append(item)
        state["next_id"] += 1
        return dict(item)

    # ------------------------------------------------------------ tasks

    def make_task(self, seed: int, split: str = "train", grading: str = "graded") -> TaskSpec:
        """Seed-generated shift-and-disable task with its reference solution."""
        items = self.items_for(seed)
        rng = random.Random(seed * 7919 + 17)
        target = rng.choice(items)
        shift = rng.choice(SHIFT_CHOICES)
        return TaskSpec(
            task_id=f"{split}-{seed}",
            instruction=shift_task_instruction(target["label"], shift, seed),
            env_id=self.env_id,
            scenario_seed=seed,
            checker_ref="shift_and_disable",
            checker_args={"label": target["label"], "shift": shift},
            grading=grading,
            split=split,
            solution=reference_solution(items, target["label"], shift, seed),
        )


def shift_task_instruction(label: str, shift: int, seed: int) -> str:
    return (
        f"In the tracker app, move the item labeled '{label}' {shift} minutes later and make sure it is enabled, "
        f"then disable every other item. Do not create or delete items. "
        f"Log in as user '{TOY_USER}' with password '{toy_password(seed)}'."
    )


def reference_solution(items: Sequence[Dict[str, Any]], label: str, shift: int, seed: int) -> List[str]:
    token = toy_token(seed)
    actions = [ToolCall(api="login", args={"user": TOY_USER, "password": toy_password(seed)}).render()]
    pages = (len(items) + PAGE_SIZE - 1) // PAGE_SIZE
    actions += [ToolCall(api="list_items", args={"token": token, "page": page}).render() for page in range(1, pages + 2)]
    target = next((item for item in items if item["label"] == label), None)
    if target is None:
        raise UnknownLabel(f"seed {seed} has no item labeled '{label}'")
    actions.append(
        ToolCall(api="update_item", args={"token": token, "id": target["id"], "time": target["time"] + shift, "enabled": True}).render()
    )
    for item in sorted(items, key=lambda item: item["id"]):
        if item["id"] != target["id"] and item["enabled"]:
            actions.append(ToolCall(api="update_item", args={"token": token, "id": item["id"], "enabled": False}).render())
    return actions


def configure_toyworld(worlds: Optional[Dict[int, List[Dict[str, Any]]]] = None) -> ToyWorld:
    """(Re)register ToyWorld, optionally with scenario-pinned inventories."""
    return register_environment(ToyWorld(worlds))


configure_toyworld()
