"""
Offline end-to-end demo: mine 3 ToyWorld tasks with Q=4, then evaluate 3
held-out tasks with K=3, all against a scripted provider.

The scripted roles behave like small deterministic stand-ins for models:

* induction returns a fixture skill that improves with every prompt revision
  (fixtures/demo/skill_v<n>.md, n = number of revisions in the prompt);
* deduction follows whatever the injected skills tell it: it paginates only
  if a skill says to read until an empty page and bulk-disables only if a
  skill says to handle every remaining item;
* the reconstruction judge compares API-name sequences, the rubric judge
  returns fixed scores per skill;
* the optimizer appends one revision rule to the current prompt.
"""
import difflib
import json
import logging
import re
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple, Union

from config import PROJECT_ROOT, AppConfig, ConfigError, PathSettings, ProviderSettings, RetrievalSettings
from models import ChatRequest, TaskSpec, ToolCall
from services.environment import PAGE_SIZE, TOY_USER, get_environment, toy_password, toy_token
from services.provider import match
from services.skilldoc import SKILLS_BEGIN, SKILLS_END, parse_skill

logger = logging.getLogger(__name__)

DEMO_FIXTURES = PROJECT_ROOT / "fixtures" / "demo"
DEMO_MARKER = ".mindskill-demo"
DEMO_TRAIN_SEEDS = [101, 102, 103]
DEMO_HELDOUT_SEEDS = [201, 202, 203]
DEMO_ITERATIONS = 4
DEMO_K = 3

PAGINATE_MARKER = "until a page comes back empty"
BULK_MARKER = "every remaining item"
REVISION_LINE = re.compile(r"^Revision \d+:", re.MULTILINE)

DEMO_RUBRICS: Dict[str, Dict[str, object]] = {
    "update-tracked-item": {
        "gt_independence": 9, "actionability": 4, "transferability": 7, "completeness": 3, "conciseness": 8,
        "leaked_claims": [], "issues": "The procedure stops after listing and never performs the change.",
    },
    "paginate-then-update-record": {
        "gt_independence": 9, "actionability": 6, "transferability": 7, "completeness": 5, "conciseness": 8,
        "leaked_claims": [], "issues": "The bulk change to the other records is missing.",
    },
    "paginate-update-and-bulk-disable": {
        "gt_independence": 7, "actionability": 9, "transferability": 8, "completeness": 9, "conciseness": 7,
        "leaked_claims": ["pages hold 3 records"], "issues": "States the page size observed in the solution.",
    },
    "target-then-bulk-update": {
        "gt_independence": 10, "actionability": 9, "transferability": 9, "completeness": 9, "conciseness": 9,
        "leaked_claims": [], "issues": "",
    },
}

GRADIENT_TEXT = (
    "The induced skill leaves out parts of the procedure the re-solving agent needed, as the outcome feedback shows. "
    "The prompt should ask the induction agent to spell out every phase of the solution as its own procedure step, "
    "in particular reading a listing to its end and applying bulk changes, while still describing them without "
    "concrete ids, labels or values from the solution."
)
REVISION_RULES = [
    "Describe how collections are traversed to their end, not just how they are opened.",
    "When the solution changes many records, give the bulk change its own procedure step.",
    "Never state sizes, counts or values observed in the solution; describe how to discover them instead.",
]


def demo_skill_text(version: int) -> str:
    return (DEMO_FIXTURES / f"skill_v{min(version, 3)}.md").read_text(encoding="utf-8")


def demo_config(workdir: Union[str, Path]) -> AppConfig:
    workdir = Path(workdir)
    return AppConfig(
        provider=ProviderSettings(backend="scripted", retry_backoff=0),
        max_iterations=DEMO_ITERATIONS,
        retrieval=RetrievalSettings(k=DEMO_K, mode="model"),
        paths=PathSettings(
            library_dir=str(workdir / "library"),
            runs_dir=str(workdir / "runs"),
            results_dir=str(workdir / "results"),
            trajectories_dir=str(workdir / "trajectories"),
        ),
        train_seeds=list(DEMO_TRAIN_SEEDS),
        heldout_seeds=list(DEMO_HELDOUT_SEEDS),
    )


def prepare_workdir(workdir: Union[str, Path]) -> Path:
    """Clear a previous demo output; refuse to touch a directory the demo did not create."""
    workdir = Path(workdir)
    if workdir.exists() and any(workdir.iterdir()):
        if not (workdir / DEMO_MARKER).exists():
            raise ConfigError(f"{workdir} is not empty and was not created by the demo; pick another directory")
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / DEMO_MARKER).write_text("", encoding="utf-8")
    for sub in ("library", "runs", "results", "trajectories"):
        (workdir / sub).mkdir(exist_ok=True)
    return workdir


# ---------------------------------------------------------------- scripted roles

def _skill_slot(text: str) -> str:
    start, end = text.find(SKILLS_BEGIN), text.find(SKILLS_END)
    return text[start:end] if start != -1 and end > start else ""


def plan_actions(task: TaskSpec, skills_text: str) -> List[Tuple[str, str]]:
    """(thought, action) pairs an agent following ``skills_text`` would take."""
    paginate = PAGINATE_MARKER in skills_text
    bulk = BULK_MARKER in skills_text
    items = get_environment(task.env_id).initial_state(task.scenario_seed)["items"]
    token = toy_token(task.scenario_seed)

    plan = [(
        "I need a token before I can read anything.",
        ToolCall(api="login", args={"user": TOY_USER, "password": toy_password(task.scenario_seed)}).render(),
    )]
    pages = (len(items) + PAGE_SIZE - 1) // PAGE_SIZE + 1 if paginate else 1
    plan += [
        (f"Reading page {page} of the items.", ToolCall(api="list_items", args={"token": token, "page": page}).render())
        for page in range(1, pages + 1)
    ]
    if not paginate:
        return plan

    label, shift = task.checker_args["label"], int(task.checker_args["shift"])
    target = next(item for item in items if item["label"] == label)
    plan.append((
        f"The item labeled {label} is the target; I shift it and keep it enabled.",
        ToolCall(api="update_item", args={"token": token, "id": target["id"], "time": target["time"] + shift, "enabled": True}).render(),
    ))
    if bulk:
        plan += [
            (f"Item {item['id']} is still enabled, so I disable it.",
             ToolCall(api="update_item", args={"token": token, "id": item["id"], "enabled": False}).render())
            for item in items
            if item["id"] != target["id"] and item["enabled"]
        ]
    return plan


def deduction_responder(task: TaskSpec, stop_marker: str) -> Callable[[ChatRequest], str]:
    def respond(request: ChatRequest) -> str:
        plan = plan_actions(task, _skill_slot(request.messages[1].content))
        step = sum(1 for message in request.messages if message.role == "assistant")
        if step < len(plan):
            thought, action = plan[step]
            return f"Thought: {thought}\nAction: {action}"
        return f"Thought: The procedure is complete.\n{stop_marker}"

    return respond


def induction_response(request: ChatRequest) -> str:
    return demo_skill_text(len(REVISION_LINE.findall(request.messages[0].content)))


def _api_names(rendered: str) -> List[str]:
    return [line[len("Action: "):].split("(", 1)[0].strip() for line in rendered.splitlines() if line.startswith("Action: ")]


def recon_judge_response(request: ChatRequest) -> str:
    text = request.messages[1].content
    reference, _, agent = text.partition("Agent trajectory:\n")
    expected, actual = _api_names(reference), _api_names(agent)
    matcher = difflib.SequenceMatcher(a=expected, b=actual, autojunk=False)
    score = round(10 * matcher.ratio())
    mismatches = [
        f"{tag}: reference {expected[i1:i2]} vs agent {actual[j1:j2]}"
        for tag, i1, i2, j1, j2 in matcher.get_opcodes()
        if tag != "equal"
    ]
    return json.dumps({
        "alignment_score": score,
        "api_sequence_match": score == 10,
        "control_flow_match": expected.count("list_items") == actual.count("list_items"),
        "final_state_match": expected == actual,
        "mismatches": mismatches,
    })


def rubric_judge_response(request: ChatRequest) -> str:
    skill_text = request.messages[1].content.partition("Skill:\n")[2]
    return json.dumps(DEMO_RUBRICS[parse_skill(skill_text).name])


def gradient_response(request: ChatRequest) -> str:
    return GRADIENT_TEXT


def optimizer_response(request: ChatRequest) -> str:
    current = request.messages[1].content.partition("<<<\n")[2].partition("\n>>>")[0]
    revision = len(REVISION_LINE.findall(current))
    rule = REVISION_RULES[min(revision, len(REVISION_RULES) - 1)]
    return f"<IMPROVED_VARIABLE>\n{current}\n\nRevision {revision + 1}: {rule}\n</IMPROVED_VARIABLE>"


def retrieval_response(request: ChatRequest) -> str:
    text = request.messages[1].content
    listing = text.partition("Available skills:\n")[2].partition("\n\n")[0]
    ids = [line.split(":", 1)[0].strip() for line in listing.splitlines() if line.strip()]
    wanted = int(re.search(r"Return exactly (\d+) distinct", text).group(1))
    return json.dumps(ids[:wanted])


def demo_script(tasks: Sequence[TaskSpec], stop_marker: str) -> List[tuple]:
    """Repeatable per-task entries matched on tag plus instruction text."""
    script: List[tuple] = []
    for task in tasks:
        script += [
            (match(tag="induction", contains=task.instruction), induction_response, True),
            (match(tag="deduction", contains=task.instruction), deduction_responder(task, stop_marker), True),
            (match(tag="judge_recon", contains=task.instruction), recon_judge_response, True),
            (match(tag="judge_rubric", contains=task.instruction), rubric_judge_response, True),
            (match(tag="gradient", contains=task.instruction), gradient_response, True),
        ]
    script += [
        (match(tag="optimizer"), optimizer_response, True),
        (match(tag="retrieval"), retrieval_response, True),
    ]
    return script
