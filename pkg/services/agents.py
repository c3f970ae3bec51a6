"""
Induction agent (optimizable system prompt) and deduction agent (frozen
prompt, ReAct loop over a live environment session).

The deduction agent never receives the source trajectory: ``deduce`` has no
parameter through which it could arrive.
"""
import logging
import re
from typing import List, Optional, Sequence, Tuple

from config import AppConfig, read_default_prompt
from models import (
    ChatMessage,
    DeductionConfig,
    EnvSession,
    MindSkillError,
    PreconditionViolation,
    PromptState,
    SkillDoc,
    TaskSpec,
    Trajectory,
    TrajectoryOrigin,
    TrajectoryStep,
)
from services import environment
from services.provider import ChatProvider, ValidationExhausted
from services.skilldoc import inject_skills, parse_skill, skill_format_messages
from services.trajectory import render_trajectory, truncate_observation

logger = logging.getLogger(__name__)

ACTION_LINE = re.compile(r"^[ \t]*Action:[ \t]*(.*\S)[ \t]*$", re.MULTILINE)
THOUGHT_PREFIX = re.compile(r"^\s*Thought:\s*")
UNPARSED_ACTION = "(unparsed response)"
NO_ACTION = "(no action)"
PARSE_FAILURE_OBSERVATION = (
    "could not parse action: reply with a 'Thought:' line followed by one 'Action: api(name=value, ...)' line"
)


class InductionFailed(MindSkillError):
    pass


def load_induction_prompt(config: AppConfig) -> PromptState:
    return PromptState(text=config.read_prompt("induction"), version=0, frozen=False)


def load_deduction_prompt(config: AppConfig) -> PromptState:
    text = config.read_prompt("deduction_system").replace("{{stop_marker}}", config.stop_marker)
    return PromptState(text=text, version=0, frozen=True)


def default_template() -> str:
    return read_default_prompt("deduction_template")


# ---------------------------------------------------------------- induction

def induction_message(task: TaskSpec, traj: Trajectory) -> str:
    return f"Task instruction:\n{task.instruction}\n\nSolution trajectory:\n{render_trajectory(traj)}"


def induce(task: TaskSpec, traj: Trajectory, prompt_I: PromptState, provider: ChatProvider) -> SkillDoc:
    """Abstract a successful trajectory into a SKILL.md document."""
    if traj.origin == TrajectoryOrigin.RECONSTRUCTION:
        raise PreconditionViolation("induction needs a rollout or wrapped solution, not a reconstruction")
    if traj.succeeded is not True:
        raise PreconditionViolation(f"{task.task_id}: induction needs a successful trajectory")
    if traj.task_id != task.task_id:
        raise PreconditionViolation(f"trajectory belongs to {traj.task_id}, not {task.task_id}")

    request = provider.build_request("induction", induction_message(task, traj), system=prompt_I.text)
    try:
        response = provider.complete_validated(request, skill_format_messages)
    except ValidationExhausted as e:
        raise InductionFailed(f"{task.task_id}: no valid SKILL.md after retries ({'; '.join(e.violations)})") from e

    skill = parse_skill(response.content)
    logger.info(f"{task.task_id}: induced skill '{skill.name}' with prompt v{prompt_I.version}")
    return skill


# ---------------------------------------------------------------- deduction

def parse_react_response(text: str, stop_marker: str) -> Tuple[str, Optional[str], bool]:
    """Split a response into (thought, action or None, stop requested).

    Only a line holding nothing but the stop marker ends the loop.
    """
    stop_line = re.compile(rf"^[ \t]*{re.escape(stop_marker)}[ \t]*$", re.MULTILINE)
    stop = stop_line.search(text) is not None
    match = ACTION_LINE.search(text)
    if match is None:
        thought = stop_line.sub("", text)
        return THOUGHT_PREFIX.sub("", thought).strip(), None, stop
    thought = THOUGHT_PREFIX.sub("", text[:match.start()]).strip()
    return thought, match.group(1).strip(), stop


def fill_deduction_template(template: str, skills: Sequence[SkillDoc], instruction: str, stop_marker: str) -> str:
    return inject_skills(template, skills, {"instruction": instruction, "stop_marker": stop_marker})


def run_react_loop(
    task: TaskSpec,
    system_text: str,
    user_text: str,
    session: EnvSession,
    cfg: DeductionConfig,
    provider: ChatProvider,
    tag: str = "deduction",
) -> Trajectory:
    """Drive request -> parse -> exec -> observe until the stop marker or max_steps."""
    messages: List[ChatMessage] = [
        ChatMessage(role="system", content=system_text),
        ChatMessage(role="user", content=user_text),
    ]
    base_request = provider.build_request(tag, user_text, system=system_text)
    steps: List[TrajectoryStep] = []

    while len(steps) < cfg.max_steps:
        response = provider.complete(base_request.with_messages(messages))
        thought, action, stop = parse_react_response(response.content, cfg.stop_marker)
        messages.append(ChatMessage(role="assistant", content=response.content))

        if action is not None:
            observation = truncate_observation(environment.exec_text(session, action).render())
            steps.append(TrajectoryStep(thought=thought, action=action, observation=observation))
        elif stop:
            break
        else:
            observation = PARSE_FAILURE_OBSERVATION
            steps.append(TrajectoryStep(thought=thought, action=UNPARSED_ACTION, observation=observation))

        if stop:
            break
        messages.append(ChatMessage(role="user", content=f"Observation: {observation}"))

    if not steps:
        steps.append(TrajectoryStep(thought="Stopped before taking any action.", action=NO_ACTION, observation=""))

    logger.info(f"{task.task_id}: {tag} loop finished after {len(steps)} step(s)")
    return Trajectory(task_id=task.task_id, steps=steps, origin=TrajectoryOrigin.RECONSTRUCTION)


def deduce(
    task: TaskSpec,
    skill: SkillDoc,
    prompt_D: PromptState,
    env_session: EnvSession,
    cfg: DeductionConfig,
    provider: ChatProvider,
    template: Optional[str] = None,
) -> Trajectory:
    """Re-solve ``task`` guided only by ``skill``; the session ends in the terminal state."""
    if not prompt_D.frozen:
        raise PreconditionViolation("the deduction prompt must be frozen")
    if env_session.step_count != 0:
        raise PreconditionViolation("deduction needs a freshly reset environment session")

    user_text = fill_deduction_template(template or default_template(), [skill], task.instruction, cfg.stop_marker)
    return run_react_loop(task, prompt_D.text, user_text, env_session, cfg, provider)
