"""
ReAct trajectories: ground-truth wrapping, text rendering for prompts and the
line-delimited ``.traj`` file format.

File layout: a header record ``{task_id, origin, succeeded, observation_limit}``
followed by one ``{index, thought, action, observation}`` record per step.
"""
import json
import logging
from pathlib import Path
from typing import List, Sequence, Union

from pydantic import ValidationError

from config import OBSERVATION_LIMIT, WRAPPED_THOUGHT
from models import MindSkillError, PreconditionViolation, TaskSpec, Trajectory, TrajectoryOrigin, TrajectoryStep
from services import environment
from utils.storage import dumps_record, write_atomic

logger = logging.getLogger(__name__)

TRAJECTORY_SUFFIX = ".traj"


class ExecutionFailed(MindSkillError):
    def __init__(self, step_index: int, message: str):
        super().__init__(f"solution step {step_index} failed: {message}")
        self.step_index = step_index


class SolutionRejected(MindSkillError):
    """The solution replayed cleanly but the task checker does not pass."""


class TrajectoryFormatError(MindSkillError):
    pass


def truncate_observation(text: str, limit: int = OBSERVATION_LIMIT) -> str:
    if len(text) <= limit:
        return text
    return f"{text[:limit]}... [truncated {len(text) - limit} chars]"


def wrap_solution(task: TaskSpec, solution_actions: Sequence[str]) -> Trajectory:
    """Replay a ground-truth solution in a fresh session and record it as a trajectory."""
    if not solution_actions:
        raise PreconditionViolation(f"{task.task_id}: cannot wrap an empty solution")

    session = environment.reset(task.env_id, task.scenario_seed)
    steps: List[TrajectoryStep] = []
    for index, action in enumerate(solution_actions):
        result = environment.exec_text(session, action)
        if not result.ok:
            raise ExecutionFailed(index, result.error)
        steps.append(TrajectoryStep(thought=WRAPPED_THOUGHT, action=action, observation=truncate_observation(result.render())))

    grade = environment.evaluate(session, task)
    if grade.loss > 0:
        raise SolutionRejected(f"{task.task_id}: solution does not satisfy the checker:\n{grade.feedback}")

    logger.info(f"{task.task_id}: wrapped ground-truth solution ({len(steps)} steps)")
    return Trajectory(task_id=task.task_id, steps=steps, origin=TrajectoryOrigin.GROUND_TRUTH_WRAPPED, succeeded=True)


def render_trajectory(traj: Trajectory) -> str:
    blocks = []
    for number, step in enumerate(traj.steps, start=1):
        blocks.append(
            f"Step {number}\n"
            f"Thought: {step.thought}\n"
            f"Action: {step.action}\n"
            f"Observation: {step.observation}"
        )
    return "\n\n".join(blocks) + "\n"


def trajectory_filename(task_id: str, origin: TrajectoryOrigin) -> str:
    return f"{task_id}.{TrajectoryOrigin(origin).value}{TRAJECTORY_SUFFIX}"


def dumps_trajectory(traj: Trajectory) -> str:
    header = {
        "task_id": traj.task_id,
        "origin": traj.origin.value,
        "succeeded": traj.succeeded,
        "observation_limit": OBSERVATION_LIMIT,
    }
    lines = [dumps_record(header)]
    lines += [
        dumps_record({"index": index, "thought": step.thought, "action": step.action, "observation": step.observation})
        for index, step in enumerate(traj.steps)
    ]
    return "\n".join(lines) + "\n"


def loads_trajectory(text: str) -> Trajectory:
    try:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as e:
        raise TrajectoryFormatError(f"malformed trajectory record: {e}")
    if not records:
        raise TrajectoryFormatError("trajectory file is empty")

    header, step_records = records[0], records[1:]
    indices = [record.get("index") for record in step_records]
    if indices != list(range(len(step_records))):
        raise TrajectoryFormatError(f"step indices must run 0..{len(step_records) - 1}, got {indices}")
    try:
        return Trajectory(
            task_id=header["task_id"],
            origin=header["origin"],
            succeeded=header.get("succeeded"),
            steps=[
                TrajectoryStep(thought=record.get("thought", ""), action=record["action"], observation=record.get("observation", ""))
                for record in step_records
            ],
        )
    except (KeyError, ValidationError) as e:
        raise TrajectoryFormatError(f"invalid trajectory: {e}")


def save_trajectory(traj: Trajectory, directory: Union[str, Path]) -> Path:
    path = Path(directory) / trajectory_filename(traj.task_id, traj.origin)
    return write_atomic(path, dumps_trajectory(traj))


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    return loads_trajectory(Path(path).read_text(encoding="utf-8"))
