"""
Task sets and source trajectories.

Tasks come from ToyWorld's seeded generator (train and held-out seeds in the
config) and optionally from a scenario file, which can also pin the item
inventory of individual seeds. See docs/scenario_format.md.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import AppConfig, ConfigError
from models import MindSkillError, TaskSpec, Trajectory, TrajectoryOrigin
from services.environment import ToyWorld, UnknownLabel, configure_toyworld, reference_solution, shift_task_instruction
from services.trajectory import load_trajectory, save_trajectory, trajectory_filename, wrap_solution

logger = logging.getLogger(__name__)


class UnknownTask(MindSkillError):
    pass


class MissingSource(MindSkillError):
    """Neither a successful rollout nor a ground-truth solution is available."""


def _scenario_task(entry: Dict[str, Any], env: ToyWorld, defaults: AppConfig) -> TaskSpec:
    entry = dict(entry)
    seed = int(entry["scenario_seed"])
    if "label" in entry:
        label, shift = entry.pop("label"), int(entry.pop("shift", 60))
        items = env.items_for(seed)
        entry.setdefault("instruction", shift_task_instruction(label, shift, seed))
        entry.setdefault("checker_ref", "shift_and_disable")
        entry.setdefault("checker_args", {"label": label, "shift": shift})
        if "solution" not in entry:
            entry["solution"] = reference_solution(items, label, shift, seed)
    entry.setdefault("env_id", defaults.env_id)
    entry.setdefault("grading", defaults.grading)
    return TaskSpec(**entry)


def load_tasks(config: AppConfig) -> Dict[str, TaskSpec]:
    """All tasks known to this config, keyed by task id (sorted)."""
    scenario: Dict[str, Any] = {}
    if config.scenario_file:
        path = Path(config.scenario_file)
        try:
            scenario = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read scenario file {path}: {e}")

    env = configure_toyworld(scenario.get("worlds"))
    tasks = [env.make_task(seed, "train", config.grading) for seed in config.train_seeds]
    tasks += [env.make_task(seed, "heldout", config.grading) for seed in config.heldout_seeds]
    try:
        tasks += [_scenario_task(entry, env, config) for entry in scenario.get("tasks", [])]
    except (KeyError, UnknownLabel, ValidationError) as e:
        raise ConfigError(f"Invalid task in scenario file: {e}")

    by_id: Dict[str, TaskSpec] = {}
    for task in tasks:
        if task.task_id in by_id:
            logger.info(f"Scenario task {task.task_id} overrides the generated one")
        by_id[task.task_id] = task
    logger.info(f"Loaded {len(by_id)} tasks")
    return dict(sorted(by_id.items()))


def select_tasks(tasks: Dict[str, TaskSpec], task_ids: Optional[Sequence[str]], split: str) -> List[TaskSpec]:
    if not task_ids:
        return [task for task in tasks.values() if task.split == split]
    missing = [task_id for task_id in task_ids if task_id not in tasks]
    if missing:
        raise UnknownTask(f"unknown task id(s): {missing}")
    return [tasks[task_id] for task_id in task_ids]


def source_trajectory(task: TaskSpec, trajectories_dir: Optional[str] = None) -> Trajectory:
    """A recorded rollout if it succeeded, else the wrapped ground-truth solution."""
    if trajectories_dir:
        rollout_path = Path(trajectories_dir) / trajectory_filename(task.task_id, TrajectoryOrigin.ROLLOUT)
        if rollout_path.exists():
            rollout = load_trajectory(rollout_path)
            if rollout.succeeded is True:
                logger.info(f"{task.task_id}: using recorded rollout {rollout_path}")
                return rollout
            logger.info(f"{task.task_id}: recorded rollout did not succeed, falling back to the solution")

    if not task.solution:
        raise MissingSource(f"{task.task_id}: no successful rollout and no ground-truth solution")
    wrapped = wrap_solution(task, task.solution)
    if trajectories_dir:
        save_trajectory(wrapped, trajectories_dir)
    return wrapped
