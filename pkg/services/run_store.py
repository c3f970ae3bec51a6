"""
Run directory I/O::

    runs/<task_id>/iter_<q>/{skill.md, recon.traj, losses.rec, gradient.txt, prompt.txt}
    runs/<task_id>/best.md
    runs/<task_id>/index.jsonl
"""
import logging
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from models import RunRecord, SkillDoc
from services.skilldoc import SkillFormatError, parse_skill, serialize_skill
from services.trajectory import dumps_trajectory
from utils.storage import dumps_record, read_jsonl, write_atomic, write_jsonl

logger = logging.getLogger(__name__)

INDEX_FILE = "index.jsonl"
BEST_FILE = "best.md"


def index_record(record: RunRecord) -> Dict[str, Any]:
    return {
        "iteration": record.iteration,
        "outcome": record.triple.outcome,
        "recon": record.triple.recon,
        "rubric": record.triple.rubric,
        "is_best": record.is_best,
        "skill_name": record.skill.name if record.skill else None,
        "prompt_version_before": record.prompt_version_before,
        "prompt_version_after": record.prompt_version_after,
        "failures": record.failures,
    }


class RunStore:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def run_dir(self, task_id: str) -> Path:
        return self.root / task_id

    def iter_dir(self, task_id: str, iteration: int) -> Path:
        return self.run_dir(task_id) / f"iter_{iteration}"

    def start_run(self, task_id: str) -> None:
        """Drop any previous run for the task so reruns produce identical trees."""
        run_dir = self.run_dir(task_id)
        if run_dir.exists():
            logger.info(f"Replacing previous run directory {run_dir}")
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)

    def save_iteration(self, task_id: str, record: RunRecord, prompt_text: str, records: List[RunRecord]) -> Path:
        """Persist one iteration, then rewrite the run index with ``records``."""
        directory = self.iter_dir(task_id, record.iteration)
        write_atomic(directory / "prompt.txt", prompt_text)
        if record.skill is not None:
            write_atomic(directory / "skill.md", serialize_skill(record.skill))
        if record.recon is not None:
            write_atomic(directory / "recon.traj", dumps_trajectory(record.recon))
        losses: Dict[str, Any] = {"triple": record.triple.model_dump(mode="json"), "failures": record.failures}
        if record.report is not None:
            losses.update(record.report.model_dump(mode="json", exclude={"triple"}))
        write_atomic(directory / "losses.rec", dumps_record(losses) + "\n")
        if record.gradient:
            write_atomic(directory / "gradient.txt", record.gradient)
        write_jsonl(self.run_dir(task_id) / INDEX_FILE, (index_record(r) for r in records))
        return directory

    def save_best(self, task_id: str, skill: SkillDoc) -> Path:
        return write_atomic(self.run_dir(task_id) / BEST_FILE, serialize_skill(skill))

    def task_ids(self) -> List[str]:
        if not self.root.exists():
            return []
        return sorted(path.parent.name for path in self.root.glob(f"*/{INDEX_FILE}"))

    def load_index(self, task_id: str) -> List[Dict[str, Any]]:
        path = self.run_dir(task_id) / INDEX_FILE
        if not path.exists():
            return []
        return read_jsonl(path)

    def load_skill(self, task_id: str, iteration: int) -> Optional[SkillDoc]:
        path = self.iter_dir(task_id, iteration) / "skill.md"
        if not path.exists():
            return None
        try:
            return parse_skill(path.read_text(encoding="utf-8"))
        except SkillFormatError:
            logger.error(f"Stored skill {path} no longer parses", exc_info=True)
            return None
