"""
Persistent skill library: one canonical ``<task_id>.skill.md`` per source
task plus ``index.jsonl``, which is all retrieval ever reads.
"""
import json
import logging
import re
import threading
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from config import read_default_prompt
from models import LibraryEntry, LossTriple, MindSkillError, RetrievalConfig, TaskSpec
from services.losses import lex_less
from services.provider import ChatProvider, ValidationExhausted
from services.run_store import RunStore
from services.skilldoc import BadTemplate, inject_skills, parse_skill, serialize_skill, validate_skill_format
from utils.storage import read_jsonl, write_atomic, write_jsonl

logger = logging.getLogger(__name__)

INDEX_FILE = "index.jsonl"
SKILL_SUFFIX = ".skill.md"
TOKEN_PATTERN = re.compile(r"[a-z0-9]+")

__all__ = [
    "BadTemplate",
    "InvalidSkill",
    "LibraryEmpty",
    "SkillLibrary",
    "count_tokens",
    "lexical_rank",
    "materialize_snapshot",
    "parse_id_list",
]


class InvalidSkill(MindSkillError):
    pass


class LibraryEmpty(MindSkillError):
    pass


def count_tokens(text: str) -> int:
    return len(text.split())


def _tokens(text: str) -> set:
    return set(TOKEN_PATTERN.findall(text.lower()))


def lexical_rank(instruction: str, entries: Sequence[LibraryEntry], n: int) -> List[LibraryEntry]:
    """Token overlap between the instruction and name+description; ties by task id."""
    wanted = _tokens(instruction)
    scored = [
        (-len(wanted & _tokens(f"{entry.skill.name} {entry.skill.description}")), entry.source_task_id, entry)
        for entry in entries
    ]
    scored.sort(key=lambda item: (item[0], item[1]))
    return [entry for _, _, entry in scored[:n]]


def parse_id_list(text: str) -> Optional[List[str]]:
    """Read ``["a", "b"]`` or the bare ``[a, b]`` form; None when no list is present."""
    start, end = text.find("["), text.rfind("]")
    if start == -1 or end < start:
        return None
    body = text[start:end + 1]
    try:
        parsed = json.loads(body)
        if isinstance(parsed, list) and all(isinstance(item, str) for item in parsed):
            return [item.strip() for item in parsed]
    except json.JSONDecodeError:
        pass
    inner = body[1:-1].strip()
    if not inner:
        return []
    return [part.strip().strip("'\"").strip() for part in inner.split(",")]


def retrieval_violations(text: str, valid_ids: Sequence[str], n: int) -> List[str]:
    ids = parse_id_list(text)
    if ids is None:
        return ["reply with a JSON list of skill ids, e.g. [\"id-1\", \"id-2\"]"]
    problems = []
    unknown = [item for item in ids if item not in valid_ids]
    if unknown:
        problems.append(f"unknown skill ids: {unknown}; use only ids from the list")
    if len(set(ids)) != len(ids):
        problems.append("skill ids must be distinct")
    if len(ids) != n:
        problems.append(f"return exactly {n} ids, got {len(ids)}")
    return problems


class SkillLibrary:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._entries: Dict[str, LibraryEntry] = self._load()

    def _load(self) -> Dict[str, LibraryEntry]:
        index_path = self.root / INDEX_FILE
        if not index_path.exists():
            return {}
        entries = {}
        for record in read_jsonl(index_path):
            skill = parse_skill((self.root / record["file"]).read_text(encoding="utf-8"))
            entries[record["task_id"]] = LibraryEntry(
                skill=skill,
                source_task_id=record["task_id"],
                best_triple=LossTriple(outcome=record["outcome"], recon=record["recon"], rubric=record["rubric"]),
                created_iteration=record.get("iteration", 0),
            )
        logger.info(f"Loaded skill library {self.root} with {len(entries)} entries")
        return entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def _sorted_entries(self) -> List[LibraryEntry]:
        # caller holds the lock
        return [self._entries[task_id] for task_id in sorted(self._entries)]

    def entries(self) -> List[LibraryEntry]:
        """Snapshot of the entries sorted by task id."""
        with self._lock:
            return self._sorted_entries()

    def get(self, task_id: str) -> Optional[LibraryEntry]:
        with self._lock:
            return self._entries.get(task_id)

    @staticmethod
    def skill_file(task_id: str) -> str:
        return f"{task_id}{SKILL_SUFFIX}"

    def _index_records(self) -> List[dict]:
        return [
            {
                "task_id": entry.source_task_id,
                "name": entry.skill.name,
                "description": entry.skill.description,
                "outcome": entry.best_triple.outcome,
                "recon": entry.best_triple.recon,
                "rubric": entry.best_triple.rubric,
                "file": self.skill_file(entry.source_task_id),
                "iteration": entry.created_iteration,
            }
            for entry in self._sorted_entries()
        ]

    def add_or_replace(self, entry: LibraryEntry) -> Tuple[bool, str]:
        """Store ``entry`` unless the task already has a lexicographically better or equal one."""
        violations = validate_skill_format(serialize_skill(entry.skill))
        if violations:
            raise InvalidSkill(f"{entry.source_task_id}: {'; '.join(str(v) for v in violations)}")

        with self._lock:
            existing = self._entries.get(entry.source_task_id)
            if existing is not None and not lex_less(entry.best_triple, existing.best_triple):
                return False, f"{entry.source_task_id}: kept stored skill {existing.best_triple}, incoming {entry.best_triple}"
            write_atomic(self.root / self.skill_file(entry.source_task_id), serialize_skill(entry.skill))
            self._entries[entry.source_task_id] = entry
            write_jsonl(self.root / INDEX_FILE, self._index_records())
        action = "replaced" if existing is not None else "added"
        logger.info(f"Library: {action} skill for {entry.source_task_id} {entry.best_triple}")
        return True, f"{entry.source_task_id}: {action} {entry.best_triple}"

    @staticmethod
    def inject(template: str, entries: Sequence[LibraryEntry], fields: Optional[Mapping[str, str]] = None) -> str:
        """Skill slot filled with the entries' full bodies, in retrieval order."""
        return inject_skills(template, [entry.skill for entry in entries], fields)

    def retrieval_message(self, task: TaskSpec, n: int, entries: Optional[Sequence[LibraryEntry]] = None) -> str:
        listing = "\n".join(
            f"{entry.source_task_id}: {entry.skill.name} — {entry.skill.description}"
            for entry in (self.entries() if entries is None else entries)
        )
        return (
            f"Task instruction:\n{task.instruction}\n\n"
            f"Available skills:\n{listing}\n\n"
            f"Return exactly {n} distinct skill ids."
        )

    def retrieve(
        self,
        task: TaskSpec,
        cfg: RetrievalConfig,
        provider: Optional[ChatProvider] = None,
        system_prompt: Optional[str] = None,
    ) -> List[LibraryEntry]:
        """Top-min(K, size) entries; model mode sees names and descriptions only."""
        entries = self.entries()
        if not entries:
            raise LibraryEmpty(f"library {self.root} is empty")
        n = min(cfg.k, len(entries))

        if cfg.mode == "model":
            if provider is None:
                logger.warning("Model retrieval requested without a provider, using lexical ranking")
            else:
                valid_ids = [entry.source_task_id for entry in entries]
                request = provider.build_request(
                    "retrieval",
                    self.retrieval_message(task, n, entries),
                    system=system_prompt or read_default_prompt("retrieval"),
                )
                try:
                    response = provider.complete_validated(request, lambda text: retrieval_violations(text, valid_ids, n))
                    by_id = {entry.source_task_id: entry for entry in entries}
                    return [by_id[task_id] for task_id in parse_id_list(response.content)]
                except ValidationExhausted as e:
                    logger.warning(f"{task.task_id}: model retrieval failed ({e}), falling back to lexical ranking")

        return lexical_rank(task.instruction, entries, n)


def materialize_snapshot(run_store: RunStore, task_ids: Sequence[str], iteration: int, target_dir: Union[str, Path]) -> SkillLibrary:
    """The library as it stood after ``iteration``: best-so-far skill per task."""
    target = Path(target_dir)
    if target.exists():
        for stale in list(target.glob(f"*{SKILL_SUFFIX}")) + [target / INDEX_FILE]:
            if stale.exists():
                stale.unlink()
    library = SkillLibrary(target)
    for task_id in task_ids:
        flagged = [r for r in run_store.load_index(task_id) if r["is_best"] and r["iteration"] <= iteration]
        if not flagged:
            logger.info(f"Snapshot {iteration}: no best skill yet for {task_id}")
            continue
        record = flagged[-1]
        skill = run_store.load_skill(task_id, record["iteration"])
        if skill is None:
            logger.warning(f"Snapshot {iteration}: skill file missing for {task_id} iteration {record['iteration']}")
            continue
        library.add_or_replace(
            LibraryEntry(
                skill=skill,
                source_task_id=task_id,
                best_triple=LossTriple(outcome=record["outcome"], recon=record["recon"], rubric=record["rubric"]),
                created_iteration=record["iteration"],
            )
        )
    return library
