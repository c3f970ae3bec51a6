"""
Local file persistence helpers for runs, trajectories and the skill library.
Every write is whole-file and atomic: the content goes to a temporary file in
the target directory, which is then renamed over the destination.
"""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_atomic(path: PathLike, content: str) -> Path:
    """Write text to ``path`` via write-temp-then-rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=str(target.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(content)
        os.replace(tmp_name, target)
    except Exception:
        logger.error(f"Atomic write to {target} failed", exc_info=True)
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {len(content)} chars to {target}")
    return target


def dumps_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> Path:
    content = "".join(dumps_record(record) + "\n" for record in records)
    return write_atomic(path, content)


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_number}: malformed record: {e}")
    return records
