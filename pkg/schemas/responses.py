"""Result records and plain-text tables printed by the CLI commands"""
from typing import Any, Dict, List, Optional, Sequence

from models import EvalResult, LossTriple


def eval_result_record(result: EvalResult) -> Dict[str, Any]:
    """Format one results-file record"""
    return {
        "task_id": result.task_id,
        "k": result.k,
        "passed": result.passed,
        "loss": result.loss,
        "injected_tokens": result.injected_tokens,
        "retrieved_ids": list(result.retrieved_ids),
    }


def mine_summary_row(
    task_id: str,
    status: str,
    best: Optional[LossTriple] = None,
    iterations: int = 0,
    prompt_versions: Sequence[int] = (),
    best_iteration: Optional[int] = None,
) -> Dict[str, str]:
    """Format one row of the mine summary table"""
    return {
        "task": task_id,
        "status": status,
        "best": str(best) if best is not None else "-",
        "best_iter": "-" if best_iteration is None else str(best_iteration),
        "iterations": str(iterations),
        "prompt_versions": ",".join(str(v) for v in prompt_versions) or "-",
    }


def error_line(task_id: str, error: Exception) -> str:
    return f"ERROR {task_id}: {type(error).__name__}: {error}"


def format_table(rows: List[Dict[str, Any]], columns: Sequence[str]) -> str:
    """Left-aligned fixed-width table; column widths fit the widest cell"""
    cells = [[str(column) for column in columns]] + [[str(row.get(column, "")) for column in columns] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(columns))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip() for line in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)
