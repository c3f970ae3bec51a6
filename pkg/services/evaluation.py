"""
Held-out evaluation: retrieve K skills, inject them into the deduction
template, run the ReAct loop and grade the terminal state.
"""
import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

from models import DeductionConfig, EvalResult, PromptState, RetrievalConfig, TaskSpec, Trajectory
from services import environment
from services.agents import fill_deduction_template, run_react_loop
from services.library import SkillLibrary, count_tokens
from services.provider import ChatProvider
from services.skilldoc import render_skill_slot

logger = logging.getLogger(__name__)


def evaluate_task(
    task: TaskSpec,
    library: SkillLibrary,
    retrieval: RetrievalConfig,
    provider: ChatProvider,
    prompt_D: PromptState,
    deduction: DeductionConfig,
    template: str,
    retrieval_prompt: Optional[str] = None,
) -> Tuple[EvalResult, Trajectory]:
    entries = library.retrieve(task, retrieval, provider, retrieval_prompt)
    fields = {"instruction": task.instruction, "stop_marker": deduction.stop_marker}
    user_text = library.inject(template, entries, fields)
    injected_tokens = count_tokens(render_skill_slot([entry.skill for entry in entries]))

    session = environment.reset(task.env_id, task.scenario_seed)
    traj = run_react_loop(task, prompt_D.text, user_text, session, deduction, provider)
    grade = environment.evaluate(session, task)

    result = EvalResult(
        task_id=task.task_id,
        k=retrieval.k,
        passed=grade.loss == 0,
        loss=grade.loss,
        injected_tokens=injected_tokens,
        retrieved_ids=[entry.source_task_id for entry in entries],
    )
    logger.info(f"{task.task_id}: {'pass' if result.passed else 'fail'} (loss {grade.loss:g}, {injected_tokens} injected tokens)")
    return result, traj


def evaluate_baseline(
    task: TaskSpec, provider: ChatProvider, prompt_D: PromptState, deduction: DeductionConfig, template: str
) -> EvalResult:
    """Same loop with an empty skill slot."""
    user_text = fill_deduction_template(template, [], task.instruction, deduction.stop_marker)
    session = environment.reset(task.env_id, task.scenario_seed)
    run_react_loop(task, prompt_D.text, user_text, session, deduction, provider)
    grade = environment.evaluate(session, task)
    return EvalResult(task_id=task.task_id, k=0, passed=grade.loss == 0, loss=grade.loss, injected_tokens=0)


def aggregate(results: Sequence[EvalResult]) -> Dict[str, float]:
    total = len(results)
    passed = sum(1 for result in results if result.passed)
    injected = sum(result.injected_tokens for result in results)
    return {
        "tasks": total,
        "passed": passed,
        "pass_rate": passed / total if total else 0.0,
        "total_injected_tokens": injected,
        "mean_injected_tokens": injected / total if total else 0.0,
    }


def net_contribution(results: Sequence[EvalResult], baseline: Sequence[EvalResult]) -> Dict[str, int]:
    """Per retrieved skill: tasks flipped fail->pass minus pass->fail against the no-skill baseline."""
    base = {result.task_id: result.passed for result in baseline}
    scores: Dict[str, int] = defaultdict(int)
    for result in results:
        if result.task_id not in base:
            continue
        flip = int(result.passed) - int(base[result.task_id])
        for skill_id in result.retrieved_ids:
            scores[skill_id] += flip
    return dict(sorted(scores.items()))


def over_budget(results: Sequence[EvalResult], budget: int) -> List[EvalResult]:
    return [result for result in results if result.injected_tokens > budget]
