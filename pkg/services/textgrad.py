"""
Textual-gradient optimization of the induction prompt for one task.

Per iteration: induce -> fresh reset + deduce -> three losses -> best-so-far
update under lex_less -> gradient -> prompt update. The gradient and update
are skipped on the final iteration since their result would never be used.
"""
import logging
from typing import List, Optional, Tuple

from pydantic import BaseModel

from config import AppConfig, read_default_prompt
from models import (
    WORST_TRIPLE,
    GradientText,
    LossReport,
    LossTriple,
    MindSkillError,
    PreconditionViolation,
    PromptState,
    RunConfig,
    RunRecord,
    SkillDoc,
    TaskSpec,
    Trajectory,
    TrajectoryOrigin,
)
from services import environment
from services.agents import InductionFailed, deduce, induce
from services.losses import compute_losses, lex_less
from services.provider import ChatProvider, ValidationExhausted
from services.run_store import RunStore
from services.skilldoc import serialize_skill
from services.trajectory import render_trajectory

logger = logging.getLogger(__name__)

IMPROVED_OPEN = "<IMPROVED_VARIABLE>"
IMPROVED_CLOSE = "</IMPROVED_VARIABLE>"
FORMAT_MARKERS = ("SKILL.md", "frontmatter", "name", "description")


class GradientFailed(MindSkillError):
    pass


class UpdateRejected(MindSkillError):
    pass


class BestUnavailable(MindSkillError):
    pass


class RunAborted(MindSkillError):
    def __init__(self, message: str, records: List[RunRecord]):
        super().__init__(message)
        self.records = records


class LoopPrompts(BaseModel):
    """Prompt texts one optimization run needs besides P_I and P_D."""

    template: str
    judge_recon: str
    judge_rubric: str
    gradient: str
    optimizer: str

    @classmethod
    def defaults(cls) -> "LoopPrompts":
        return cls(
            template=read_default_prompt("deduction_template"),
            judge_recon=read_default_prompt("judge_recon"),
            judge_rubric=read_default_prompt("judge_rubric"),
            gradient=read_default_prompt("gradient"),
            optimizer=read_default_prompt("optimizer"),
        )

    @classmethod
    def from_config(cls, config: AppConfig) -> "LoopPrompts":
        return cls(
            template=config.read_prompt("deduction_template"),
            judge_recon=config.read_prompt("judge_recon"),
            judge_rubric=config.read_prompt("judge_rubric"),
            gradient=config.read_prompt("gradient"),
            optimizer=config.read_prompt("optimizer"),
        )


# ---------------------------------------------------------------- gradient

def gradient_message(prompt_I: PromptState, task: TaskSpec, skill: SkillDoc, recon: Trajectory, report: LossReport) -> str:
    return (
        f"Current induction prompt:\n<<<\n{prompt_I.text}\n>>>\n\n"
        f"Task instruction:\n{task.instruction}\n\n"
        f"Skill produced by the induction prompt:\n{serialize_skill(skill)}\n"
        f"Trajectory of the agent that re-solved the task with this skill:\n{render_trajectory(recon)}\n"
        f"Outcome feedback (loss {report.triple.outcome:g} of 1):\n{report.f_outcome}\n\n"
        f"Reconstruction feedback (loss {report.triple.recon:g} of 10):\n{report.f_recon}\n\n"
        f"Rubric feedback (loss {report.triple.rubric:g} of 10):\n{report.f_rubric}"
    )


def gradient_violations(text: str) -> List[str]:
    if IMPROVED_OPEN in text or IMPROVED_CLOSE in text:
        return [f"do not write a new prompt or an {IMPROVED_OPEN} block; only describe what to change and why"]
    return []


def compute_gradient(
    prompt_I: PromptState,
    task: TaskSpec,
    skill: SkillDoc,
    recon: Trajectory,
    report: LossReport,
    provider: ChatProvider,
    iteration: int = 0,
    system_prompt: Optional[str] = None,
) -> GradientText:
    """Diagnose the induction prompt from the reconstruction and the three feedbacks.

    The source trajectory is not an input; it only reaches this call through f_recon.
    """
    if recon.origin != TrajectoryOrigin.RECONSTRUCTION:
        raise PreconditionViolation("the gradient is computed from a reconstruction")
    request = provider.build_request(
        "gradient",
        gradient_message(prompt_I, task, skill, recon, report),
        system=system_prompt or read_default_prompt("gradient"),
    )
    try:
        response = provider.complete_validated(request, gradient_violations)
    except ValidationExhausted as e:
        raise GradientFailed(f"{task.task_id}: gradient rejected: {'; '.join(e.violations)}") from e
    return GradientText(text=response.content.strip(), iteration=iteration)


# ---------------------------------------------------------------- update

def extract_improved(text: str) -> Optional[str]:
    start = text.find(IMPROVED_OPEN)
    end = text.find(IMPROVED_CLOSE)
    if start == -1 or end < start:
        return None
    return text[start + len(IMPROVED_OPEN):end].strip()


def update_violations(text: str) -> List[str]:
    opens, closes = text.count(IMPROVED_OPEN), text.count(IMPROVED_CLOSE)
    if opens != 1 or closes != 1:
        return [f"wrap the improved prompt in exactly one {IMPROVED_OPEN} ... {IMPROVED_CLOSE} pair (found {opens} opening and {closes} closing tags)"]
    improved = extract_improved(text)
    if improved is None:
        return [f"the {IMPROVED_CLOSE} tag must come after {IMPROVED_OPEN}"]
    if not improved:
        return ["the improved prompt is empty"]
    missing = [marker for marker in FORMAT_MARKERS if marker not in improved]
    if missing:
        return [f"the improved prompt dropped the SKILL.md output format specification (missing: {', '.join(missing)}); keep it intact"]
    return []


def apply_gradient(
    prompt_I: PromptState, g: GradientText, provider: ChatProvider, system_prompt: Optional[str] = None
) -> PromptState:
    """Ask the optimizer for a revised prompt. It sees only the prompt and the gradient."""
    if prompt_I.frozen:
        raise PreconditionViolation("a frozen prompt cannot be optimized")
    request = provider.build_request(
        "optimizer",
        f"Current prompt:\n<<<\n{prompt_I.text}\n>>>\n\nFeedback on its weaknesses:\n{g.text}",
        system=system_prompt or read_default_prompt("optimizer"),
    )
    try:
        response = provider.complete_validated(request, update_violations)
    except ValidationExhausted as e:
        raise UpdateRejected(f"prompt update rejected: {'; '.join(e.violations)}") from e
    return prompt_I.bumped(extract_improved(response.content))


# ---------------------------------------------------------------- loop

def optimize_skill(
    task: TaskSpec,
    traj: Trajectory,
    prompt_I0: PromptState,
    prompt_D: PromptState,
    cfg: RunConfig,
    env: str,
    provider: ChatProvider,
    prompts: Optional[LoopPrompts] = None,
    run_store: Optional[RunStore] = None,
) -> Tuple[SkillDoc, List[RunRecord]]:
    """Run the induction/deduction loop for ``cfg.max_iterations`` iterations and return the best skill."""
    if traj.succeeded is not True:
        raise PreconditionViolation(f"{task.task_id}: the source trajectory must have succeeded")
    if not prompt_D.frozen:
        raise PreconditionViolation("the deduction prompt must be frozen")
    if prompt_I0.version != 0:
        raise PreconditionViolation("optimization starts from prompt version 0")
    if env != task.env_id:
        raise PreconditionViolation(f"task {task.task_id} lives in {task.env_id}, not {env}")

    prompts = prompts or LoopPrompts.defaults()
    prompt_I = prompt_I0
    best: Optional[SkillDoc] = None
    best_triple: Optional[LossTriple] = None
    records: List[RunRecord] = []
    if run_store is not None:
        run_store.start_run(task.task_id)

    def persist(record: RunRecord, prompt_text: str) -> None:
        records.append(record)
        if run_store is not None:
            run_store.save_iteration(task.task_id, record, prompt_text, records)

    for q in range(cfg.max_iterations):
        logger.info(f"{task.task_id}: iteration {q + 1}/{cfg.max_iterations} with prompt v{prompt_I.version}")
        used_prompt = prompt_I
        try:
            try:
                skill = induce(task, traj, prompt_I, provider)
            except InductionFailed as e:
                logger.warning(f"{task.task_id}: iteration {q} scored worst: {e}")
                persist(
                    RunRecord(
                        iteration=q,
                        triple=WORST_TRIPLE,
                        prompt_version_before=used_prompt.version,
                        prompt_version_after=used_prompt.version,
                        failures=[str(e)],
                    ),
                    used_prompt.text,
                )
                continue

            session = environment.reset(env, task.scenario_seed)
            recon = deduce(task, skill, prompt_D, session, cfg.deduction, provider, template=prompts.template)
            report = compute_losses(
                task, traj, recon, skill, session, provider,
                recon_prompt=prompts.judge_recon, rubric_prompt=prompts.judge_rubric,
            )
            recon = recon.model_copy(update={"succeeded": report.triple.outcome == 0})

            is_best = best_triple is None or lex_less(report.triple, best_triple)
            if is_best:
                best, best_triple = skill, report.triple
                logger.info(f"{task.task_id}: new best {report.triple} at iteration {q}")
            else:
                logger.info(f"{task.task_id}: iteration {q} scored {report.triple}, best stays {best_triple}")

            failures: List[str] = []
            gradient_text: Optional[str] = None
            if q < cfg.max_iterations - 1:
                try:
                    gradient = compute_gradient(prompt_I, task, skill, recon, report, provider, q, prompts.gradient)
                    gradient_text = gradient.text
                    prompt_I = apply_gradient(prompt_I, gradient, provider, prompts.optimizer)
                    logger.info(f"{task.task_id}: induction prompt updated to v{prompt_I.version}")
                except (GradientFailed, UpdateRejected) as e:
                    logger.warning(f"{task.task_id}: keeping prompt v{prompt_I.version}: {e}")
                    failures.append(str(e))
        except MindSkillError as e:
            logger.error(f"{task.task_id}: run aborted at iteration {q}: {e}")
            raise RunAborted(f"{task.task_id}: aborted at iteration {q}: {e}", records) from e

        persist(
            RunRecord(
                iteration=q,
                skill=skill,
                recon=recon,
                recon_ref=f"iter_{q}/recon.traj",
                report=report,
                triple=report.triple,
                gradient=gradient_text,
                prompt_version_before=used_prompt.version,
                prompt_version_after=prompt_I.version,
                is_best=is_best,
                failures=failures,
            ),
            used_prompt.text,
        )

    if best is None:
        raise BestUnavailable(f"{task.task_id}: every iteration failed induction")
    if run_store is not None:
        run_store.save_best(task.task_id, best)
    return best, records


def best_iteration(records: List[RunRecord]) -> Optional[int]:
    """Iteration whose skill is the final best (last is_best transition)."""
    flagged = [record.iteration for record in records if record.is_best]
    return flagged[-1] if flagged else None


def best_triple_of(records: List[RunRecord]) -> LossTriple:
    index = best_iteration(records)
    return WORST_TRIPLE if index is None else next(r.triple for r in records if r.iteration == index)
