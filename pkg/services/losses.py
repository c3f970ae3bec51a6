"""
The three textual losses and the lexicographic order over their triples.

Judges score on a 0-10 scale (higher is better); losses are ``10 - score``.
Judge failures are scored as the worst loss instead of aborting the run.
"""
import logging
from typing import Any, Dict, Optional, Tuple, Type

from pydantic import BaseModel

from config import read_default_prompt
from models import (
    EnvSession,
    LossReport,
    LossTriple,
    MindSkillError,
    PreconditionViolation,
    RubricScores,
    SkillDoc,
    TaskSpec,
    Trajectory,
    TrajectoryOrigin,
)
from schemas.judges import ReconJudgment, RubricJudgment, parse_judgment, schema_violations
from services import environment
from services.provider import ChatProvider, ValidationExhausted
from services.skilldoc import serialize_skill
from services.trajectory import render_trajectory

logger = logging.getLogger(__name__)

SCORE_CEILING = 10.0


class JudgeFailed(MindSkillError):
    pass


def lex_less(a: LossTriple, b: LossTriple) -> bool:
    """Strict lexicographic order, outcome > recon > rubric."""
    return a.as_tuple() < b.as_tuple()


def _judge(provider: ChatProvider, tag: str, system: str, user: str, schema: Type[BaseModel]) -> BaseModel:
    request = provider.build_request(tag, user, system=system)
    try:
        response = provider.complete_validated(request, lambda text: schema_violations(schema, text))
    except ValidationExhausted as e:
        raise JudgeFailed(f"{tag} judge gave no valid verdict: {'; '.join(e.violations)}") from e
    return parse_judgment(schema, response.content)


# ---------------------------------------------------------------- reconstruction

def recon_judge_message(task: TaskSpec, source: Trajectory, recon: Trajectory) -> str:
    return (
        f"Task instruction:\n{task.instruction}\n\n"
        f"Reference trajectory:\n{render_trajectory(source)}\n"
        f"Agent trajectory:\n{render_trajectory(recon)}"
    )


def _recon_feedback(judgment: ReconJudgment) -> str:
    flags = ", ".join(
        f"{label}: {'yes' if value else 'no'}"
        for label, value in (
            ("API sequence match", judgment.api_sequence_match),
            ("control flow match", judgment.control_flow_match),
            ("final state match", judgment.final_state_match),
        )
    )
    lines = [f"Alignment score {judgment.alignment_score}/10 ({flags})."]
    if judgment.mismatches:
        lines.append("Procedural mismatches:")
        lines += [f"- {mismatch}" for mismatch in judgment.mismatches]
    else:
        lines.append("No procedural mismatches reported.")
    return "\n".join(lines)


def judge_recon(
    source: Trajectory, recon: Trajectory, task: TaskSpec, provider: ChatProvider, system_prompt: Optional[str] = None
) -> Tuple[float, str, Dict[str, Any]]:
    if source.origin == TrajectoryOrigin.RECONSTRUCTION:
        raise PreconditionViolation("the source trajectory must be a rollout or a wrapped solution")
    if recon.origin != TrajectoryOrigin.RECONSTRUCTION:
        raise PreconditionViolation("the second trajectory must be a reconstruction")

    try:
        judgment = _judge(
            provider,
            "judge_recon",
            system_prompt or read_default_prompt("judge_recon"),
            recon_judge_message(task, source, recon),
            ReconJudgment,
        )
    except JudgeFailed as e:
        logger.warning(f"{task.task_id}: {e}")
        return SCORE_CEILING, f"Reconstruction judge failed, scored as worst: {e}", {"judge_failed": True}

    # flags are logged only; the loss uses the alignment score alone
    logger.debug(
        f"{task.task_id}: recon flags api={judgment.api_sequence_match} "
        f"flow={judgment.control_flow_match} state={judgment.final_state_match}"
    )
    return SCORE_CEILING - judgment.alignment_score, _recon_feedback(judgment), judgment.model_dump()


def recon_loss(
    source: Trajectory, recon: Trajectory, task: TaskSpec, provider: ChatProvider, system_prompt: Optional[str] = None
) -> Tuple[float, str]:
    loss, feedback, _ = judge_recon(source, recon, task, provider, system_prompt)
    return loss, feedback


# ---------------------------------------------------------------- outcome

def outcome_loss(recon: Trajectory, task: TaskSpec, terminal_session: EnvSession) -> Tuple[float, str]:
    """Grade the session deduce() ran in; nothing is re-executed."""
    if recon.origin != TrajectoryOrigin.RECONSTRUCTION:
        raise PreconditionViolation("outcome loss is defined on reconstructions")
    grade = environment.evaluate(terminal_session, task)
    return grade.loss, grade.feedback


# ---------------------------------------------------------------- rubric

def rubric_judge_message(task: TaskSpec, skill: SkillDoc) -> str:
    return f"Task instruction:\n{task.instruction}\n\nSkill:\n{serialize_skill(skill)}"


def _rubric_feedback(scores: RubricScores) -> str:
    rendered = ", ".join(f"{name}={value:g}" for name, value in scores.dimensions().items())
    lines = [f"Rubric scores: {rendered}; overall {scores.overall():g}/10 (capped by gt_independence)."]
    if scores.issues.strip():
        lines.append(f"Issues: {scores.issues.strip()}")
    if scores.leaked_claims:
        lines.append("Leaked claims (only knowable from the reference solution):")
        lines += [f"- {claim}" for claim in scores.leaked_claims]
    return "\n".join(lines)


def rubric_loss(
    skill: SkillDoc, task: TaskSpec, provider: ChatProvider, system_prompt: Optional[str] = None
) -> Tuple[float, str, Optional[RubricScores]]:
    """Judge sees only (instruction, skill), never a trajectory."""
    try:
        judgment = _judge(
            provider,
            "judge_rubric",
            system_prompt or read_default_prompt("judge_rubric"),
            rubric_judge_message(task, skill),
            RubricJudgment,
        )
    except JudgeFailed as e:
        logger.warning(f"{task.task_id}: {e}")
        return SCORE_CEILING, f"Rubric judge failed, scored as worst: {e}", None

    scores = judgment.to_scores()
    return SCORE_CEILING - scores.overall(), _rubric_feedback(scores), scores


# ---------------------------------------------------------------- all three

def compute_losses(
    task: TaskSpec,
    source: Trajectory,
    recon: Trajectory,
    skill: SkillDoc,
    terminal_session: EnvSession,
    provider: ChatProvider,
    recon_prompt: Optional[str] = None,
    rubric_prompt: Optional[str] = None,
) -> LossReport:
    grade = environment.evaluate(terminal_session, task)
    l_recon, f_recon, recon_detail = judge_recon(source, recon, task, provider, recon_prompt)
    l_rubric, f_rubric, scores = rubric_loss(skill, task, provider, rubric_prompt)
    rubric_detail = scores.model_dump() if scores is not None else {"judge_failed": True}
    return LossReport(
        triple=LossTriple(outcome=grade.loss, recon=l_recon, rubric=l_rubric),
        f_outcome=grade.feedback,
        f_recon=f_recon,
        f_rubric=f_rubric,
        recon_detail=recon_detail,
        rubric_detail=rubric_detail,
        outcome_checks=grade.checks,
    )
