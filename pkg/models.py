import hashlib
import json
import statistics
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

from config import DEFAULT_MAX_ITERATIONS, DEFAULT_MAX_STEPS, DEFAULT_STOP_MARKER, DEFAULT_TOP_K

STANDARD_SECTIONS = ("Overview", "When to Apply", "Procedure", "Key Patterns", "Common Pitfalls")

RequestTag = Literal[
    "induction",
    "deduction",
    "judge_recon",
    "judge_rubric",
    "gradient",
    "optimizer",
    "retrieval",
]


class MindSkillError(Exception):
    """Base class for all errors raised by the skill mining pipeline."""


class PreconditionViolation(MindSkillError, ValueError):
    """An operation was called with inputs that break its contract."""


def _trim_blank_edges(text: str) -> str:
    lines = text.replace("\r\n", "\n").split("\n")
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    return "\n".join(lines)


# ---------------------------------------------------------------- skills

class SkillDoc(BaseModel):
    """A SKILL.md document. Equality is structural and ignores ``raw``."""

    model_config = ConfigDict(frozen=True)

    name: str
    description: str
    sections: Dict[str, str]
    preamble: str = ""
    raw: str = ""

    @field_validator("name", "description")
    @classmethod
    def _flat_non_empty(cls, value: str) -> str:
        value = " ".join(value.split())
        if not value:
            raise ValueError("must be non-empty after trimming")
        return value

    @field_validator("preamble")
    @classmethod
    def _clean_preamble(cls, value: str) -> str:
        value = _trim_blank_edges(value)
        if any(line.startswith("## ") for line in value.split("\n")):
            raise ValueError("preamble may not contain section headings")
        return value

    @field_validator("sections")
    @classmethod
    def _clean_sections(cls, value: Dict[str, str]) -> Dict[str, str]:
        if not value:
            raise ValueError("a skill needs at least one section")
        cleaned: Dict[str, str] = {}
        for title, body in value.items():
            title = title.strip()
            if not title or "\n" in title:
                raise ValueError(f"invalid section title {title!r}")
            body = _trim_blank_edges(body)
            if any(line.startswith("## ") for line in body.split("\n")):
                raise ValueError(f"section {title!r} body contains a nested '## ' heading")
            cleaned[title] = body
        return cleaned

    def _structure(self) -> Tuple:
        return (self.name, self.description, self.preamble, tuple(self.sections.items()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkillDoc):
            return NotImplemented
        return self._structure() == other._structure()

    def __hash__(self) -> int:
        return hash(self._structure())


# ---------------------------------------------------------------- tasks and trajectories

class TrajectoryOrigin(str, Enum):
    ROLLOUT = "rollout"
    GROUND_TRUTH_WRAPPED = "ground_truth_wrapped"
    RECONSTRUCTION = "reconstruction"


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str = Field(min_length=1)
    instruction: str
    env_id: str
    scenario_seed: int
    checker_ref: str
    checker_args: Dict[str, Any] = Field(default_factory=dict)
    grading: Literal["graded", "binary"] = "graded"
    split: Literal["train", "heldout"] = "train"
    solution: Optional[List[str]] = None

    @field_validator("instruction")
    @classmethod
    def _instruction_present(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("instruction must be non-empty")
        return value


class TrajectoryStep(BaseModel):
    model_config = ConfigDict(frozen=True)

    thought: str = ""
    action: str
    observation: str = ""

    @field_validator("action")
    @classmethod
    def _action_present(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("action must be non-empty")
        return value


class Trajectory(BaseModel):
    model_config = ConfigDict(frozen=True)

    task_id: str
    steps: List[TrajectoryStep] = Field(min_length=1)
    origin: TrajectoryOrigin
    succeeded: Optional[bool] = None

    @model_validator(mode="after")
    def _wrapped_must_succeed(self) -> "Trajectory":
        if self.origin == TrajectoryOrigin.GROUND_TRUTH_WRAPPED and self.succeeded is False:
            raise ValueError("a wrapped ground-truth trajectory cannot be marked as failed")
        return self


# ---------------------------------------------------------------- provider

class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Literal["system", "user", "assistant"]
    content: str

    @model_validator(mode="after")
    def _content_required(self) -> "ChatMessage":
        if self.role in ("system", "user") and not self.content.strip():
            raise ValueError(f"{self.role} message content must be non-empty")
        return self


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    messages: List[ChatMessage] = Field(min_length=1)
    model_id: str
    provider_hint: Optional[str] = None
    temperature: float = Field(0.0, ge=0.0)
    max_output_tokens: int = Field(4096, gt=0)
    tag: RequestTag

    @field_validator("messages")
    @classmethod
    def _system_first(cls, value: List[ChatMessage]) -> List[ChatMessage]:
        if any(message.role == "system" for message in value[1:]):
            raise ValueError("a system message may only appear first")
        return value

    def with_messages(self, messages: List[ChatMessage]) -> "ChatRequest":
        return ChatRequest(**{**self.model_dump(exclude={"messages"}), "messages": list(messages)})

    def text(self) -> str:
        """Concatenated message contents, used for audit scans."""
        return "\n".join(message.content for message in self.messages)

    def digest(self) -> str:
        payload = json.dumps(
            {
                "model": self.model_id,
                "tag": self.tag,
                "messages": [[m.role, m.content] for m in self.messages],
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatResponse(BaseModel):
    content: str
    finish_reason: str = "stop"
    usage: Dict[str, int] = Field(default_factory=dict)


# ---------------------------------------------------------------- environment

Scalar = Union[bool, int, str]


class ToolCall(BaseModel):
    model_config = ConfigDict(frozen=True)

    api: str = Field(min_length=1)
    args: Dict[str, Union[Scalar, List[Scalar]]] = Field(default_factory=dict)

    def render(self) -> str:
        """Canonical action text accepted by the action parser."""
        rendered = ", ".join(f"{key}={value!r}" for key, value in self.args.items())
        return f"{self.api}({rendered})"


class ToolResult(BaseModel):
    ok: bool
    payload: Any = None
    error: Optional[str] = None

    @model_validator(mode="after")
    def _one_side(self) -> "ToolResult":
        if self.ok and self.error is not None:
            raise ValueError("a successful result carries no error")
        if not self.ok and not self.error:
            raise ValueError("a failed result needs an error message")
        return self

    def render(self) -> str:
        if self.ok:
            return json.dumps(self.payload, sort_keys=True)
        return f"Error: {self.error}"


class EnvSession(BaseModel):
    env_id: str
    scenario_seed: int
    state: Dict[str, Any]
    step_count: int = Field(0, ge=0)
    errors: List[str] = Field(default_factory=list)


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class OutcomeGrade(BaseModel):
    loss: float = Field(ge=0.0, le=1.0)
    feedback: str
    checks: List[CheckResult] = Field(default_factory=list)


# ---------------------------------------------------------------- agents

class PromptState(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    version: int = Field(0, ge=0)
    frozen: bool = False

    @computed_field
    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def bumped(self, text: str) -> "PromptState":
        if self.frozen:
            raise PreconditionViolation("a frozen prompt cannot be updated")
        return PromptState(text=text, version=self.version + 1, frozen=False)


class DeductionConfig(BaseModel):
    max_steps: int = Field(DEFAULT_MAX_STEPS, ge=1)
    stop_marker: str = DEFAULT_STOP_MARKER


# ---------------------------------------------------------------- losses

class LossTriple(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    outcome: float = Field(ge=0.0, le=1.0)
    recon: float = Field(ge=0.0, le=10.0)
    rubric: float = Field(ge=0.0, le=10.0)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.outcome, self.recon, self.rubric)

    def __str__(self) -> str:
        return f"({self.outcome:g}, {self.recon:g}, {self.rubric:g})"


WORST_TRIPLE = LossTriple(outcome=1.0, recon=10.0, rubric=10.0)


class RubricScores(BaseModel):
    gt_independence: float = Field(ge=0.0, le=10.0)
    actionability: float = Field(ge=0.0, le=10.0)
    transferability: float = Field(ge=0.0, le=10.0)
    completeness: float = Field(ge=0.0, le=10.0)
    conciseness: float = Field(ge=0.0, le=10.0)
    leaked_claims: List[str] = Field(default_factory=list)
    issues: str = ""

    def dimensions(self) -> Dict[str, float]:
        return {
            "gt_independence": self.gt_independence,
            "actionability": self.actionability,
            "transferability": self.transferability,
            "completeness": self.completeness,
            "conciseness": self.conciseness,
        }

    def overall(self) -> float:
        # gated on GT-independence
        return min(self.gt_independence, statistics.fmean(self.dimensions().values()))


class LossReport(BaseModel):
    triple: LossTriple
    f_recon: str
    f_outcome: str
    f_rubric: str
    recon_detail: Dict[str, Any] = Field(default_factory=dict)
    rubric_detail: Dict[str, Any] = Field(default_factory=dict)
    outcome_checks: List[CheckResult] = Field(default_factory=list)

    @model_validator(mode="after")
    def _feedback_when_lossy(self) -> "LossReport":
        for loss, feedback, label in (
            (self.triple.outcome, self.f_outcome, "f_outcome"),
            (self.triple.recon, self.f_recon, "f_recon"),
            (self.triple.rubric, self.f_rubric, "f_rubric"),
        ):
            if loss > 0 and not feedback.strip():
                raise ValueError(f"{label} must explain a non-zero loss")
        return self


# ---------------------------------------------------------------- optimization

class GradientText(BaseModel):
    text: str
    iteration: int = Field(ge=0)


class RunConfig(BaseModel):
    max_iterations: int = Field(DEFAULT_MAX_ITERATIONS, ge=1)
    task_id: Optional[str] = None
    deduction: DeductionConfig = Field(default_factory=DeductionConfig)


class RunRecord(BaseModel):
    iteration: int = Field(ge=0)
    skill: Optional[SkillDoc] = None
    recon: Optional[Trajectory] = None
    recon_ref: Optional[str] = None
    report: Optional[LossReport] = None
    triple: LossTriple = WORST_TRIPLE
    gradient: Optional[str] = None
    prompt_version_before: int = Field(ge=0)
    prompt_version_after: int = Field(ge=0)
    is_best: bool = False
    failures: List[str] = Field(default_factory=list)


# ---------------------------------------------------------------- library and evaluation

class LibraryEntry(BaseModel):
    skill: SkillDoc
    source_task_id: str
    best_triple: LossTriple
    created_iteration: int = Field(0, ge=0)


class RetrievalConfig(BaseModel):
    k: int = Field(DEFAULT_TOP_K, ge=1)
    mode: Literal["model", "lexical"] = "model"


class EvalResult(BaseModel):
    task_id: str
    k: int
    passed: bool
    loss: float
    injected_tokens: int
    retrieved_ids: List[str] = Field(default_factory=list)
