"""Structured output schemas for the judge calls, plus the JSON extraction used to validate them"""
import json
from typing import Any, Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError

from models import RubricScores

JudgmentT = TypeVar("JudgmentT", bound=BaseModel)


class ReconJudgment(BaseModel):
    alignment_score: int = Field(..., ge=0, le=10, description="Procedural alignment of the two trajectories, 0-10")
    api_sequence_match: bool = Field(..., description="Same APIs called in a compatible order")
    control_flow_match: bool = Field(..., description="Same loops, pagination and branching structure")
    final_state_match: bool = Field(..., description="Both trajectories leave the environment in the same state")
    mismatches: List[str] = Field(default_factory=list, description="Concrete procedural differences")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "alignment_score": 7,
                    "api_sequence_match": True,
                    "control_flow_match": False,
                    "final_state_match": True,
                    "mismatches": ["reconstruction stopped paginating after the first page"],
                }
            ]
        }
    }


class RubricJudgment(BaseModel):
    gt_independence: int = Field(..., ge=0, le=10)
    actionability: int = Field(..., ge=0, le=10)
    transferability: int = Field(..., ge=0, le=10)
    completeness: int = Field(..., ge=0, le=10)
    conciseness: int = Field(..., ge=0, le=10)
    leaked_claims: List[str] = Field(default_factory=list, description="Claims only knowable from the ground-truth solution")
    issues: str = Field("", description="Short free-text summary of the problems found")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "gt_independence": 6,
                    "actionability": 9,
                    "transferability": 7,
                    "completeness": 8,
                    "conciseness": 8,
                    "leaked_claims": ["states the target item id is 4"],
                    "issues": "Hard-codes an item id from the solution.",
                }
            ]
        }
    }

    def to_scores(self) -> RubricScores:
        return RubricScores(**self.model_dump())


def extract_json_object(text: str) -> Optional[Dict[str, Any]]:
    """Parse ``text`` as a JSON object, falling back to the outermost {...} block."""
    text = (text or "").strip()
    if not text:
        return None
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj
    except json.JSONDecodeError:
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        try:
            obj = json.loads(text[start:end + 1])
        except json.JSONDecodeError:
            return None
        if isinstance(obj, dict):
            return obj
    return None


def schema_violations(schema: Type[BaseModel], text: str) -> List[str]:
    obj = extract_json_object(text)
    if obj is None:
        return ["the response must contain exactly one JSON object and nothing that breaks JSON syntax"]
    try:
        schema.model_validate(obj)
    except ValidationError as e:
        return [f"{'.'.join(str(part) for part in err['loc']) or 'object'}: {err['msg']}" for err in e.errors()]
    return []


def parse_judgment(schema: Type[JudgmentT], text: str) -> JudgmentT:
    """Parse a response that already passed ``schema_violations``."""
    return schema.model_validate(extract_json_object(text))
