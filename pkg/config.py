import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent

# Credentials come from the environment only; the scripted provider needs none
MINDSKILL_API_KEY = os.environ.get("MINDSKILL_API_KEY")
MINDSKILL_BASE_URL = os.environ.get("MINDSKILL_BASE_URL")
if not MINDSKILL_API_KEY:
    logger.debug("MINDSKILL_API_KEY is not set - only the scripted provider will be usable")

# Optimization loop
DEFAULT_MAX_ITERATIONS = 8
DEFAULT_TOP_K = 3
DEFAULT_MAX_STEPS = 15
DEFAULT_STOP_MARKER = "TASK COMPLETE"

# Provider retry discipline
MAX_ATTEMPTS = 3
RETRY_BACKOFF_SECONDS = 1.0

# Trajectories
OBSERVATION_LIMIT = 4000
WRAPPED_THOUGHT = "Executing ground-truth step."

# Injection size report (whitespace tokens)
INJECTION_TOKEN_BUDGET = 1500

DEFAULT_MODEL = "qwen/qwen3.5-122b-a10b"
DEFAULT_ENV_ID = "toyworld"
DEFAULT_TRAIN_SEEDS = list(range(101, 109))
DEFAULT_HELDOUT_SEEDS = list(range(201, 209))

ROLE_TAGS = (
    "induction",
    "deduction",
    "judge_recon",
    "judge_rubric",
    "gradient",
    "optimizer",
    "retrieval",
)

DEFAULT_TEMPERATURES = {
    "induction": 0.7,
    "deduction": 0.0,
    "judge_recon": 0.0,
    "judge_rubric": 0.0,
    "gradient": 0.0,
    "optimizer": 0.0,
    "retrieval": 0.0,
}

PROMPT_FILES = {
    "induction": "induction_initial.txt",
    "deduction_system": "deduction_system.txt",
    "deduction_template": "deduction_template.txt",
    "judge_rubric": "rubric_judge.txt",
    "judge_recon": "recon_judge.txt",
    "gradient": "gradient.txt",
    "optimizer": "optimizer.txt",
    "retrieval": "retrieval.txt",
}


def read_default_prompt(name: str) -> str:
    """Prompt text from the bundled prompts directory."""
    return (PROJECT_ROOT / "prompts" / PROMPT_FILES[name]).read_text(encoding="utf-8")


class ConfigError(Exception):
    """Raised when the configuration file is unreadable or inconsistent."""


class ProviderSettings(BaseModel):
    backend: Literal["openai", "scripted"] = "openai"
    base_url: Optional[str] = None
    provider_hint: Optional[str] = None
    models: Dict[str, str] = Field(default_factory=lambda: {tag: DEFAULT_MODEL for tag in ROLE_TAGS})
    temperatures: Dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    max_output_tokens: int = Field(4096, gt=0)
    retry_backoff: float = Field(RETRY_BACKOFF_SECONDS, ge=0)

    @field_validator("models", "temperatures")
    @classmethod
    def _known_tags(cls, value: dict) -> dict:
        unknown = sorted(set(value) - set(ROLE_TAGS))
        if unknown:
            raise ValueError(f"unknown role tags: {unknown}")
        return value

    def model_for(self, tag: str) -> str:
        return self.models.get(tag, DEFAULT_MODEL)

    def temperature_for(self, tag: str) -> float:
        return self.temperatures.get(tag, DEFAULT_TEMPERATURES.get(tag, 0.0))


class RetrievalSettings(BaseModel):
    k: int = Field(DEFAULT_TOP_K, ge=1)
    mode: Literal["model", "lexical"] = "model"


class PathSettings(BaseModel):
    library_dir: str = "library"
    runs_dir: str = "runs"
    results_dir: str = "results"
    prompts_dir: str = str(PROJECT_ROOT / "prompts")
    trajectories_dir: Optional[str] = None


class AppConfig(BaseModel):
    provider: ProviderSettings = Field(default_factory=ProviderSettings)
    max_iterations: int = Field(DEFAULT_MAX_ITERATIONS, ge=1)
    max_steps: int = Field(DEFAULT_MAX_STEPS, ge=1)
    stop_marker: str = DEFAULT_STOP_MARKER
    retrieval: RetrievalSettings = Field(default_factory=RetrievalSettings)
    paths: PathSettings = Field(default_factory=PathSettings)
    env_id: str = DEFAULT_ENV_ID
    train_seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_TRAIN_SEEDS))
    heldout_seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_HELDOUT_SEEDS))
    scenario_file: Optional[str] = None
    grading: Literal["graded", "binary"] = "graded"
    injection_token_budget: int = Field(INJECTION_TOKEN_BUDGET, gt=0)
    parallel: int = Field(1, ge=1)

    def prompt_path(self, name: str) -> Path:
        return Path(self.paths.prompts_dir) / PROMPT_FILES[name]

    def read_prompt(self, name: str) -> str:
        return self.prompt_path(name).read_text(encoding="utf-8")


def _apply_overrides(data: dict, overrides: Dict[str, object]) -> dict:
    """Apply dotted-key overrides (e.g. ``retrieval.k``) on top of file values."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            target = target.setdefault(key, {})
        target[leaf] = value
    return data


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> AppConfig:
    """Load the JSON config file, apply flag overrides and validate paths.

    Precedence is flags > file > defaults. MINDSKILL_BASE_URL only fills an
    empty ``provider.base_url``.
    """
    data: dict = {}
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid JSON: {e}")
        logger.info(f"Loaded config file {config_path}")

    data = _apply_overrides(data, overrides or {})

    try:
        config = AppConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")

    if not config.provider.base_url and MINDSKILL_BASE_URL:
        config.provider.base_url = MINDSKILL_BASE_URL

    missing = [str(config.prompt_path(name)) for name in PROMPT_FILES if not config.prompt_path(name).exists()]
    if missing:
        raise ConfigError(f"Prompt files missing: {missing}")

    for directory in (config.paths.library_dir, config.paths.runs_dir, config.paths.results_dir):
        os.makedirs(directory, exist_ok=True)

    logger.info(
        f"Configuration ready - Q={config.max_iterations}, K={config.retrieval.k}, "
        f"retrieval mode={config.retrieval.mode}, backend={config.provider.backend}"
    )
    return config
