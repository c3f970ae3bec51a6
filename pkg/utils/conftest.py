"""
Shared pytest fixtures. Every model interaction in the suite goes through a
ScriptedProvider; nothing here touches the network.
"""
import os
import sys
from pathlib import Path

import pytest

# Add the project root to the Python path
PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

os.environ.setdefault("MINDSKILL_NO_LOG_FILE", "1")

from config import AppConfig, PathSettings, ProviderSettings, RetrievalSettings  # noqa: E402
from models import DeductionConfig, PromptState  # noqa: E402
from services import environment  # noqa: E402
from services.agents import default_template  # noqa: E402
from services.provider import AuditLog, ScriptedProvider  # noqa: E402
from services.skilldoc import make_skill  # noqa: E402

FIXTURES = PROJECT_ROOT / "fixtures"


@pytest.fixture(autouse=True)
def fresh_toyworld():
    """Scenario files re-register ToyWorld; give every test the generated one."""
    environment.configure_toyworld()
    yield
    environment.configure_toyworld()


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def toy_env():
    return environment.get_environment(environment.TOYWORLD_ID)


@pytest.fixture
def toy_task(toy_env):
    return toy_env.make_task(101, "train")


@pytest.fixture
def heldout_task(toy_env):
    return toy_env.make_task(201, "heldout")


@pytest.fixture
def audit() -> AuditLog:
    return AuditLog()


@pytest.fixture
def make_provider(audit):
    """Factory: ``make_provider(script)`` -> ScriptedProvider sharing the test's audit log."""

    def _make(script=()):
        return ScriptedProvider(list(script), audit=audit)

    return _make


@pytest.fixture
def app_config(tmp_path) -> AppConfig:
    return AppConfig(
        provider=ProviderSettings(backend="scripted", retry_backoff=0),
        max_iterations=4,
        retrieval=RetrievalSettings(k=3, mode="model"),
        paths=PathSettings(
            library_dir=str(tmp_path / "library"),
            runs_dir=str(tmp_path / "runs"),
            results_dir=str(tmp_path / "results"),
        ),
        train_seeds=[101, 102, 103],
        heldout_seeds=[201, 202, 203],
    )


@pytest.fixture
def prompt_I0() -> PromptState:
    return PromptState(
        text="Write a SKILL.md with YAML frontmatter holding name and description, then the five sections.",
        version=0,
    )


@pytest.fixture
def prompt_D() -> PromptState:
    return PromptState(text="You solve tasks with tools. Say TASK COMPLETE when done.", version=0, frozen=True)


@pytest.fixture
def deduction_cfg() -> DeductionConfig:
    return DeductionConfig(max_steps=15, stop_marker="TASK COMPLETE")


@pytest.fixture
def template() -> str:
    return default_template()


@pytest.fixture
def sample_skill():
    return make_skill(
        "paginate-and-update",
        "Read every page of a collection, then update the matching records.",
        {
            "Overview": "Log in, read all pages, update.",
            "When to Apply": "Paginated record stores.",
            "Procedure": "1. Log in.\n2. Read pages until one is empty.\n3. Update the records.",
            "Key Patterns": "- Pagination loop.",
            "Common Pitfalls": "- Stopping at page one.",
        },
    )
