"""
SKILL.md parsing, validation and canonical serialization.

Canonical form::

    ---
    name: <name>
    description: <description>
    ---

    [preamble]

    ## <Section>
    <body>

Blocks are separated by exactly one blank line and the text ends with a
single newline. Only ``## `` lines open sections; ``# `` headings inside a
body are kept verbatim.
"""
import logging
import re
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from models import STANDARD_SECTIONS, MindSkillError, SkillDoc

logger = logging.getLogger(__name__)

FRONTMATTER_DELIMITER = "---"
SECTION_PREFIX = "## "
REQUIRED_FIELDS = ("name", "description")

SKILLS_BEGIN = "### SKILLS BEGIN"
SKILLS_END = "### SKILLS END"
SKILL_SEPARATOR = "* * *"
NO_SKILLS_NOTE = "(No skills are available for this task.)"
SKILLS_PLACEHOLDER = "{{skills}}"
PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class Violation(BaseModel):
    """One format problem found in a candidate SKILL.md."""

    model_config = ConfigDict(frozen=True)

    code: str
    subject: str = ""

    def __str__(self) -> str:
        if self.code == "missing_frontmatter":
            return "MissingFrontmatter: the document must start with a '---' block holding name and description"
        if self.code == "invalid_frontmatter":
            return f"InvalidFrontmatter: {self.subject}"
        if self.code == "missing_field":
            return f"MissingField({self.subject}): the frontmatter must define a non-empty '{self.subject}'"
        if self.code == "empty_body":
            return "EmptyBody: no '## ' sections follow the frontmatter"
        if self.code == "missing_section":
            return f"MissingSection({self.subject}): add a '## {self.subject}' section"
        if self.code == "extra_field":
            return f"ExtraField({self.subject}): the frontmatter may only hold name and description"
        return f"{self.code}: {self.subject}"


def MissingSection(title: str) -> Violation:
    return Violation(code="missing_section", subject=title)


def ExtraField(key: str) -> Violation:
    return Violation(code="extra_field", subject=key)


class SkillFormatError(MindSkillError):
    code = "invalid_frontmatter"

    def __init__(self, message: str, subject: str = ""):
        super().__init__(message)
        self.subject = subject or message

    def violation(self) -> Violation:
        return Violation(code=self.code, subject=self.subject)


class MissingFrontmatter(SkillFormatError):
    code = "missing_frontmatter"


class InvalidFrontmatter(SkillFormatError):
    code = "invalid_frontmatter"


class MissingField(SkillFormatError):
    code = "missing_field"

    def __init__(self, field: str):
        super().__init__(f"frontmatter is missing required field '{field}'", subject=field)
        self.field = field


class EmptyBody(SkillFormatError):
    code = "empty_body"


class BadTemplate(MindSkillError):
    pass


def _strip_code_fence(text: str) -> str:
    stripped = text.strip()
    if stripped.startswith("```"):
        lines = stripped.split("\n")
        if len(lines) >= 2 and lines[-1].strip() == "```":
            return "\n".join(lines[1:-1])
    return text


def _flat_pairs(block: str) -> Dict[str, str]:
    """Fallback for frontmatter a YAML loader rejects (e.g. unquoted colons)."""
    pairs: Dict[str, str] = {}
    for line in block.split("\n"):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise InvalidFrontmatter(f"frontmatter line is not a 'key: value' pair: {line.strip()!r}")
        pairs[key.strip()] = value.strip().strip("'\"")
    return pairs


def _load_frontmatter(block: str) -> Dict[str, str]:
    try:
        loaded = yaml.safe_load(block)
    except yaml.YAMLError:
        logger.debug("Frontmatter is not valid YAML, falling back to flat key/value parsing")
        return _flat_pairs(block)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise InvalidFrontmatter("frontmatter must be a mapping of flat 'key: value' pairs")
    meta: Dict[str, str] = {}
    for key, value in loaded.items():
        if isinstance(value, (dict, list)):
            raise InvalidFrontmatter(f"'{key}' must be a flat scalar value")
        meta[str(key)] = "" if value is None else str(value)
    return meta


def _split_sections(lines: List[str]) -> Tuple[str, Dict[str, str]]:
    preamble: List[str] = []
    sections: Dict[str, List[str]] = {}
    current: Optional[List[str]] = None
    for line in lines:
        if line.startswith(SECTION_PREFIX):
            title = line[len(SECTION_PREFIX):].strip()
            if not title:
                continue
            if title in sections:
                # repeated titles are merged into the first occurrence
                current = sections[title]
                current.append("")
            else:
                current = sections.setdefault(title, [])
            continue
        (preamble if current is None else current).append(line)
    return "\n".join(preamble), {title: "\n".join(body) for title, body in sections.items()}


def parse_skill(text: str) -> SkillDoc:
    """Parse SKILL.md text into a SkillDoc.

    Raises MissingFrontmatter, InvalidFrontmatter, MissingField or EmptyBody.
    Frontmatter keys other than name and description are dropped.
    """
    return _parse_with_extras(text)[0]


def _parse_with_extras(text: str) -> Tuple[SkillDoc, List[str]]:
    lines = _strip_code_fence(text.replace("\r\n", "\n")).split("\n")

    start = 0
    while start < len(lines) and not lines[start].strip():
        start += 1
    if start >= len(lines) or lines[start].strip() != FRONTMATTER_DELIMITER:
        raise MissingFrontmatter("the document does not start with a '---' frontmatter block")
    end = next((i for i in range(start + 1, len(lines)) if lines[i].strip() == FRONTMATTER_DELIMITER), None)
    if end is None:
        raise MissingFrontmatter("the frontmatter block is never closed with '---'")

    meta = _load_frontmatter("\n".join(lines[start + 1:end]))
    for field in REQUIRED_FIELDS:
        if not meta.get(field, "").strip():
            raise MissingField(field)

    extras = [key for key in meta if key not in REQUIRED_FIELDS]
    if extras:
        logger.debug(f"Dropping extra frontmatter keys: {extras}")

    preamble, sections = _split_sections(lines[end + 1:])
    if not sections:
        raise EmptyBody("no '## ' sections follow the frontmatter")

    try:
        doc = SkillDoc(
            name=meta["name"],
            description=meta["description"],
            sections=sections,
            preamble=preamble,
            raw=text,
        )
    except ValidationError as e:
        raise InvalidFrontmatter(f"skill document is malformed: {e.errors()[0]['msg']}")
    return doc, extras


def _dump_frontmatter(name: str, description: str) -> str:
    return yaml.safe_dump(
        {"name": name, "description": description},
        sort_keys=False,
        allow_unicode=True,
        default_flow_style=False,
        width=float("inf"),
    )


def serialize_skill(doc: SkillDoc) -> str:
    """Canonical SKILL.md text for ``doc``."""
    blocks = [f"{FRONTMATTER_DELIMITER}\n{_dump_frontmatter(doc.name, doc.description)}{FRONTMATTER_DELIMITER}"]
    if doc.preamble:
        blocks.append(doc.preamble)
    for title, body in doc.sections.items():
        blocks.append(f"{SECTION_PREFIX}{title}\n{body}" if body else f"{SECTION_PREFIX}{title}")
    return "\n\n".join(blocks) + "\n"


def make_skill(name: str, description: str, sections: Dict[str, str], preamble: str = "") -> SkillDoc:
    """Build a SkillDoc whose ``raw`` is its canonical serialization."""
    doc = SkillDoc(name=name, description=description, sections=sections, preamble=preamble)
    return doc.model_copy(update={"raw": serialize_skill(doc)})


def validate_skill_format(text: str) -> List[Violation]:
    """Empty iff ``text`` parses, has no extra frontmatter keys and carries all five standard sections."""
    try:
        doc, extras = _parse_with_extras(text)
    except SkillFormatError as e:
        return [e.violation()]
    violations = [ExtraField(key) for key in extras]
    return violations + [MissingSection(title) for title in STANDARD_SECTIONS if title not in doc.sections]


def skill_format_messages(text: str) -> List[str]:
    """Validator adapter for the provider: violations as fix-instruction lines."""
    return [str(violation) for violation in validate_skill_format(text)]


def render_skill_slot(skills: Sequence[SkillDoc]) -> str:
    """Full canonical skill bodies between the SKILLS BEGIN/END markers."""
    if skills:
        inner = f"\n{SKILL_SEPARATOR}\n".join(serialize_skill(skill).rstrip("\n") for skill in skills)
    else:
        inner = NO_SKILLS_NOTE
    return f"{SKILLS_BEGIN}\n{inner}\n{SKILLS_END}"


def inject_skills(template: str, skills: Sequence[SkillDoc], fields: Optional[Mapping[str, str]] = None) -> str:
    """Fill {{skills}} and any ``fields`` placeholders in one pass.

    Inserted text is never rescanned, so placeholders quoted inside a skill
    body stay literal. Unknown placeholders are left as they are.
    """
    count = template.count(SKILLS_PLACEHOLDER)
    if count != 1:
        raise BadTemplate(f"template must contain {SKILLS_PLACEHOLDER} exactly once, found {count}")
    values = {**(fields or {}), "skills": render_skill_slot(skills)}
    return PLACEHOLDER.sub(lambda found: values.get(found.group(1), found.group(0)), template)
