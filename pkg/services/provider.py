"""
Chat-completion providers with the 3-attempt retry discipline.

``complete`` retries empty responses with the same messages. ``complete_validated``
appends an invalid response back as an assistant turn followed by a user fix
instruction. Both draw on one budget of MAX_ATTEMPTS round-trips per call, and
every attempt lands in the shared AuditLog.
"""
import hashlib
import logging
import threading
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import openai
from pydantic import BaseModel

from config import MAX_ATTEMPTS, MINDSKILL_API_KEY, ConfigError, ProviderSettings
from models import ChatMessage, ChatRequest, ChatResponse, MindSkillError
from utils.storage import write_jsonl

logger = logging.getLogger(__name__)

Validator = Callable[[str], List[str]]
Matcher = Callable[[ChatRequest], bool]
ScriptedResponse = Union[str, Callable[[ChatRequest], str]]


class ProviderExhausted(MindSkillError):
    pass


class TransportError(MindSkillError):
    """Non-retryable backend failure (auth, bad request, malformed config)."""


class ValidationExhausted(MindSkillError):
    def __init__(self, violations: List[str], content: str):
        super().__init__(f"response still invalid after {MAX_ATTEMPTS} attempts: {'; '.join(violations)}")
        self.violations = violations
        self.content = content


class ScriptMiss(MindSkillError):
    pass


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def fix_instruction(violations: Sequence[str]) -> str:
    listed = "\n".join(f"- {violation}" for violation in violations)
    return (
        "Your previous response could not be accepted:\n"
        f"{listed}\n"
        "Fix these problems and reply again with the complete corrected output only."
    )


# ---------------------------------------------------------------- audit log

class AuditEntry(BaseModel):
    seq: int
    tag: str
    request_digest: str
    attempt: int
    response_digest: str
    system_digest: Optional[str] = None
    request_text: str = ""
    response_text: str = ""

    def record(self) -> Dict[str, object]:
        return {
            "seq": self.seq,
            "tag": self.tag,
            "request_digest": self.request_digest,
            "attempt": self.attempt,
            "response_digest": self.response_digest,
        }


class AuditLog:
    """Append-only, totally ordered log of every provider attempt."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: List[AuditEntry] = []

    def append(self, request: ChatRequest, attempt: int, content: str) -> AuditEntry:
        system = request.messages[0].content if request.messages[0].role == "system" else None
        with self._lock:
            entry = AuditEntry(
                seq=len(self._entries),
                tag=request.tag,
                request_digest=request.digest(),
                attempt=attempt,
                response_digest=_sha(content),
                system_digest=_sha(system) if system is not None else None,
                request_text=request.text(),
                response_text=content,
            )
            self._entries.append(entry)
        return entry

    @property
    def entries(self) -> List[AuditEntry]:
        with self._lock:
            return list(self._entries)

    def for_tag(self, tag: str) -> List[AuditEntry]:
        return [entry for entry in self.entries if entry.tag == tag]

    def __len__(self) -> int:
        return len(self.entries)

    def dump(self, path: Union[str, Path]) -> Path:
        return write_jsonl(path, (entry.record() for entry in self.entries))


# ---------------------------------------------------------------- providers

class ChatProvider(ABC):
    def __init__(self, settings: ProviderSettings, audit: Optional[AuditLog] = None, max_attempts: int = MAX_ATTEMPTS):
        self.settings = settings
        self.audit = audit if audit is not None else AuditLog()
        self.max_attempts = max_attempts

    @abstractmethod
    def _send(self, request: ChatRequest) -> ChatResponse:
        """One backend round-trip. Retryable failures come back as empty content."""

    def build_request(self, tag: str, user: str, system: Optional[str] = None) -> ChatRequest:
        messages = []
        if system is not None:
            messages.append(ChatMessage(role="system", content=system))
        messages.append(ChatMessage(role="user", content=user))
        return ChatRequest(
            messages=messages,
            model_id=self.settings.model_for(tag),
            provider_hint=self.settings.provider_hint,
            temperature=self.settings.temperature_for(tag),
            max_output_tokens=self.settings.max_output_tokens,
            tag=tag,
        )

    def _attempt(self, request: ChatRequest, attempt: int) -> ChatResponse:
        """One audited round-trip; sleeps after an empty response when attempts remain."""
        response = self._send(request)
        self.audit.append(request, attempt, response.content)
        if not response.content.strip():
            logger.warning(f"[{request.tag}] empty response on attempt {attempt}/{self.max_attempts}")
            if attempt < self.max_attempts and self.settings.retry_backoff > 0:
                time.sleep(self.settings.retry_backoff)
        else:
            logger.debug(f"[{request.tag}] attempt {attempt}: {len(response.content)} chars")
        return response

    def complete(self, request: ChatRequest) -> ChatResponse:
        for attempt in range(1, self.max_attempts + 1):
            response = self._attempt(request, attempt)
            if response.content.strip():
                return response
        raise ProviderExhausted(f"[{request.tag}] no non-empty response after {self.max_attempts} attempts")

    def complete_validated(self, request: ChatRequest, validator: Validator) -> ChatResponse:
        """Empty and invalid responses draw on the same attempt budget.

        Empty responses repeat the current messages; invalid ones are appended
        back with a fix instruction. ValidationExhausted once any non-empty
        response was rejected, ProviderExhausted when every attempt was empty.
        """
        messages = list(request.messages)
        violations: List[str] = []
        content: Optional[str] = None
        for attempt in range(1, self.max_attempts + 1):
            response = self._attempt(request.with_messages(messages), attempt)
            if not response.content.strip():
                continue
            rejected = validator(response.content)
            if not rejected:
                return response
            violations, content = rejected, response.content
            logger.info(f"[{request.tag}] response rejected on attempt {attempt}: {len(rejected)} violation(s)")
            messages += [
                ChatMessage(role="assistant", content=response.content),
                ChatMessage(role="user", content=fix_instruction(rejected)),
            ]
        if content is None:
            raise ProviderExhausted(f"[{request.tag}] no non-empty response after {self.max_attempts} attempts")
        raise ValidationExhausted(violations, content)


class OpenAIProvider(ChatProvider):
    """OpenAI-style chat-completions backend (OpenAI, OpenRouter, vLLM, ...)."""

    def __init__(self, settings: ProviderSettings, audit: Optional[AuditLog] = None, api_key: Optional[str] = None):
        super().__init__(settings, audit)
        api_key = api_key or MINDSKILL_API_KEY
        if not api_key:
            raise TransportError("MINDSKILL_API_KEY is not set")
        # retries are ours, not the SDK's
        self.client = openai.OpenAI(api_key=api_key, base_url=settings.base_url or None, max_retries=0)
        logger.info(f"Using chat backend at {settings.base_url or 'default OpenAI endpoint'}")

    def _send(self, request: ChatRequest) -> ChatResponse:
        kwargs = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.provider_hint:
            kwargs["extra_body"] = {"provider": {"order": [request.provider_hint], "allow_fallbacks": False}}

        try:
            completion = self.client.chat.completions.create(**kwargs)
        except (openai.RateLimitError, openai.APIConnectionError, openai.InternalServerError) as e:
            logger.warning(f"[{request.tag}] retryable backend error: {type(e).__name__}")
            return ChatResponse(content="", finish_reason="error")
        except openai.APIStatusError as e:
            if e.status_code >= 500:
                logger.warning(f"[{request.tag}] backend returned {e.status_code}")
                return ChatResponse(content="", finish_reason="error")
            raise TransportError(f"[{request.tag}] backend rejected the request ({e.status_code}): {e.message}")
        except openai.OpenAIError as e:
            raise TransportError(f"[{request.tag}] backend failure: {e}")

        if not completion.choices:
            return ChatResponse(content="", finish_reason="empty")
        choice = completion.choices[0]
        usage = {}
        if completion.usage is not None:
            usage = {
                "prompt_tokens": completion.usage.prompt_tokens or 0,
                "completion_tokens": completion.usage.completion_tokens or 0,
            }
        return ChatResponse(content=choice.message.content or "", finish_reason=choice.finish_reason or "stop", usage=usage)


class ScriptEntry:
    def __init__(self, matcher: Matcher, response: ScriptedResponse, repeat: bool = False):
        self.matcher = matcher
        self.response = response
        self.repeat = repeat
        self.consumed = False

    def available(self, request: ChatRequest) -> bool:
        return (self.repeat or not self.consumed) and self.matcher(request)


class ScriptedProvider(ChatProvider):
    """Deterministic provider: each call consumes the first unconsumed matching entry.

    Entries are ``(matcher, response)`` or ``(matcher, response, repeat)``;
    a response may be a callable receiving the request.
    """

    def __init__(self, script: Sequence[Tuple], settings: Optional[ProviderSettings] = None, audit: Optional[AuditLog] = None):
        settings = (settings or ProviderSettings(backend="scripted")).model_copy(update={"retry_backoff": 0})
        super().__init__(settings, audit)
        self._lock = threading.Lock()
        self.entries: List[ScriptEntry] = []
        self.extend(script)

    def extend(self, script: Sequence[Tuple]) -> None:
        with self._lock:
            self.entries.extend(ScriptEntry(*entry) for entry in script)

    def remaining(self) -> int:
        return sum(1 for entry in self.entries if not entry.consumed and not entry.repeat)

    def _send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            for entry in self.entries:
                if entry.available(request):
                    entry.consumed = True
                    response = entry.response
                    break
            else:
                preview = request.messages[-1].content[:80].replace("\n", " ")
                raise ScriptMiss(f"no script entry matches tag={request.tag} (last message: {preview!r})")
        content = response(request) if callable(response) else response
        return ChatResponse(content=content, usage={"prompt_tokens": 0, "completion_tokens": 0})


def match(tag: Optional[str] = None, contains: Optional[str] = None, predicate: Optional[Matcher] = None) -> Matcher:
    """Matcher on request tag and/or a substring of the concatenated messages."""

    def _matches(request: ChatRequest) -> bool:
        if tag is not None and request.tag != tag:
            return False
        if contains is not None and contains not in request.text():
            return False
        if predicate is not None and not predicate(request):
            return False
        return True

    return _matches


def scripted_provider(script: Sequence[Tuple], **kwargs) -> ScriptedProvider:
    return ScriptedProvider(script, **kwargs)


def create_provider(settings: ProviderSettings, audit: Optional[AuditLog] = None) -> ChatProvider:
    if settings.backend == "openai":
        return OpenAIProvider(settings, audit)
    raise ConfigError("the scripted backend has no script outside the demo and the test suite")
