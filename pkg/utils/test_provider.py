import itertools
from types import SimpleNamespace

import httpx
import openai
import pytest

from config import ConfigError, ProviderSettings
from services.provider import (
    OpenAIProvider,
    ProviderExhausted,
    ScriptMiss,
    TransportError,
    ValidationExhausted,
    create_provider,
    fix_instruction,
    match,
    scripted_provider,
)


def _reject_bad(text):
    return ["contains the word bad"] if "bad" in text else []


def test_empty_empty_valid_succeeds_on_third_attempt(make_provider, audit):
    provider = make_provider([(match(tag="judge_recon"), ""), (match(tag="judge_recon"), "  "), (match(tag="judge_recon"), "ok")])
    request = provider.build_request("judge_recon", "score this", system="judge")
    response = provider.complete(request)
    assert response.content == "ok"
    entries = audit.for_tag("judge_recon")
    assert [entry.attempt for entry in entries] == [1, 2, 3]
    assert len({entry.request_digest for entry in entries}) == 1


def test_three_empty_responses_exhaust(make_provider):
    provider = make_provider([(match(), "", True)])
    with pytest.raises(ProviderExhausted):
        provider.complete(provider.build_request("gradient", "diagnose"))


def test_invalid_then_valid_appends_assistant_turn_and_fix_instruction(make_provider):
    seen = []

    def respond(request):
        seen.append(request)
        return "bad answer" if len(seen) == 1 else "good answer"

    provider = make_provider([(match(tag="induction"), respond, True)])
    response = provider.complete_validated(provider.build_request("induction", "write it", system="sys"), _reject_bad)
    assert response.content == "good answer"
    second = seen[1].messages
    assert [message.role for message in second] == ["system", "user", "assistant", "user"]
    assert second[2].content == "bad answer"
    assert second[3].content == fix_instruction(["contains the word bad"])
    assert "- contains the word bad" in second[3].content


def test_three_invalid_responses_raise_with_last_content(make_provider, audit):
    provider = make_provider([(match(), "bad 1"), (match(), "bad 2"), (match(), "bad 3")])
    with pytest.raises(ValidationExhausted) as excinfo:
        provider.complete_validated(provider.build_request("retrieval", "pick"), _reject_bad)
    assert excinfo.value.violations == ["contains the word bad"]
    assert excinfo.value.content == "bad 3"
    assert len(audit) == 3


def _budget_outcome(responses):
    """Expected result of one validated call over the first three responses."""
    for response in responses[:3]:
        if response == "good":
            return "good"
    return ValidationExhausted if "bad" in responses[:3] else ProviderExhausted


def test_mixed_empty_and_invalid_share_one_budget(make_provider, audit):
    responses = ["", "", "bad", "", "", "bad", "", "", "good"]
    provider = make_provider([(match(), response) for response in responses])
    with pytest.raises(ProviderExhausted):
        provider.complete_validated(provider.build_request("judge_rubric", "grade"), _reject_bad)
    assert [entry.attempt for entry in audit.entries] == [1, 2, 3]
    assert provider.remaining() == 6


@pytest.mark.parametrize("responses", list(itertools.product(["", "bad", "good"], repeat=3)))
def test_validated_call_never_exceeds_three_attempts(make_provider, audit, responses):
    responses = list(responses) + ["good", "good", "good"]
    provider = make_provider([(match(), response) for response in responses])
    expected = _budget_outcome(responses)
    if expected == "good":
        assert provider.complete_validated(provider.build_request("optimizer", "improve"), _reject_bad).content == "good"
    else:
        with pytest.raises(expected):
            provider.complete_validated(provider.build_request("optimizer", "improve"), _reject_bad)
    assert 1 <= len(audit) <= 3
    assert [entry.attempt for entry in audit.entries] == list(range(1, len(audit) + 1))


def test_empty_retry_repeats_messages_after_a_fix_turn(make_provider, audit):
    seen = []

    def respond(request):
        seen.append(len(request.messages))
        return ["bad", "", "good"][len(seen) - 1]

    provider = make_provider([(match(), respond, True)])
    assert provider.complete_validated(provider.build_request("induction", "write"), _reject_bad).content == "good"
    assert seen == [1, 3, 3]


def test_script_order_and_miss(make_provider):
    provider = make_provider([
        (match(tag="gradient", contains="alpha"), "first"),
        (match(tag="gradient"), "second"),
        (match(tag="gradient"), "fallback", True),
    ])
    assert provider.complete(provider.build_request("gradient", "alpha")).content == "first"
    assert provider.complete(provider.build_request("gradient", "alpha")).content == "second"
    assert provider.complete(provider.build_request("gradient", "alpha")).content == "fallback"
    assert provider.complete(provider.build_request("gradient", "beta")).content == "fallback"
    assert provider.remaining() == 0
    with pytest.raises(ScriptMiss):
        provider.complete(provider.build_request("optimizer", "anything"))


SCRIPT_ENTRIES = (
    ("alpha-recon", "judge_recon", "alpha"),
    ("any-recon", "judge_recon", None),
    ("retrieval", "retrieval", None),
)
CALLS = (("judge_recon", "alpha"), ("judge_recon", "beta"), ("retrieval", "pick"))


def _expected_consumption(script_order, call_order):
    """Walk the calls by hand: each takes the first unused entry whose tag and substring fit."""
    used, answers = set(), []
    for tag, text in call_order:
        hit = next(
            (name for name, entry_tag, needle in script_order
             if name not in used and entry_tag == tag and (needle is None or needle in text)),
            None,
        )
        answers.append(hit)
        if hit is None:
            break
        used.add(hit)
    return answers


@pytest.mark.parametrize("script_order", list(itertools.permutations(SCRIPT_ENTRIES)))
@pytest.mark.parametrize("call_order", list(itertools.permutations(CALLS)))
def test_every_interleaving_consumes_in_issue_order(make_provider, script_order, call_order):
    provider = make_provider([(match(tag=tag, contains=needle), name) for name, tag, needle in script_order])
    for (tag, text), expected in zip(call_order, _expected_consumption(script_order, call_order)):
        if expected is None:
            with pytest.raises(ScriptMiss):
                provider.complete(provider.build_request(tag, text))
            return
        assert provider.complete(provider.build_request(tag, text)).content == expected
    assert provider.remaining() == 0
    with pytest.raises(ScriptMiss):
        provider.complete(provider.build_request(*call_order[0]))


def test_scripted_provider_calls_response_functions():
    provider = scripted_provider([(match(tag="retrieval"), lambda request: request.messages[-1].content.upper(), True)])
    assert provider.complete(provider.build_request("retrieval", "pick two")).content == "PICK TWO"
    assert provider.complete(provider.build_request("retrieval", "again")).content == "AGAIN"
    assert provider.remaining() == 0


def test_build_request_uses_per_tag_settings(make_provider):
    provider = make_provider()
    provider.settings = ProviderSettings(
        backend="scripted", models={"induction": "big-model"}, temperatures={"induction": 0.7}, provider_hint="pinned"
    )
    request = provider.build_request("induction", "u", system="s")
    assert request.model_id == "big-model"
    assert request.temperature == 0.7
    assert request.provider_hint == "pinned"
    assert provider.build_request("judge_rubric", "u").temperature == 0.0


def test_audit_dump_has_public_fields_only(make_provider, audit, tmp_path):
    provider = make_provider([(match(), "hello")])
    provider.complete(provider.build_request("retrieval", "secret request body", system="sys"))
    path = audit.dump(tmp_path / "audit.jsonl")
    text = path.read_text(encoding="utf-8")
    assert "secret request body" not in text
    assert '"tag": "retrieval"' in text


def test_create_provider_refuses_scripted_backend():
    with pytest.raises(ConfigError):
        create_provider(ProviderSettings(backend="scripted"))


# ---------------------------------------------------------------- OpenAI-style backend

class _FakeCompletions:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def create(self, **kwargs):
        self.calls.append(kwargs)
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        message = SimpleNamespace(content=outcome)
        return SimpleNamespace(
            choices=[SimpleNamespace(message=message, finish_reason="stop")],
            usage=SimpleNamespace(prompt_tokens=3, completion_tokens=1),
        )


def _openai_provider(outcomes, **settings):
    provider = OpenAIProvider(ProviderSettings(retry_backoff=0, **settings), api_key="sk-test-not-a-real-key-000000")
    completions = _FakeCompletions(outcomes)
    provider.client = SimpleNamespace(chat=SimpleNamespace(completions=completions))
    return provider, completions


def test_provider_pinning_goes_into_extra_body():
    provider, completions = _openai_provider(["hi"], provider_hint="deepinfra")
    assert provider.complete(provider.build_request("deduction", "go")).content == "hi"
    assert completions.calls[0]["extra_body"] == {"provider": {"order": ["deepinfra"], "allow_fallbacks": False}}


def test_no_extra_body_without_hint():
    provider, completions = _openai_provider(["hi"])
    provider.complete(provider.build_request("deduction", "go"))
    assert "extra_body" not in completions.calls[0]


def test_connection_errors_count_as_empty_responses():
    request = httpx.Request("POST", "http://localhost/v1/chat/completions")
    provider, completions = _openai_provider([openai.APIConnectionError(request=request), "recovered"])
    assert provider.complete(provider.build_request("gradient", "go")).content == "recovered"
    assert len(completions.calls) == 2


def test_auth_errors_are_not_retried():
    request = httpx.Request("POST", "http://localhost/v1/chat/completions")
    error = openai.AuthenticationError("bad key", response=httpx.Response(401, request=request), body=None)
    provider, completions = _openai_provider([error, "never"])
    with pytest.raises(TransportError):
        provider.complete(provider.build_request("gradient", "go"))
    assert len(completions.calls) == 1


def test_missing_api_key(monkeypatch):
    monkeypatch.setattr("services.provider.MINDSKILL_API_KEY", None)
    with pytest.raises(TransportError):
        OpenAIProvider(ProviderSettings())
