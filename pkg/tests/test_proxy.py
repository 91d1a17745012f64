"""The request pipeline end to end: gating, metering, settlement, evidence."""

from __future__ import annotations

import json
from datetime import timedelta

import pytest

from aigateway.adapters import GenericHttpAdapter, MockAdapter, estimate_tokens
from aigateway.budget import estimate_cost, parse_amount
from aigateway.errors import (
    AccessDenied,
    BudgetExceeded,
    ConsentRequired,
    InvalidKey,
    ModelUnavailable,
    UnknownKey,
    UpstreamError,
)
from aigateway.proxy import ChatRequest, ChatResult

from conftest import PREMIUM_MODEL, entitle_and_consent, issue_user_key

BASELINE = "gpt-4o-mini-eu"


def chat(gateway, secret, model=BASELINE, content="hello there", **kwargs):
    return gateway.handle_chat(secret, ChatRequest(
        model_id=model, messages=[{"role": "user", "content": content}], **kwargs))


def test_happy_path_settles_and_records(gateway):
    secret = issue_user_key(gateway, "alice")
    result = chat(gateway, secret)
    assert isinstance(result, ChatResult)
    event = result.usage_event
    assert event.outcome == "ok"
    assert event.cost > 0
    assert event.region == "SE"
    assert gateway.ledger.utilization("user-alice")["settled"] == event.cost
    assert gateway.ledger.utilization("user-alice")["held"] == 0
    assert result.response["gateway"]["region"] == "SE"
    assert result.response["gateway"]["cost"] == event.cost


def test_invalid_key_emits_event_and_401_class_error(gateway):
    with pytest.raises(InvalidKey):
        chat(gateway, "gw-bogus-secret")
    events = gateway.usage_log.events()
    assert len(events) == 1
    assert events[0].outcome == "access_denied"
    assert events[0].principal_id is None
    assert events[0].cost == 0


def test_unknown_model_is_model_unavailable(gateway):
    secret = issue_user_key(gateway, "alice")
    with pytest.raises(ModelUnavailable):
        chat(gateway, secret, model="gpt-9000")
    assert gateway.usage_log.events()[-1].outcome == "access_denied"


def test_restricted_model_without_entitlement_denied_before_upstream(gateway):
    mock = MockAdapter()
    gateway.set_adapter("anthropic-direct", mock)
    secret = issue_user_key(gateway, "alice")
    with pytest.raises(AccessDenied):
        chat(gateway, secret, model=PREMIUM_MODEL)
    assert mock.calls == 0
    assert gateway.usage_log.events()[-1].outcome == "access_denied"


def test_consent_gate_blocks_with_exact_missing_set(gateway):
    mock = MockAdapter()
    gateway.set_adapter("anthropic-direct", mock)
    gateway.grant_entitlement("students", PREMIUM_MODEL, actor="root")
    secret = issue_user_key(gateway, "alice")
    with pytest.raises(ConsentRequired) as exc:
        chat(gateway, secret, model=PREMIUM_MODEL)
    assert exc.value.missing == ["non_eu_hosting", "undisclosed_training_data",
                                 "hallucination_risk", "premium_cost"]
    assert mock.calls == 0
    assert gateway.usage_log.events()[-1].outcome == "consent_denied"


def test_revocation_blocks_next_call_with_zero_upstream(gateway):
    mock = MockAdapter(script={"input_tokens": 10, "output_tokens": 10})
    gateway.set_adapter("anthropic-direct", mock)
    entitle_and_consent(gateway, "carol", PREMIUM_MODEL)
    secret = issue_user_key(gateway, "carol")
    chat(gateway, secret, model=PREMIUM_MODEL)
    assert mock.calls == 1

    gateway.revoke_consent("carol", PREMIUM_MODEL)
    with pytest.raises(ConsentRequired):
        chat(gateway, secret, model=PREMIUM_MODEL)
    assert mock.calls == 1  # no further upstream call
    assert gateway.usage_log.events()[-1].outcome == "consent_denied"


def test_budget_denial_costs_nothing(gateway):
    secret = issue_user_key(gateway, "alice")
    # estimate uses the full max_output bound; a tiny cap denies immediately
    gateway.ledger.get_scope("user-alice").cap = 1
    with pytest.raises(BudgetExceeded):
        chat(gateway, secret)
    event = gateway.usage_log.events()[-1]
    assert event.outcome == "budget_denied"
    assert event.cost == 0
    assert gateway.ledger.entries() == []


def test_upstream_failure_releases_hold_ledger_unchanged(gateway):
    gateway.set_adapter("azure-eu", MockAdapter(fail_with=UpstreamError("boom", status=500)))
    secret = issue_user_key(gateway, "alice")
    with pytest.raises(UpstreamError):
        chat(gateway, secret)
    assert gateway.usage_log.events()[-1].outcome == "upstream_error"
    assert gateway.ledger.entries() == []
    assert gateway.ledger.utilization("user-alice")["held"] == 0
    # scope is untouched: the next request is admitted
    gateway.set_adapter("azure-eu", MockAdapter())
    assert chat(gateway, secret).usage_event.outcome == "ok"


def test_scripted_mock_usage_flows_to_event_and_cost(gateway):
    gateway.set_adapter("azure-eu", MockAdapter(
        script={"input_tokens": 100, "output_tokens": 500, "cached_tokens": 0}))
    secret = issue_user_key(gateway, "alice")
    result = chat(gateway, secret)
    event = result.usage_event
    assert (event.input_tokens, event.output_tokens, event.cached_tokens) == (100, 500, 0)
    card = gateway.registry.get_card(BASELINE)
    assert event.cost == estimate_cost(card.pricing, 100, 500, 0)


def test_streaming_chunks_arrive_in_order_then_settle(gateway):
    gateway.set_adapter("azure-eu", MockAdapter(
        script={"content": "alpha beta gamma delta epsilon zeta"}, chunk_count=6))
    secret = issue_user_key(gateway, "alice")
    stream = chat(gateway, secret, stream=True)
    received = list(stream.chunks)
    assert len(received) == 6
    assert "".join(received) == "alpha beta gamma delta epsilon zeta"
    assert stream.usage_event is not None
    assert stream.usage_event.outcome == "ok"
    assert stream.metadata["model_id"] == BASELINE
    assert gateway.ledger.utilization("user-alice")["settled"] == stream.usage_event.cost


def test_stream_abandoned_by_client_still_settles(gateway):
    gateway.set_adapter("azure-eu", MockAdapter(
        script={"content": "one two three four"}, chunk_count=4))
    secret = issue_user_key(gateway, "alice")
    stream = chat(gateway, secret, stream=True)
    iterator = stream.chunks
    next(iterator)
    iterator.close()  # client disconnect
    event = stream.usage_event
    assert event is not None and event.outcome == "ok"
    assert event.estimated
    assert gateway.ledger.utilization("user-alice")["held"] == 0


def test_pipeline_audit_ordering_by_correlation_id(gateway):
    secret = issue_user_key(gateway, "alice")
    result = chat(gateway, secret)
    correlation_id = result.usage_event.correlation_id
    actions = [e.action for e in gateway.audit.query(correlation_id=correlation_id)]
    assert actions == ["decision_rendered", "reservation", "settlement"]
    decision = gateway.audit.query(correlation_id=correlation_id,
                                   action="decision_rendered")[0]
    assert decision.details["verdict"] == "allow"
    assert decision.details["card_version"] == 1


def test_one_event_per_request_across_outcomes(gateway):
    gateway.set_adapter("anthropic-direct", MockAdapter())
    secret = issue_user_key(gateway, "alice")
    attempts = 0
    for _ in range(3):
        chat(gateway, secret)
        attempts += 1
    for model in ("gpt-9000", PREMIUM_MODEL):
        with pytest.raises(Exception):
            chat(gateway, secret, model=model)
        attempts += 1
    with pytest.raises(InvalidKey):
        chat(gateway, "nope")
    attempts += 1
    assert len(gateway.usage_log.events()) == attempts


def test_no_spend_on_denial_events(gateway):
    gateway.set_adapter("anthropic-direct", MockAdapter())
    secret = issue_user_key(gateway, "alice")
    with pytest.raises(AccessDenied):
        chat(gateway, secret, model=PREMIUM_MODEL)
    gateway.ledger.get_scope("user-alice").cap = 1
    with pytest.raises(BudgetExceeded):
        chat(gateway, secret)
    for event in gateway.usage_log.events():
        if event.outcome in ("budget_denied", "consent_denied", "access_denied"):
            assert event.cost == 0
    assert gateway.ledger.entries() == []


def test_sentinel_prompts_never_reach_persisted_artifacts(gateway):
    sentinel = "SENTINEL-9f8e7d6c5b4a"
    secret = issue_user_key(gateway, "carol", scope="user-carol")
    chat(gateway, secret, content=f"please summarize {sentinel} for me")
    with pytest.raises(ConsentRequired):
        # carol is entitled to the premium model but has not consented
        chat(gateway, secret, model=PREMIUM_MODEL, content=f"again: {sentinel}")

    haystacks = [json.dumps([e.to_json() for e in gateway.usage_log.events()]),
                 json.dumps([e.to_json() for e in gateway.audit.events()])]
    for haystack in haystacks:
        assert sentinel not in haystack


def test_usage_log_rotates_by_size(tmp_path, gateway):
    from aigateway.proxy import UsageLog

    log = UsageLog(tmp_path / "usage.jsonl", max_bytes=600)
    gateway.usage_log = log
    secret = issue_user_key(gateway, "alice")
    for _ in range(6):
        chat(gateway, secret)
    files = sorted(tmp_path.glob("usage*.jsonl"))
    assert len(files) >= 2, "no rotation happened"
    total_lines = sum(len(p.read_text().splitlines()) for p in files)
    assert total_lines == 6


# -- scoped keys --------------------------------------------------------------


def test_key_record_has_no_secret_material(gateway):
    key, secret = gateway.issue_key("alice", None, "user-alice", None, actor="root")
    public = key.to_public_dict()
    assert secret not in json.dumps(public)
    assert "secret" not in public
    assert gateway.keys.authenticate(secret).key_id == key.key_id


def test_expired_key_authenticates_as_invalid(gateway, clock):
    key, secret = gateway.issue_key(
        "alice", None, "user-alice",
        expires_at=clock.now + timedelta(hours=1), actor="root")
    assert gateway.keys.authenticate(secret).key_id == key.key_id
    clock.advance(hours=2)
    with pytest.raises(InvalidKey):
        gateway.keys.authenticate(secret)


def test_revoke_key_then_call_fails_and_revoke_is_idempotent(gateway):
    key, secret = gateway.issue_key("alice", None, "user-alice", None, actor="root")
    gateway.revoke_key(key.key_id, actor="root")
    with pytest.raises(InvalidKey):
        chat(gateway, secret)
    gateway.revoke_key(key.key_id, actor="root")  # idempotent
    with pytest.raises(UnknownKey):
        gateway.revoke_key("key-999999", actor="root")


def test_key_model_scoping_enforced(gateway):
    _, secret = gateway.issue_key("alice", ["gpt-4o-eu"], "user-alice", None,
                                  actor="root")
    assert chat(gateway, secret, model="gpt-4o-eu").usage_event.outcome == "ok"
    with pytest.raises(AccessDenied):
        chat(gateway, secret, model=BASELINE)


def test_eu_confined_key_cannot_reach_us_route(gateway):
    entitle_and_consent(gateway, "carol", PREMIUM_MODEL)
    _, secret = gateway.issue_key("carol", None, "user-carol", None, actor="root",
                                  routing_constraint="EU")
    gateway.set_adapter("anthropic-direct", MockAdapter())
    with pytest.raises(AccessDenied):
        chat(gateway, secret, model=PREMIUM_MODEL)
    assert chat(gateway, secret, model=BASELINE).usage_event.outcome == "ok"


# -- generic HTTP adapter ------------------------------------------------------


from stub_upstream import StubUpstream  # noqa: E402


GOLDEN_CONTENT = "Zürich → naïve résumé — tabs\tand \U0001F30D emoji, bytes must match"


def test_generic_http_unary_passthrough_is_byte_identical(gateway):
    with StubUpstream(content=GOLDEN_CONTENT) as stub:
        gateway.set_adapter("azure-eu", GenericHttpAdapter(stub.base_url))
        secret = issue_user_key(gateway, "alice")
        result = chat(gateway, secret)
        got = result.response["choices"][0]["message"]["content"]
        assert got.encode("utf-8") == GOLDEN_CONTENT.encode("utf-8")
        event = result.usage_event
        assert (event.input_tokens, event.output_tokens) == (100, 500)
        assert not event.estimated


def test_generic_http_streaming_relays_chunks_in_order(gateway):
    chunks = ["first ", "second ", "third ", "fourth"]
    with StubUpstream(chunks=chunks) as stub:
        gateway.set_adapter("azure-eu", GenericHttpAdapter(stub.base_url))
        secret = issue_user_key(gateway, "alice")
        stream = chat(gateway, secret, stream=True)
        assert list(stream.chunks) == chunks
        assert stream.usage_event.outcome == "ok"
        assert not stream.usage_event.estimated


def test_generic_http_missing_usage_falls_back_to_estimator(gateway):
    with StubUpstream(content="four plain words here", omit_usage=True) as stub:
        gateway.set_adapter("azure-eu", GenericHttpAdapter(stub.base_url))
        secret = issue_user_key(gateway, "alice")
        result = chat(gateway, secret, content="two words")
        event = result.usage_event
        assert event.estimated
        assert event.output_tokens == estimate_tokens("four plain words here")


def test_generic_http_upstream_error_passthrough_code(gateway):
    with StubUpstream(status=503) as stub:
        gateway.set_adapter("azure-eu", GenericHttpAdapter(stub.base_url))
        secret = issue_user_key(gateway, "alice")
        with pytest.raises(UpstreamError) as exc:
            chat(gateway, secret)
        assert exc.value.status == 503
    assert gateway.ledger.entries() == []
