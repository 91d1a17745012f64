"""Shared fixtures: the sample catalog, an in-memory gateway, a fake clock."""

from __future__ import annotations

import json
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from aigateway.config import build_gateway, parse_config
from aigateway.registry import ModelCard, card_from_dict

REPO_ROOT = Path(__file__).resolve().parent.parent
CARD_DIR = REPO_ROOT / "config" / "cards"

PREMIUM_MODEL = "claude-sonnet-4-5"
BASELINE_MODEL = "gpt-4o-mini-eu"


class FakeClock:
    def __init__(self, start: datetime | None = None):
        self.now = start or datetime(2026, 8, 10, 12, 0, tzinfo=timezone.utc)

    def __call__(self) -> datetime:
        return self.now

    def advance(self, **kwargs) -> None:
        self.now += timedelta(**kwargs)


def load_card(model_id: str) -> ModelCard:
    raw = json.loads((CARD_DIR / f"{model_id}.json").read_text(encoding="utf-8"))
    return card_from_dict(raw)


def card_dict(model_id: str) -> dict:
    return json.loads((CARD_DIR / f"{model_id}.json").read_text(encoding="utf-8"))


def base_config_dict(**overrides) -> dict:
    raw = {
        "listen": "127.0.0.1:0",
        "data_dir": "data",
        "card_dir": str(CARD_DIR),
        "providers": [
            {"id": "azure-eu", "name": "Azure EU", "adapter_kind": "mock",
             "regions": ["SE", "DE"]},
            {"id": "anthropic-direct", "name": "Anthropic US", "adapter_kind": "mock",
             "regions": ["US"]},
        ],
        "routes": {
            "gpt-4o-mini-eu": [{"provider": "azure-eu", "region": "SE"}],
            "gpt-4o-eu": [{"provider": "azure-eu", "region": "SE"}],
            "mistral-large-eu": [{"provider": "azure-eu", "region": "DE"}],
            "claude-sonnet-4-5": [{"provider": "anthropic-direct", "region": "US"}],
        },
        "scopes": [
            {"id": "platform", "kind": "platform_monthly", "cap": "500.00", "period": "monthly"},
            {"id": "model-claude", "kind": "model", "cap": "200.00", "period": "monthly",
             "parent": "platform"},
            {"id": "user-alice", "kind": "user", "cap": "10.00", "period": "monthly",
             "parent": "platform"},
            {"id": "user-bob", "kind": "user", "cap": "10.00", "period": "monthly",
             "parent": "platform"},
            {"id": "user-carol", "kind": "user", "cap": "10.00", "period": "monthly",
             "parent": "platform"},
            {"id": "ops", "kind": "project", "cap": "50.00", "period": "monthly",
             "parent": "platform"},
        ],
        "model_scopes": {"claude-sonnet-4-5": "model-claude"},
        "principals": [
            {"id": "alice", "groups": ["students"], "roles": ["user"]},
            {"id": "bob", "groups": ["students"], "roles": ["user"]},
            {"id": "carol", "groups": ["faculty", "research-nlp"],
             "roles": ["user", "faculty"]},
            {"id": "root", "groups": ["platform-admins"], "roles": ["user", "admin"]},
        ],
        "baseline_entitlements": [
            {"group_id": "research-nlp", "model_id": "claude-sonnet-4-5"},
        ],
        "initial_lifecycle": {
            "gpt-4o-mini-eu": "active",
            "gpt-4o-eu": "active",
            "mistral-large-eu": "active",
            "claude-sonnet-4-5": "restricted",
        },
        "baseline_pricing": {
            "input_rate": 150000, "output_rate": 600000,
            "cached_input_rate": 75000, "cost_tier": 1,
        },
    }
    raw.update(overrides)
    return raw


def make_gateway(clock=None, **overrides):
    config = parse_config(base_config_dict(**overrides), base_dir=REPO_ROOT / "config")
    return build_gateway(config, in_memory=True, clock=clock)


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def gateway(clock):
    return make_gateway(clock=clock)


@pytest.fixture
def premium_card() -> ModelCard:
    return load_card(PREMIUM_MODEL)


def issue_user_key(gateway, principal_id: str, scope: str | None = None,
                   models=None) -> str:
    _, secret = gateway.issue_key(
        principal_id, models, scope or f"user-{principal_id}",
        expires_at=None, actor="root")
    return secret


def entitle_and_consent(gateway, principal_id: str, model_id: str) -> None:
    """Shortcut to a fully authorized principal for the premium fixture model."""
    from aigateway.policy import singleton_group
    from aigateway.errors import Duplicate

    try:
        gateway.grant_entitlement(singleton_group(principal_id), model_id, actor="root")
    except Duplicate:
        pass
    config = gateway.consent.config_for(model_id)
    if config.required_elements:
        gateway.grant_consent(principal_id, model_id, config.card_version,
                              [e.id for e in config.required_elements])
