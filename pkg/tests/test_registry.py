"""Card schema validation, the corruption sweep, and lifecycle soundness."""

from __future__ import annotations

import copy
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aigateway.errors import IllegalTransition, NotAuthorized, StaleVersion, ValidationFailed
from aigateway.registry import (
    CARD_SECTIONS,
    LEGAL_TRANSITIONS,
    LIFECYCLE_STATES,
    Provider,
    Registry,
    card_from_dict,
    validate_card,
)

from conftest import PREMIUM_MODEL, card_dict, load_card


def test_premium_fixture_card_is_clean():
    card = load_card(PREMIUM_MODEL)
    assert validate_card(card) == []
    assert card.risk_flags == frozenset({
        "non_eu_hosting", "undisclosed_training_data",
        "hallucination_risk", "premium_cost"})
    assert card.context_window == 200_000
    assert card.max_output == 8_192


def test_all_shipped_cards_are_clean():
    for model_id in ("gpt-4o-eu", "gpt-4o-mini-eu", "mistral-large-eu"):
        assert validate_card(load_card(model_id)) == []


def test_missing_section_is_reported_by_name():
    raw = card_dict(PREMIUM_MODEL)
    del raw["sections"]["sustainability"]
    report = validate_card(card_from_dict(raw))
    assert "missing section: sustainability" in report


def test_empty_section_is_distinct_from_undisclosed():
    raw = card_dict(PREMIUM_MODEL)
    raw["sections"]["training_data"] = "   "
    report = validate_card(card_from_dict(raw))
    assert any(v.startswith("empty section") for v in report)


def test_all_non_eu_regions_demand_the_flag():
    raw = card_dict(PREMIUM_MODEL)
    raw["risk_flags"] = ["undisclosed_training_data", "hallucination_risk", "premium_cost"]
    report = validate_card(card_from_dict(raw))
    assert any("flag/hosting mismatch" in v for v in report)


def test_undisclosed_training_demands_the_flag():
    raw = card_dict(PREMIUM_MODEL)
    raw["risk_flags"] = ["non_eu_hosting", "hallucination_risk", "premium_cost"]
    report = validate_card(card_from_dict(raw))
    assert any("flag/training mismatch" in v for v in report)


def corruptions(raw: dict):
    """Single-field corruptions of a clean card; each must draw a violation."""
    for section in CARD_SECTIONS:  # 12: drop each section
        broken = copy.deepcopy(raw)
        del broken["sections"][section]
        yield f"drop:{section}", broken
    for section in ("training_data", "governance_status"):  # blank a section
        broken = copy.deepcopy(raw)
        broken["sections"][section] = ""
        yield f"blank:{section}", broken
    broken = copy.deepcopy(raw)
    broken["pricing"]["input_rate"] = -1
    yield "pricing:negative", broken
    broken = copy.deepcopy(raw)
    broken["pricing"]["cached_input_rate"] = broken["pricing"]["input_rate"] + 1
    yield "pricing:cached-above-input", broken
    broken = copy.deepcopy(raw)
    broken["pricing"]["cost_tier"] = 6
    yield "pricing:tier", broken
    broken = copy.deepcopy(raw)
    broken["hosting_regions"] = []
    yield "regions:empty", broken
    broken = copy.deepcopy(raw)
    broken["risk_flags"] = []
    yield "flags:cleared", broken
    broken = copy.deepcopy(raw)
    broken["card_version"] = 0
    yield "version:zero", broken
    broken = copy.deepcopy(raw)
    broken["context_window"] = 0
    yield "context:zero", broken
    broken = copy.deepcopy(raw)
    broken["max_output"] = -5
    yield "output:negative", broken
    broken = copy.deepcopy(raw)
    broken["model_id"] = ""
    yield "id:empty", broken
    broken = copy.deepcopy(raw)
    broken["sections"]["bonus_section"] = "surplus"
    yield "section:unknown", broken


def test_corruption_sweep_no_silent_acceptance():
    raw = card_dict(PREMIUM_MODEL)
    cases = list(corruptions(raw))
    assert len(cases) >= 20
    for label, broken in cases:
        report = validate_card(card_from_dict(broken))
        assert report, f"corruption {label} accepted silently"


# -- registration and versions -------------------------------------------------


def make_registry(clock=None) -> Registry:
    registry = Registry(clock=clock)
    registry.add_provider(Provider(
        id="p1", name="P1", adapter_kind="mock", base_endpoint="",
        regions_offered=frozenset({"SE"})))
    return registry


def test_register_fresh_card_enters_proposed():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    assert registry.get(PREMIUM_MODEL).state == "proposed"


def test_equal_version_resubmission_is_stale():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    with pytest.raises(StaleVersion):
        registry.register_card(load_card(PREMIUM_MODEL))


def test_version_history_strictly_increases():
    registry = make_registry()
    raw = card_dict(PREMIUM_MODEL)
    registry.register_card(card_from_dict(raw))
    raw2 = copy.deepcopy(raw)
    raw2["card_version"] = 2
    raw2["sections"]["costs_and_resources"] += " Updated rates."
    registry.register_card(card_from_dict(raw2))
    history = registry.get(PREMIUM_MODEL).card_history
    assert list(history) == sorted(set(history)) == [1, 2]


def test_invalid_card_rejected_at_registration():
    registry = make_registry()
    raw = card_dict(PREMIUM_MODEL)
    del raw["sections"]["sustainability"]
    with pytest.raises(ValidationFailed):
        registry.register_card(card_from_dict(raw))


def test_sections_total_after_acceptance():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    card = registry.get_card(PREMIUM_MODEL)
    for section in CARD_SECTIONS:
        assert card.section(section).strip()


# -- lifecycle -------------------------------------------------------------------


def activate(registry: Registry, model_id: str) -> None:
    registry.transition_lifecycle(model_id, "evaluating", "root", "review")
    registry.transition_lifecycle(model_id, "active", "root", "approved")


def test_legal_path_to_deprecated():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    activate(registry, PREMIUM_MODEL)
    state = registry.transition_lifecycle(PREMIUM_MODEL, "deprecated", "root",
                                          "superseded by a cheaper model")
    assert state.state == "deprecated"


def test_proposed_to_deprecated_is_illegal():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    with pytest.raises(IllegalTransition):
        registry.transition_lifecycle(PREMIUM_MODEL, "deprecated", "root", "nope")


def test_non_admin_cannot_transition():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    with pytest.raises(NotAuthorized):
        registry.transition_lifecycle(PREMIUM_MODEL, "evaluating", "alice", "x",
                                      actor_is_admin=False)


def test_removed_models_vanish_from_listings():
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    registry.transition_lifecycle(PREMIUM_MODEL, "evaluating", "root", "review")
    registry.transition_lifecycle(PREMIUM_MODEL, "removed", "root", "failed review")
    assert registry.listable() == []
    assert not registry.is_invocable(registry.get(PREMIUM_MODEL))


def test_deprecated_grace_window(clock):
    registry = Registry(clock=clock, deprecation_grace_days=7)
    registry.register_card(load_card(PREMIUM_MODEL))
    activate(registry, PREMIUM_MODEL)
    registry.transition_lifecycle(PREMIUM_MODEL, "deprecated", "root", "winding down")
    assert registry.is_invocable(registry.get(PREMIUM_MODEL))
    clock.advance(days=8)
    assert not registry.is_invocable(registry.get(PREMIUM_MODEL))


@settings(max_examples=200, deadline=None)
@given(steps=st.lists(st.sampled_from(LIFECYCLE_STATES), max_size=12))
def test_lifecycle_fuzz_state_stays_on_legal_paths(steps):
    registry = make_registry()
    registry.register_card(load_card(PREMIUM_MODEL))
    state = "proposed"
    for target in steps:
        if target in LEGAL_TRANSITIONS[state]:
            registry.transition_lifecycle(PREMIUM_MODEL, target, "root", "fuzz")
            state = target
        else:
            with pytest.raises(IllegalTransition):
                registry.transition_lifecycle(PREMIUM_MODEL, target, "root", "fuzz")
        assert registry.get(PREMIUM_MODEL).state == state
    # history is a path through the transition table
    history = registry.get(PREMIUM_MODEL).history
    for prev, nxt in zip(history, history[1:]):
        assert nxt.state in LEGAL_TRANSITIONS[prev.state]
