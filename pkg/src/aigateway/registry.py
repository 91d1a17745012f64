"""Model catalog: providers, regions, model cards, and lifecycle state.

The model card is the single source of truth for disclosure, consent,
pricing, and lifecycle decisions. Cards are validated against a fixed
12-section schema before they may enter the catalog; every content change
must bump ``card_version``.

Writes are serialized behind one registry mutex; reads return immutable
snapshots, so handlers may share a Registry freely.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional

from .errors import IllegalTransition, NotAuthorized, StaleVersion, UnknownModel, ValidationFailed

# ISO-3166 alpha-2 codes of the 27 EU member states. Shipped as the default
# jurisdiction table; deployments can override via config.
EU_MEMBER_STATES = frozenset({
    "AT", "BE", "BG", "HR", "CY", "CZ", "DK", "EE", "FI", "FR",
    "DE", "GR", "HU", "IE", "IT", "LV", "LT", "LU", "MT", "NL",
    "PL", "PT", "RO", "SK", "SI", "ES", "SE",
})

EU = "EU"
NON_EU = "NON_EU"

# The 12 card sections, in canonical order. File field names match exactly.
CARD_SECTIONS = (
    "identification",
    "provider_and_hosting",
    "technical_specs",
    "intended_use",
    "limitations_and_risks",
    "training_data",
    "privacy_and_data_handling",
    "compliance_status",
    "costs_and_resources",
    "sustainability",
    "comparable_alternatives",
    "governance_status",
)

# Explicit sentinel: the provider did not say. Distinct from an absent or
# empty section, and auditable as such.
UNDISCLOSED = "UNDISCLOSED"

# Closed-but-extensible set of acknowledgeable risk elements.
RISK_NON_EU_HOSTING = "non_eu_hosting"
RISK_UNDISCLOSED_TRAINING_DATA = "undisclosed_training_data"
RISK_HALLUCINATION = "hallucination_risk"
RISK_PREMIUM_COST = "premium_cost"
KNOWN_RISK_FLAGS = frozenset({
    RISK_NON_EU_HOSTING,
    RISK_UNDISCLOSED_TRAINING_DATA,
    RISK_HALLUCINATION,
    RISK_PREMIUM_COST,
})

ADAPTER_KINDS = ("mock", "generic_http")

LIFECYCLE_STATES = ("proposed", "evaluating", "active", "restricted", "deprecated", "removed")

# Legal lifecycle moves. Anything not listed is rejected.
LEGAL_TRANSITIONS = {
    "proposed": {"evaluating"},
    "evaluating": {"active", "restricted", "removed"},
    "active": {"restricted", "deprecated"},
    "restricted": {"active", "deprecated"},
    "deprecated": {"removed"},
    "removed": set(),
}


def jurisdiction_of(country_code: str, eu_members: frozenset[str] = EU_MEMBER_STATES) -> str:
    return EU if country_code.upper() in eu_members else NON_EU


@dataclass(frozen=True)
class Region:
    country_code: str
    jurisdiction: str

    @classmethod
    def from_country(cls, country_code: str, eu_members: frozenset[str] = EU_MEMBER_STATES) -> "Region":
        cc = country_code.upper()
        return cls(country_code=cc, jurisdiction=jurisdiction_of(cc, eu_members))


@dataclass(frozen=True)
class Provider:
    id: str
    name: str
    adapter_kind: str
    base_endpoint: str
    regions_offered: frozenset[str]  # country codes

    def validate(self) -> list[str]:
        problems = []
        if not self.id:
            problems.append("provider id empty")
        if self.adapter_kind not in ADAPTER_KINDS:
            problems.append(f"provider {self.id}: unknown adapter kind {self.adapter_kind!r}")
        if not self.regions_offered:
            problems.append(f"provider {self.id}: regions_offered empty")
        return problems


@dataclass(frozen=True)
class Pricing:
    """Token rates in micro-currency per 1M tokens; cost_tier is the 1..5 icon count."""

    input_rate: int
    output_rate: int
    cached_input_rate: int
    cost_tier: int

    def validate(self) -> list[str]:
        problems = []
        if min(self.input_rate, self.output_rate, self.cached_input_rate) < 0:
            problems.append("pricing: negative rate")
        if self.cached_input_rate > self.input_rate:
            problems.append("pricing: cached_input_rate exceeds input_rate")
        if not 1 <= self.cost_tier <= 5:
            problems.append(f"pricing: cost_tier {self.cost_tier} outside 1..5")
        return problems


@dataclass(frozen=True)
class ModelCard:
    model_id: str
    version_tag: str
    card_version: int
    sections: dict[str, str]
    pricing: Pricing
    hosting_regions: tuple[Region, ...]  # preference order
    risk_flags: frozenset[str]
    context_window: int
    max_output: int

    def section(self, name: str) -> str:
        return self.sections.get(name, "")

    @property
    def all_regions_non_eu(self) -> bool:
        return bool(self.hosting_regions) and all(r.jurisdiction == NON_EU for r in self.hosting_regions)

    def served_region(self) -> Optional[Region]:
        """Region EU-first selection would pick from this card's preference list."""
        for region in self.hosting_regions:
            if region.jurisdiction == EU:
                return region
        return self.hosting_regions[0] if self.hosting_regions else None


@dataclass(frozen=True)
class LifecycleState:
    state: str
    changed_by: str
    changed_at: datetime
    rationale: str


@dataclass(frozen=True)
class ModelEntry:
    """Everything the registry knows about one model."""

    card: ModelCard
    lifecycle: LifecycleState
    history: tuple[LifecycleState, ...] = ()
    card_history: tuple[int, ...] = ()  # stored card_version sequence, oldest first

    @property
    def state(self) -> str:
        return self.lifecycle.state


@dataclass(frozen=True)
class ModelSummary:
    model_id: str
    name: str
    cost_tier: int
    hosting: str  # jurisdiction of the region that would serve the model
    state: str
    consent_required: bool
    requires_access_request: bool


def validate_card(card: ModelCard) -> list[str]:
    """Return every schema violation; an empty list means admissible."""
    violations: list[str] = []
    if not card.model_id:
        violations.append("model_id empty")
    if card.card_version < 1:
        violations.append(f"card_version {card.card_version} must be >= 1")

    for name in CARD_SECTIONS:
        value = card.sections.get(name)
        if value is None:
            violations.append(f"missing section: {name}")
        elif not str(value).strip():
            violations.append(f"empty section: {name}")
    for name in card.sections:
        if name not in CARD_SECTIONS:
            violations.append(f"unknown section: {name}")

    violations.extend(card.pricing.validate())

    if not card.hosting_regions:
        violations.append("hosting_regions empty")
    if card.all_regions_non_eu and RISK_NON_EU_HOSTING not in card.risk_flags:
        violations.append("flag/hosting mismatch: all regions NON_EU but non_eu_hosting flag absent")
    if card.section("training_data").strip() == UNDISCLOSED and RISK_UNDISCLOSED_TRAINING_DATA not in card.risk_flags:
        violations.append("flag/training mismatch: training_data UNDISCLOSED but undisclosed_training_data flag absent")

    if card.context_window <= 0:
        violations.append(f"context_window {card.context_window} must be positive")
    if card.max_output <= 0:
        violations.append(f"max_output {card.max_output} must be positive")
    return violations


def card_from_dict(raw: dict, eu_members: frozenset[str] = EU_MEMBER_STATES) -> ModelCard:
    """Build a ModelCard from parsed card-file JSON. Field names must match the schema."""
    pricing_raw = raw.get("pricing", {})
    pricing = Pricing(
        input_rate=int(pricing_raw.get("input_rate", -1)),
        output_rate=int(pricing_raw.get("output_rate", -1)),
        cached_input_rate=int(pricing_raw.get("cached_input_rate", -1)),
        cost_tier=int(pricing_raw.get("cost_tier", 0)),
    )
    regions = tuple(Region.from_country(cc, eu_members)
                    for cc in raw.get("hosting_regions", []))
    return ModelCard(
        model_id=str(raw.get("model_id", "")),
        version_tag=str(raw.get("version_tag", "")),
        card_version=int(raw.get("card_version", 0)),
        sections={str(k): str(v) for k, v in raw.get("sections", {}).items()},
        pricing=pricing,
        hosting_regions=regions,
        risk_flags=frozenset(str(f) for f in raw.get("risk_flags", [])),
        context_window=int(raw.get("context_window", 0)),
        max_output=int(raw.get("max_output", 0)),
    )


def card_to_dict(card: ModelCard) -> dict:
    return {
        "model_id": card.model_id,
        "version_tag": card.version_tag,
        "card_version": card.card_version,
        "sections": dict(card.sections),
        "pricing": {
            "input_rate": card.pricing.input_rate,
            "output_rate": card.pricing.output_rate,
            "cached_input_rate": card.pricing.cached_input_rate,
            "cost_tier": card.pricing.cost_tier,
        },
        "hosting_regions": [r.country_code for r in card.hosting_regions],
        "risk_flags": sorted(card.risk_flags),
        "context_window": card.context_window,
        "max_output": card.max_output,
    }


class Registry:
    """In-memory catalog with serialized writes and snapshot reads.

    ``on_card_registered(card, material)`` and ``on_lifecycle(model_id, state)``
    listeners let the consent module invalidate acknowledgments and the audit
    log record transitions without this module importing either.
    """

    def __init__(self, clock: Callable[[], datetime] | None = None,
                 deprecation_grace_days: int = 0):
        self._lock = threading.RLock()
        self._models: dict[str, ModelEntry] = {}
        self._providers: dict[str, Provider] = {}
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self.deprecation_grace_days = deprecation_grace_days
        self.on_card_registered: list[Callable[[ModelCard, bool], None]] = []
        self.on_lifecycle: list[Callable[[str, LifecycleState], None]] = []

    # -- providers ----------------------------------------------------------

    def add_provider(self, provider: Provider) -> None:
        problems = provider.validate()
        if problems:
            raise ValidationFailed(problems)
        with self._lock:
            if provider.id in self._providers:
                raise ValidationFailed([f"provider id {provider.id} already registered"])
            self._providers[provider.id] = provider

    def get_provider(self, provider_id: str) -> Provider:
        provider = self._providers.get(provider_id)
        if provider is None:
            raise UnknownModel(f"unknown provider {provider_id}")
        return provider

    def providers(self) -> list[Provider]:
        return sorted(self._providers.values(), key=lambda p: p.id)

    # -- cards --------------------------------------------------------------

    def register_card(self, card: ModelCard, actor: str = "system", material: bool = True) -> str:
        """Persist a validated card. New models enter state ``proposed``.

        ``material=False`` marks an editorial change (typo fix) that must not
        force re-consent; the consent module receives the flag via listener.
        """
        violations = validate_card(card)
        if violations:
            raise ValidationFailed(violations)
        with self._lock:
            existing = self._models.get(card.model_id)
            if existing is not None:
                if card.card_version <= existing.card.card_version:
                    raise StaleVersion(
                        f"card_version {card.card_version} not above stored "
                        f"{existing.card.card_version} for {card.model_id}")
                updated = replace(
                    existing,
                    card=card,
                    card_history=existing.card_history + (card.card_version,),
                )
                self._models[card.model_id] = updated
            else:
                lifecycle = LifecycleState(
                    state="proposed", changed_by=actor, changed_at=self._clock(),
                    rationale="card registered")
                self._models[card.model_id] = ModelEntry(
                    card=card, lifecycle=lifecycle, history=(lifecycle,),
                    card_history=(card.card_version,))
            for listener in self.on_card_registered:
                listener(card, material)
        return card.model_id

    def get(self, model_id: str) -> ModelEntry:
        entry = self._models.get(model_id)
        if entry is None:
            raise UnknownModel(f"unknown model {model_id}")
        return entry

    def get_card(self, model_id: str) -> ModelCard:
        return self.get(model_id).card

    def models(self) -> list[ModelEntry]:
        return sorted(self._models.values(), key=lambda e: e.card.model_id)

    # -- lifecycle ------------------------------------------------------------

    def transition_lifecycle(self, model_id: str, target_state: str, actor: str,
                             rationale: str, actor_is_admin: bool = True) -> LifecycleState:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not change lifecycle state")
        if target_state not in LIFECYCLE_STATES:
            raise IllegalTransition(f"unknown state {target_state}")
        with self._lock:
            entry = self.get(model_id)
            current = entry.lifecycle.state
            if target_state not in LEGAL_TRANSITIONS[current]:
                raise IllegalTransition(f"{current} -> {target_state} not permitted")
            lifecycle = LifecycleState(
                state=target_state, changed_by=actor, changed_at=self._clock(),
                rationale=rationale)
            self._models[model_id] = replace(
                entry, lifecycle=lifecycle, history=entry.history + (lifecycle,))
            for listener in self.on_lifecycle:
                listener(model_id, lifecycle)
        return lifecycle

    # -- availability -------------------------------------------------------

    def is_invocable(self, entry: ModelEntry) -> bool:
        """active/restricted always; deprecated only inside the grace window."""
        state = entry.state
        if state in ("active", "restricted"):
            return True
        if state == "deprecated" and self.deprecation_grace_days > 0:
            age = self._clock() - entry.lifecycle.changed_at
            return age.days < self.deprecation_grace_days
        return False

    def listable(self) -> list[ModelEntry]:
        return [e for e in self.models() if self.is_invocable(e)]
