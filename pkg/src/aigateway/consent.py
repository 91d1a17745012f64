"""Consent gating: requirement derivation, disclosure, grants, revocation.

Requirements are derived from the model card, never stored by hand:
non-EU processing, undisclosed training data, hallucination risk, and a
pricing premium each map to one acknowledgeable element. A model needs a
consent modal iff its derived element list is non-empty, and the gateway
refuses invocation until every element is acknowledged at the card's
current material version.

Grants and material-version bumps serialize on one lock, so a grant racing
a bump either fails with StaleCardVersion or lands at the new version —
never a valid record at the old version created after the bump.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional

from .budget import micro_to_display
from .errors import IncompleteAcknowledgment, NothingToRevoke, StaleCardVersion, UnknownModel
from .registry import (
    EU,
    RISK_HALLUCINATION,
    RISK_NON_EU_HOSTING,
    RISK_PREMIUM_COST,
    RISK_UNDISCLOSED_TRAINING_DATA,
    UNDISCLOSED,
    ModelCard,
    Pricing,
    Registry,
)


@dataclass(frozen=True)
class RiskElement:
    id: str
    statement: str
    derived_from: str  # card section the element is grounded in


# Default checkbox statements. Deployments may override wording via config;
# ids are the stable contract.
DEFAULT_RISK_ELEMENTS = {
    RISK_NON_EU_HOSTING: RiskElement(
        id=RISK_NON_EU_HOSTING,
        statement=("I understand my prompts and this model's responses are "
                   "processed in datacenters outside the EU, under non-EU law."),
        derived_from="provider_and_hosting"),
    RISK_UNDISCLOSED_TRAINING_DATA: RiskElement(
        id=RISK_UNDISCLOSED_TRAINING_DATA,
        statement=("I understand the provider has not disclosed this model's "
                   "training data, so bias sources and content suitability "
                   "cannot be independently verified."),
        derived_from="training_data"),
    RISK_HALLUCINATION: RiskElement(
        id=RISK_HALLUCINATION,
        statement=("I understand this model can produce confident but "
                   "incorrect output and I will verify critical facts myself."),
        derived_from="limitations_and_risks"),
    RISK_PREMIUM_COST: RiskElement(
        id=RISK_PREMIUM_COST,
        statement=("I understand this model costs several times the baseline "
                   "alternatives and I have considered whether a cheaper "
                   "model would serve my need."),
        derived_from="costs_and_resources"),
}

# Fixed modal ordering: geography, data opacity, reliability, cost.
ELEMENT_ORDER = (
    RISK_NON_EU_HOSTING,
    RISK_UNDISCLOSED_TRAINING_DATA,
    RISK_HALLUCINATION,
    RISK_PREMIUM_COST,
)

_LIMITATIONS_PREVIEW_CHARS = 280


@dataclass(frozen=True)
class UniversalDisclosure:
    geography: str
    key_limitations: str
    cost_note: Optional[str]


@dataclass(frozen=True)
class ConsentConfig:
    model_id: str
    card_version: int
    universal_disclosure: UniversalDisclosure
    required_elements: tuple[RiskElement, ...]

    @property
    def modal_required(self) -> bool:
        return bool(self.required_elements)


@dataclass(frozen=True)
class ConsentRecord:
    principal_id: str
    model_id: str
    card_version: int
    acknowledged: frozenset[str]
    granted_at: datetime
    revoked_at: Optional[datetime] = None

    @property
    def revoked(self) -> bool:
        return self.revoked_at is not None


def blended_rate(pricing: Pricing) -> float:
    """Mean of input and output rates; the premium comparison basis."""
    return (pricing.input_rate + pricing.output_rate) / 2


def derive_consent_config(card: ModelCard, baseline_pricing: Pricing,
                          premium_multiplier: float = 5.0,
                          elements: dict[str, RiskElement] | None = None) -> ConsentConfig:
    """Compute the card's required acknowledgments and universal disclosure."""
    elements = elements or DEFAULT_RISK_ELEMENTS
    required: list[RiskElement] = []

    served = card.served_region()
    non_eu_served = served is not None and served.jurisdiction != EU
    if non_eu_served or card.all_regions_non_eu:
        required.append(elements[RISK_NON_EU_HOSTING])
    if card.section("training_data").strip() == UNDISCLOSED:
        required.append(elements[RISK_UNDISCLOSED_TRAINING_DATA])
    if RISK_HALLUCINATION in card.risk_flags:
        required.append(elements[RISK_HALLUCINATION])

    base = blended_rate(baseline_pricing)
    premium = base > 0 and blended_rate(card.pricing) > premium_multiplier * base
    if premium:
        required.append(elements[RISK_PREMIUM_COST])

    required.sort(key=lambda e: ELEMENT_ORDER.index(e.id) if e.id in ELEMENT_ORDER else len(ELEMENT_ORDER))

    if served is None:
        geography = "Hosting region undetermined."
    elif served.jurisdiction == EU:
        geography = f"Requests are processed in {served.country_code} (EU jurisdiction)."
    else:
        geography = (f"Requests are processed in {served.country_code}, "
                     "outside EU jurisdiction.")
    limitations = card.section("limitations_and_risks").strip()
    if len(limitations) > _LIMITATIONS_PREVIEW_CHARS:
        limitations = limitations[:_LIMITATIONS_PREVIEW_CHARS - 1] + "…"
    cost_note = None
    if premium:
        multiple = blended_rate(card.pricing) / base
        cost_note = (f"Rates are {multiple:.1f}x the baseline model "
                     f"(about {micro_to_display(card.pricing.output_rate)} per 1M output tokens).")

    return ConsentConfig(
        model_id=card.model_id,
        card_version=card.card_version,
        universal_disclosure=UniversalDisclosure(
            geography=geography, key_limitations=limitations, cost_note=cost_note),
        required_elements=tuple(required),
    )


@dataclass(frozen=True)
class DisclosurePayload:
    model_id: str
    card_version: int
    universal: UniversalDisclosure
    missing_elements: tuple[RiskElement, ...]
    card_ref: str

    @property
    def none_needed(self) -> bool:
        return not self.missing_elements


class ConsentService:
    """Per-(principal, model) acknowledgment store with material-version tracking."""

    def __init__(self, registry: Registry, baseline_pricing: Pricing,
                 premium_multiplier: float = 5.0,
                 clock: Callable[[], datetime] | None = None,
                 elements: dict[str, RiskElement] | None = None):
        self._registry = registry
        self._baseline = baseline_pricing
        self._premium_multiplier = premium_multiplier
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._elements = elements or DEFAULT_RISK_ELEMENTS
        self._lock = threading.Lock()
        self._records: dict[tuple[str, str], list[ConsentRecord]] = {}
        self._material_version: dict[str, int] = {}
        self._config_cache: dict[tuple[str, int], ConsentConfig] = {}
        registry.on_card_registered.append(self._on_card_registered)

    # Registered as a registry listener; runs inside the registry write path.
    def _on_card_registered(self, card: ModelCard, material: bool) -> None:
        with self._lock:
            if material or card.model_id not in self._material_version:
                self._material_version[card.model_id] = card.card_version

    def material_version(self, model_id: str) -> int:
        with self._lock:
            version = self._material_version.get(model_id)
        if version is None:
            # model registered before this service attached (startup order)
            version = self._registry.get_card(model_id).card_version
            with self._lock:
                self._material_version.setdefault(model_id, version)
        return version

    def config_for(self, model_id: str) -> ConsentConfig:
        card = self._registry.get_card(model_id)
        key = (model_id, card.card_version)
        cached = self._config_cache.get(key)
        if cached is None:
            cached = derive_consent_config(
                card, self._baseline, self._premium_multiplier, self._elements)
            self._config_cache[key] = cached
        return cached

    # -- read side -------------------------------------------------------------

    def current_record(self, principal_id: str, model_id: str) -> Optional[ConsentRecord]:
        with self._lock:
            history = self._records.get((principal_id, model_id), [])
            for record in reversed(history):
                if not record.revoked:
                    return record
        return None

    def valid_record(self, principal_id: str, model_id: str) -> Optional[ConsentRecord]:
        record = self.current_record(principal_id, model_id)
        if record is None:
            return None
        if record.card_version != self.material_version(model_id):
            return None
        required = {e.id for e in self.config_for(model_id).required_elements}
        if not required.issubset(record.acknowledged):
            return None
        return record

    def missing_elements(self, principal_id: str, model_id: str) -> list[str]:
        """Required element ids not yet acknowledged at the current material
        version, in config order. The exact set a denial must carry."""
        config = self.config_for(model_id)
        if not config.required_elements:
            return []
        record = self.current_record(principal_id, model_id)
        covered: frozenset[str] = frozenset()
        if record is not None and record.card_version == self.material_version(model_id):
            covered = record.acknowledged
        return [e.id for e in config.required_elements if e.id not in covered]

    def get_disclosure(self, principal_id: str, model_id: str) -> DisclosurePayload:
        config = self.config_for(model_id)
        missing = set(self.missing_elements(principal_id, model_id))
        return DisclosurePayload(
            model_id=model_id,
            card_version=config.card_version,
            universal=config.universal_disclosure,
            missing_elements=tuple(e for e in config.required_elements if e.id in missing),
            card_ref=f"/v1/models/{model_id}/card",
        )

    # -- write side --------------------------------------------------------------

    def grant_consent(self, principal_id: str, model_id: str, card_version: int,
                      acknowledged_ids: Iterable[str]) -> ConsentRecord:
        """Store a full acknowledgment set; partial grants are rejected."""
        self._registry.get(model_id)  # raises UnknownModel
        acknowledged = frozenset(acknowledged_ids)
        config = self.config_for(model_id)
        required = [e.id for e in config.required_elements]
        missing = [e for e in required if e not in acknowledged]
        if missing:
            raise IncompleteAcknowledgment(missing)
        with self._lock:
            current = self._material_version.get(model_id)
            if current is None:
                current = self._registry.get_card(model_id).card_version
                self._material_version[model_id] = current
            if card_version != current:
                raise StaleCardVersion(
                    f"card_version {card_version} is not current ({current}) for {model_id}")
            now = self._clock()
            history = self._records.setdefault((principal_id, model_id), [])
            # supersede any unrevoked prior record: at most one live record
            for i, prior in enumerate(history):
                if not prior.revoked:
                    history[i] = replace(prior, revoked_at=now)
            record = ConsentRecord(
                principal_id=principal_id, model_id=model_id,
                card_version=card_version, acknowledged=acknowledged,
                granted_at=now)
            history.append(record)
            return record

    def revoke_consent(self, principal_id: str, model_id: str) -> ConsentRecord:
        with self._lock:
            history = self._records.get((principal_id, model_id), [])
            for i in range(len(history) - 1, -1, -1):
                if not history[i].revoked:
                    history[i] = replace(history[i], revoked_at=self._clock())
                    return history[i]
        raise NothingToRevoke(f"no unrevoked consent for {principal_id} on {model_id}")

    def list_consents(self, principal_id: str) -> list[ConsentRecord]:
        """Every stored record for the principal, newest grant first."""
        with self._lock:
            records = [
                record
                for (pid, _), history in self._records.items() if pid == principal_id
                for record in history
            ]
        records.sort(key=lambda r: r.granted_at, reverse=True)
        return records

    def history(self, principal_id: str, model_id: str) -> list[ConsentRecord]:
        with self._lock:
            return list(self._records.get((principal_id, model_id), []))
