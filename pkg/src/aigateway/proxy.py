"""The request path, end to end.

``Gateway.handle_chat`` runs the fixed pipeline — authenticate, authorize
(entitlement + consent), estimate and reserve budget, resolve the route,
forward, meter, settle — and emits exactly one content-free usage event per
handled request, rejections included. Message content is passed through
untouched and never reaches any persisted artifact.

Every request gets a correlation id that links its decision, reservation,
settlement, and usage event: the compliance-evidence join key.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import secrets
import threading
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from .adapters import GenericHttpAdapter, MockAdapter, TokenUsage, estimate_message_tokens
from .audit import AuditLog
from .budget import BudgetLedger, estimate_cost, micro_to_display
from .consent import ConsentService
from .errors import (
    AccessDenied,
    BudgetExceeded,
    ConsentRequired,
    GatewayError,
    InvalidKey,
    ModelUnavailable,
    NotAuthorized,
    UnknownKey,
    UnknownModel,
    UpstreamError,
)
from .policy import (
    VERDICT_ALLOW,
    VERDICT_DENY,
    VERDICT_REQUIRE_ACCESS_REQUEST,
    VERDICT_REQUIRE_CONSENT,
    Endpoint,
    PolicyEngine,
    PrincipalStore,
)
from .registry import EU, ModelSummary, Registry
from .workflow import AccessRequestService, singleton_group

OUTCOME_OK = "ok"
OUTCOME_UPSTREAM_ERROR = "upstream_error"
OUTCOME_BUDGET_DENIED = "budget_denied"
OUTCOME_CONSENT_DENIED = "consent_denied"
OUTCOME_ACCESS_DENIED = "access_denied"


def hash_secret(secret: str) -> str:
    return hashlib.sha256(secret.encode()).hexdigest()


@dataclass
class ScopedKey:
    key_id: str
    secret_hash: str
    principal_id: str
    allowed_models: Optional[frozenset[str]]  # None means wildcard
    budget_scope: str
    routing_constraint: Optional[str] = None  # "EU" confines routing to EU
    expires_at: Optional[datetime] = None
    revoked: bool = False

    def allows_model(self, model_id: str) -> bool:
        return self.allowed_models is None or model_id in self.allowed_models

    def to_public_dict(self) -> dict:
        # no secret material beyond the one-way hash
        return {
            "key_id": self.key_id,
            "principal_id": self.principal_id,
            "allowed_models": sorted(self.allowed_models) if self.allowed_models is not None else "*",
            "budget_scope": self.budget_scope,
            "routing_constraint": self.routing_constraint,
            "expires_at": self.expires_at.isoformat() if self.expires_at else None,
            "revoked": self.revoked,
        }


class KeyStore:
    """Scoped keys, hash-only at rest; the plaintext secret leaves exactly once.

    With ``path`` set, the store writes through to a JSON file so the CLI
    (provisioning) and a later serve run share one key inventory.
    """

    def __init__(self, clock: Callable[[], datetime] | None = None,
                 path: str | Path | None = None):
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._lock = threading.Lock()
        self._keys: dict[str, ScopedKey] = {}
        self._by_hash: dict[str, str] = {}
        self._path = Path(path) if path is not None else None
        self._seq = itertools.count(1)
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        for raw in json.loads(self._path.read_text(encoding="utf-8")):
            allowed = raw.get("allowed_models")
            key = ScopedKey(
                key_id=raw["key_id"],
                secret_hash=raw["secret_hash"],
                principal_id=raw["principal_id"],
                allowed_models=frozenset(allowed) if allowed is not None else None,
                budget_scope=raw["budget_scope"],
                routing_constraint=raw.get("routing_constraint"),
                expires_at=(datetime.fromisoformat(raw["expires_at"])
                            if raw.get("expires_at") else None),
                revoked=bool(raw.get("revoked", False)),
            )
            self._keys[key.key_id] = key
            self._by_hash[key.secret_hash] = key.key_id
        numbers = [int(k.split("-")[1]) for k in self._keys if k.startswith("key-")
                   and k.split("-")[1].isdigit()]
        if numbers:
            self._seq = itertools.count(max(numbers) + 1)

    def _persist_locked(self) -> None:
        if self._path is None:
            return
        rows = []
        for key in sorted(self._keys.values(), key=lambda k: k.key_id):
            rows.append({
                "key_id": key.key_id,
                "secret_hash": key.secret_hash,
                "principal_id": key.principal_id,
                "allowed_models": (sorted(key.allowed_models)
                                   if key.allowed_models is not None else None),
                "budget_scope": key.budget_scope,
                "routing_constraint": key.routing_constraint,
                "expires_at": key.expires_at.isoformat() if key.expires_at else None,
                "revoked": key.revoked,
            })
        self._path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(rows, indent=1), encoding="utf-8")
        tmp.replace(self._path)

    def issue(self, principal_id: str, allowed_models: Optional[Iterable[str]],
              budget_scope: str, expires_at: Optional[datetime] = None,
              routing_constraint: Optional[str] = None) -> tuple[ScopedKey, str]:
        with self._lock:
            key_id = f"key-{next(self._seq):06d}"
            secret = f"gw-{key_id}-{secrets.token_hex(16)}"
            key = ScopedKey(
                key_id=key_id,
                secret_hash=hash_secret(secret),
                principal_id=principal_id,
                allowed_models=(frozenset(allowed_models)
                                if allowed_models is not None else None),
                budget_scope=budget_scope,
                routing_constraint=routing_constraint,
                expires_at=expires_at,
            )
            self._keys[key_id] = key
            self._by_hash[key.secret_hash] = key_id
            self._persist_locked()
            return key, secret

    def add_static(self, key: ScopedKey) -> None:
        """Register a config-provided key (secret hash already computed)."""
        with self._lock:
            self._keys[key.key_id] = key
            self._by_hash[key.secret_hash] = key.key_id
            self._persist_locked()

    def authenticate(self, secret: str) -> ScopedKey:
        key_id = self._by_hash.get(hash_secret(secret or ""))
        if key_id is None:
            raise InvalidKey("unknown key")
        key = self._keys[key_id]
        if key.revoked:
            raise InvalidKey("key revoked")
        if key.expires_at is not None and self._clock() >= key.expires_at:
            raise InvalidKey("key expired")
        return key

    def revoke(self, key_id: str) -> ScopedKey:
        with self._lock:
            key = self._keys.get(key_id)
            if key is None:
                raise UnknownKey(f"unknown key {key_id}")
            key.revoked = True
            self._persist_locked()
            return key

    def get(self, key_id: str) -> ScopedKey:
        key = self._keys.get(key_id)
        if key is None:
            raise UnknownKey(f"unknown key {key_id}")
        return key

    def keys(self) -> list[ScopedKey]:
        with self._lock:
            return sorted(self._keys.values(), key=lambda k: k.key_id)


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: list  # opaque; read only for token counting
    max_output_tokens: Optional[int] = None
    stream: bool = False


@dataclass(frozen=True)
class UsageEvent:
    event_id: str
    timestamp: datetime
    correlation_id: str
    key_id: Optional[str]
    principal_id: Optional[str]
    model_id: Optional[str]
    provider_id: Optional[str]
    region: Optional[str]
    input_tokens: int
    output_tokens: int
    cached_tokens: int
    latency_ms: int
    cost: int  # micro-units
    outcome: str
    estimated: bool = False

    def to_json(self) -> dict:
        return {
            "event_id": self.event_id,
            "timestamp": self.timestamp.isoformat(),
            "correlation_id": self.correlation_id,
            "key_id": self.key_id,
            "principal_id": self.principal_id,
            "model_id": self.model_id,
            "provider_id": self.provider_id,
            "region": self.region,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cached_tokens": self.cached_tokens,
            "latency_ms": self.latency_ms,
            "cost": self.cost,
            "outcome": self.outcome,
            "estimated": self.estimated,
        }


class UsageLog:
    """Append-only JSONL usage events with size-based rotation."""

    def __init__(self, path: str | Path | None = None, max_bytes: int = 16 * 1024 * 1024):
        self._path = Path(path) if path is not None else None
        self.max_bytes = max_bytes
        self._lock = threading.Lock()
        self._events: list[UsageEvent] = []
        self._rotations = 0
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._rotations = len(list(self._path.parent.glob(
                f"{self._path.stem}-*{self._path.suffix}")))

    def append(self, event: UsageEvent) -> None:
        with self._lock:
            self._events.append(event)
            if self._path is None:
                return
            if self._path.exists() and self._path.stat().st_size >= self.max_bytes:
                self._rotations += 1
                stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
                self._path.rename(self._path.with_name(
                    f"{self._path.stem}-{stamp}-{self._rotations:04d}{self._path.suffix}"))
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event.to_json(), separators=(",", ":")) + "\n")

    def events(self) -> list[UsageEvent]:
        with self._lock:
            return list(self._events)


@dataclass
class ChatResult:
    """Unary result: passthrough content plus gateway metadata."""

    response: dict
    usage_event: UsageEvent


@dataclass
class ChatStream:
    """Streamed result: iterate ``chunks`` fully, then read ``usage_event``."""

    correlation_id: str
    model_id: str
    region: str
    chunks: Iterator[str]
    _final: dict = field(default_factory=dict)

    @property
    def usage_event(self) -> Optional[UsageEvent]:
        return self._final.get("event")

    @property
    def metadata(self) -> Optional[dict]:
        return self._final.get("metadata")


class Gateway:
    """Owns all services and runs the request pipeline."""

    def __init__(self, registry: Registry, policy: PolicyEngine,
                 consent: ConsentService, ledger: BudgetLedger,
                 audit: AuditLog, keys: KeyStore, principals: PrincipalStore,
                 workflow: AccessRequestService,
                 usage_log: UsageLog | None = None,
                 clock: Callable[[], datetime] | None = None,
                 model_scopes: dict[str, str] | None = None,
                 provider_scopes: dict[str, str] | None = None,
                 hard_output_token_ceiling: int = 1_000_000,
                 upstream_timeout: float = 120.0):
        self.registry = registry
        self.policy = policy
        self.consent = consent
        self.ledger = ledger
        self.audit = audit
        self.keys = keys
        self.principals = principals
        self.workflow = workflow
        self.usage_log = usage_log or UsageLog()
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._adapters: dict[str, MockAdapter | GenericHttpAdapter] = {}
        self.model_scopes = model_scopes or {}
        self.provider_scopes = provider_scopes or {}
        self.hard_output_token_ceiling = hard_output_token_ceiling
        self.upstream_timeout = upstream_timeout
        self.alert_stream_path: Optional[Path] = None
        self._event_seq = itertools.count(1)

    # -- wiring ------------------------------------------------------------------

    def set_adapter(self, provider_id: str, adapter) -> None:
        self._adapters[provider_id] = adapter

    def adapter_for(self, provider_id: str):
        adapter = self._adapters.get(provider_id)
        if adapter is None:
            raise UpstreamError(f"no adapter wired for provider {provider_id}")
        return adapter

    # -- governance operations, each durably audited before reporting success ----

    def register_card(self, card, actor: str, material: bool = True,
                      actor_is_admin: bool = True) -> str:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not register cards")
        model_id = self.registry.register_card(card, actor=actor, material=material)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=actor, action="card_registered",
            subject={"model_id": model_id},
            details={"card_version": card.card_version, "material": material,
                     "risk_flags": sorted(card.risk_flags)})
        return model_id

    def transition_lifecycle(self, model_id: str, target_state: str, actor: str,
                             rationale: str, actor_is_admin: bool = True):
        lifecycle = self.registry.transition_lifecycle(
            model_id, target_state, actor, rationale, actor_is_admin=actor_is_admin)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=actor, action="lifecycle_transition",
            subject={"model_id": model_id},
            details={"state": lifecycle.state, "rationale": rationale})
        return lifecycle

    def grant_entitlement(self, group_id: str, model_id: str, actor: str,
                          source: str = "manual", actor_is_admin: bool = True):
        entitlement = self.policy.grant_entitlement(
            group_id, model_id, actor, source, actor_is_admin=actor_is_admin)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=actor, action="entitlement_granted",
            subject={"group_id": group_id, "model_id": model_id},
            details={"source": source})
        return entitlement

    def grant_consent(self, principal_id: str, model_id: str, card_version: int,
                      acknowledged_ids):
        record = self.consent.grant_consent(principal_id, model_id, card_version,
                                            acknowledged_ids)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=principal_id, action="consent_granted",
            subject={"principal": principal_id, "model_id": model_id},
            details={"card_version": card_version,
                     "acknowledged": sorted(record.acknowledged)})
        return record

    def revoke_consent(self, principal_id: str, model_id: str):
        record = self.consent.revoke_consent(principal_id, model_id)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=principal_id, action="consent_revoked",
            subject={"principal": principal_id, "model_id": model_id},
            details={"card_version": record.card_version})
        return record

    def top_up(self, scope_id: str, amount: int, justification: str, actor: str,
               actor_is_admin: bool = True) -> int:
        new_cap = self.ledger.top_up(scope_id, amount, justification, actor,
                                     actor_is_admin=actor_is_admin)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=actor, action="topup",
            subject={"scope_id": scope_id},
            details={"amount": amount, "new_cap": new_cap,
                     "justification": justification})
        return new_cap

    def submit_access_request(self, principal_id: str, model_id: str, **fields):
        request = self.workflow.submit_request(principal_id, model_id, **fields)
        # full submission recorded: request history must be reconstructible
        # from the audit log alone
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=principal_id,
            action="request_submitted",
            subject={"request_id": request.id, "principal": principal_id,
                     "model_id": model_id},
            details={"use_case": request.use_case,
                     "local_testing_evidence": request.local_testing_evidence,
                     "expected_volume": request.expected_volume,
                     "privacy_acknowledgment": request.privacy_acknowledgment,
                     "endorsement": request.endorsement})
        return request

    def decide_access_request(self, request_id: str, verdict: str, rationale: str,
                              actor: str, actor_is_admin: bool = True):
        request = self.workflow.decide_request(request_id, verdict, rationale, actor,
                                               actor_is_admin=actor_is_admin)
        correlation_id = str(uuid.uuid4())
        if request.status == "approved":
            self.audit.append(
                correlation_id=correlation_id, actor=actor, action="entitlement_granted",
                subject={"group_id": singleton_group(request.principal_id),
                         "model_id": request.model_id},
                details={"source": "access_request", "request_id": request_id})
        self.audit.append(
            correlation_id=correlation_id, actor=actor, action="request_decided",
            subject={"request_id": request_id, "model_id": request.model_id,
                     "principal": request.principal_id},
            details={"status": request.status, "rationale": rationale})
        return request

    def record_alert(self, alert) -> None:
        """Alert sink hook: audit trail plus the notification stream."""
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor="system", action="alert_fired",
            subject={"scope_id": alert.scope_id},
            details={"threshold": alert.threshold, "period": alert.period,
                     "spent": alert.spent, "cap": alert.cap})
        if self.alert_stream_path is not None:
            line = json.dumps({
                "scope_id": alert.scope_id, "threshold": alert.threshold,
                "period": alert.period, "spent": alert.spent, "cap": alert.cap,
                "fired_at": alert.fired_at.isoformat(),
            }, separators=(",", ":"))
            with open(self.alert_stream_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    # -- key administration ---------------------------------------------------------

    def issue_key(self, principal_id: str, allowed_models, budget_scope: str,
                  expires_at: Optional[datetime], actor: str,
                  actor_is_admin: bool = True,
                  routing_constraint: Optional[str] = None) -> tuple[ScopedKey, str]:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not issue keys")
        self.ledger.get_scope(budget_scope)  # raises UnknownScope
        key, secret = self.keys.issue(principal_id, allowed_models, budget_scope,
                                      expires_at, routing_constraint)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=actor, action="key_issued",
            subject={"key_id": key.key_id, "principal": principal_id},
            details={"budget_scope": budget_scope,
                     "allowed_models": sorted(allowed_models) if allowed_models is not None else "*",
                     "expires_at": expires_at.isoformat() if expires_at else None})
        return key, secret

    def revoke_key(self, key_id: str, actor: str, actor_is_admin: bool = True) -> ScopedKey:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not revoke keys")
        key = self.keys.revoke(key_id)
        self.audit.append(
            correlation_id=str(uuid.uuid4()), actor=actor, action="key_revoked",
            subject={"key_id": key_id}, details={})
        return key

    # -- catalog view -----------------------------------------------------------------

    def list_models(self, principal_id: str) -> list[ModelSummary]:
        principal = self.principals.get(principal_id)
        summaries = []
        for entry in self.registry.listable():
            card = entry.card
            try:
                endpoint = self.policy.resolve_route(card.model_id)
                hosting = endpoint.region.jurisdiction
            except GatewayError:
                served = card.served_region()
                hosting = served.jurisdiction if served else "UNKNOWN"
            summaries.append(ModelSummary(
                model_id=card.model_id,
                name=card.section("identification").splitlines()[0][:80],
                cost_tier=card.pricing.cost_tier,
                hosting=hosting,
                state=entry.state,
                consent_required=self.consent.config_for(card.model_id).modal_required,
                requires_access_request=(entry.state == "restricted"
                                         and not self.policy.is_entitled(principal, card.model_id)),
            ))
        return summaries

    # -- the pipeline --------------------------------------------------------------------

    def _scope_chain(self, key: ScopedKey, model_id: str, provider_id: str) -> tuple[str, ...]:
        chain: list[str] = list(self.ledger.chain_for(key.budget_scope))
        for scope_id in (self.model_scopes.get(model_id),
                         self.provider_scopes.get(provider_id)):
            if scope_id is None:
                continue
            for ancestor in self.ledger.chain_for(scope_id):
                if ancestor not in chain:
                    chain.append(ancestor)
        return tuple(chain)

    def _build_event(self, correlation_id: str, key: Optional[ScopedKey],
                     model_id: Optional[str], provider_id: Optional[str],
                     region: Optional[str], usage: Optional[TokenUsage],
                     cost: int, outcome: str, started: float) -> UsageEvent:
        return UsageEvent(
            event_id=f"evt-{next(self._event_seq):08d}",
            timestamp=self._clock(),
            correlation_id=correlation_id,
            key_id=key.key_id if key else None,
            principal_id=key.principal_id if key else None,
            model_id=model_id,
            provider_id=provider_id,
            region=region,
            input_tokens=usage.input_tokens if usage else 0,
            output_tokens=usage.output_tokens if usage else 0,
            cached_tokens=usage.cached_tokens if usage else 0,
            latency_ms=int((time.perf_counter() - started) * 1000),
            cost=cost,
            outcome=outcome,
            estimated=usage.estimated if usage else False,
        )

    def _emit_event(self, correlation_id: str, key: Optional[ScopedKey],
                    model_id: Optional[str], provider_id: Optional[str],
                    region: Optional[str], usage: Optional[TokenUsage],
                    cost: int, outcome: str, started: float) -> UsageEvent:
        event = self._build_event(correlation_id, key, model_id, provider_id,
                                  region, usage, cost, outcome, started)
        self.usage_log.append(event)
        return event

    def _decision_audit(self, correlation_id: str, principal_id: str, model_id: str,
                        verdict: str, reason: str, card_version: int | None,
                        missing: tuple[str, ...] = ()) -> None:
        details: dict = {"verdict": verdict, "reason": reason}
        if card_version is not None:
            details["card_version"] = card_version
        if missing:
            details["missing_elements"] = list(missing)
        self.audit.append(
            correlation_id=correlation_id, actor=principal_id,
            action="decision_rendered",
            subject={"principal": principal_id, "model_id": model_id},
            details=details)

    def handle_chat(self, key_secret: str, request: ChatRequest) -> ChatResult | ChatStream:
        correlation_id = str(uuid.uuid4())
        started = time.perf_counter()

        try:
            key = self.keys.authenticate(key_secret)
        except InvalidKey:
            self.audit.append(
                correlation_id=correlation_id, actor="anonymous",
                action="decision_rendered",
                subject={"model_id": request.model_id},
                details={"verdict": "deny", "reason": "invalid_key"})
            self._emit_event(correlation_id, None, request.model_id, None, None,
                             None, 0, OUTCOME_ACCESS_DENIED, started)
            raise

        try:
            entry = self.registry.get(request.model_id)
        except UnknownModel:
            self._decision_audit(correlation_id, key.principal_id, request.model_id,
                                 "deny", "unknown_model", None)
            self._emit_event(correlation_id, key, request.model_id, None, None,
                             None, 0, OUTCOME_ACCESS_DENIED, started)
            raise ModelUnavailable(f"unknown model {request.model_id}")

        card = entry.card
        if not key.allows_model(request.model_id):
            self._decision_audit(correlation_id, key.principal_id, request.model_id,
                                 "deny", "key_not_scoped_for_model", card.card_version)
            self._emit_event(correlation_id, key, request.model_id, None, None,
                             None, 0, OUTCOME_ACCESS_DENIED, started)
            raise AccessDenied(f"key {key.key_id} is not scoped for {request.model_id}")

        decision = self.policy.authorize(key.principal_id, request.model_id, self.consent)
        self._decision_audit(correlation_id, key.principal_id, request.model_id,
                             decision.verdict, decision.reason, card.card_version,
                             decision.missing_elements)
        if decision.verdict == VERDICT_DENY:
            self._emit_event(correlation_id, key, request.model_id, None, None,
                             None, 0, OUTCOME_ACCESS_DENIED, started)
            raise ModelUnavailable(decision.reason)
        if decision.verdict == VERDICT_REQUIRE_ACCESS_REQUEST:
            self._emit_event(correlation_id, key, request.model_id, None, None,
                             None, 0, OUTCOME_ACCESS_DENIED, started)
            raise AccessDenied(decision.reason)
        if decision.verdict == VERDICT_REQUIRE_CONSENT:
            self._emit_event(correlation_id, key, request.model_id, None, None,
                             None, 0, OUTCOME_CONSENT_DENIED, started)
            raise ConsentRequired(list(decision.missing_elements))

        endpoint = self.policy.resolve_route(request.model_id)
        if key.routing_constraint == EU and endpoint.region.jurisdiction != EU:
            self._decision_audit(correlation_id, key.principal_id, request.model_id,
                                 "deny", "key_confined_to_eu_routing", card.card_version)
            self._emit_event(correlation_id, key, request.model_id,
                             endpoint.provider_id, endpoint.region.country_code,
                             None, 0, OUTCOME_ACCESS_DENIED, started)
            raise AccessDenied(f"key {key.key_id} is confined to EU routing")

        # conservative admission: full model output unless the request bounds it
        input_estimate = estimate_message_tokens(request.messages)
        output_bound = min(request.max_output_tokens or card.max_output,
                           card.max_output, self.hard_output_token_ceiling)
        estimate = max(1, estimate_cost(card.pricing, input_estimate, output_bound, 0))

        scope_chain = self._scope_chain(key, request.model_id, endpoint.provider_id)
        try:
            reservation = self.ledger.reserve(scope_chain, estimate)
        except BudgetExceeded as exc:
            self._emit_event(correlation_id, key, request.model_id,
                             endpoint.provider_id, endpoint.region.country_code,
                             None, 0, OUTCOME_BUDGET_DENIED, started)
            raise exc
        self.audit.append(
            correlation_id=correlation_id, actor=key.principal_id, action="reservation",
            subject={"model_id": request.model_id, "reservation_id": reservation.id},
            details={"amount": reservation.amount, "scope_ids": list(scope_chain)})

        adapter = self.adapter_for(endpoint.provider_id)
        if request.stream:
            return self._run_stream(correlation_id, key, request, card, endpoint,
                                    adapter, reservation.id, started)
        return self._run_unary(correlation_id, key, request, card, endpoint,
                               adapter, reservation.id, started)

    # -- unary ---------------------------------------------------------------

    def _run_unary(self, correlation_id, key, request, card, endpoint, adapter,
                   reservation_id, started) -> ChatResult:
        try:
            result = adapter.complete(
                model_id=request.model_id, messages=request.messages,
                max_output_tokens=request.max_output_tokens,
                timeout=self.upstream_timeout)
        except UpstreamError:
            self._abort_reservation(correlation_id, key, reservation_id)
            self._emit_event(correlation_id, key, request.model_id,
                             endpoint.provider_id, endpoint.region.country_code,
                             None, 0, OUTCOME_UPSTREAM_ERROR, started)
            raise

        usage = result.usage
        event, cost = self._settle(correlation_id, key, request.model_id,
                                   endpoint, card, usage, started, reservation_id)
        response = {
            "id": f"chatcmpl-{event.event_id}",
            "object": "chat.completion",
            "created": int(self._clock().timestamp()),
            "model": request.model_id,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": result.content},
                "finish_reason": "stop",
            }],
            "usage": {
                "prompt_tokens": usage.input_tokens,
                "completion_tokens": usage.output_tokens,
                "total_tokens": usage.input_tokens + usage.output_tokens,
            },
            "gateway": self._gateway_metadata(correlation_id, request.model_id,
                                              endpoint, cost),
        }
        return ChatResult(response=response, usage_event=event)

    # -- streaming -------------------------------------------------------------

    def _run_stream(self, correlation_id, key, request, card, endpoint, adapter,
                    reservation_id, started) -> ChatStream:
        stream = ChatStream(
            correlation_id=correlation_id, model_id=request.model_id,
            region=endpoint.region.country_code, chunks=iter(()))
        stream.chunks = self._stream_chunks(stream, correlation_id, key, request,
                                            card, endpoint, adapter,
                                            reservation_id, started)
        return stream

    def _stream_chunks(self, stream, correlation_id, key, request, card, endpoint,
                       adapter, reservation_id, started) -> Iterator[str]:
        relayed_tokens = 0
        usage: TokenUsage | None = None
        try:
            upstream = adapter.stream(
                model_id=request.model_id, messages=request.messages,
                max_output_tokens=request.max_output_tokens,
                timeout=self.upstream_timeout)
            while True:
                try:
                    chunk = next(upstream)
                except StopIteration as done:  # generator returns final usage
                    usage = done.value
                    break
                relayed_tokens += estimate_message_tokens([{"content": chunk}])
                if relayed_tokens > self.hard_output_token_ceiling:
                    upstream.close()  # backstop: stop relaying past the ceiling
                    break
                yield chunk
        except UpstreamError:
            self._abort_reservation(correlation_id, key, reservation_id)
            stream._final["event"] = self._emit_event(
                correlation_id, key, request.model_id, endpoint.provider_id,
                endpoint.region.country_code, None, 0, OUTCOME_UPSTREAM_ERROR, started)
            raise
        except GeneratorExit:
            # client went away mid-stream: settle what was actually relayed
            usage = TokenUsage(
                input_tokens=estimate_message_tokens(request.messages),
                output_tokens=relayed_tokens, cached_tokens=0, estimated=True)
            event, _ = self._settle(correlation_id, key, request.model_id,
                                    endpoint, card, usage, started, reservation_id)
            stream._final["event"] = event
            raise
        if usage is None:
            usage = TokenUsage(
                input_tokens=estimate_message_tokens(request.messages),
                output_tokens=relayed_tokens, cached_tokens=0, estimated=True)
        event, cost = self._settle(correlation_id, key, request.model_id,
                                   endpoint, card, usage, started, reservation_id)
        stream._final["event"] = event
        stream._final["metadata"] = self._gateway_metadata(
            correlation_id, request.model_id, endpoint, cost, usage=usage)

    def _settle(self, correlation_id, key, model_id, endpoint, card, usage, started,
                reservation_id: str) -> tuple[UsageEvent, int]:
        """Meter, settle the hold, then durably record settlement and event."""
        cost = estimate_cost(card.pricing, usage.input_tokens, usage.output_tokens,
                             usage.cached_tokens)
        event = self._build_event(correlation_id, key, model_id,
                                  endpoint.provider_id, endpoint.region.country_code,
                                  usage, cost, OUTCOME_OK, started)
        entry = self.ledger.settle(reservation_id, cost, event.event_id)
        self.ledger.record_entry_meta(
            entry.id, user=key.principal_id, model=model_id,
            provider=endpoint.provider_id)
        self.audit.append(
            correlation_id=correlation_id, actor=key.principal_id, action="settlement",
            subject={"model_id": model_id, "provider_id": endpoint.provider_id,
                     "reservation_id": reservation_id, "ledger_entry_id": entry.id},
            details={"result": "settled", "amount": cost, "period": entry.period,
                     "scope_ids": list(entry.scope_ids),
                     "usage_event_id": event.event_id})
        self.usage_log.append(event)
        return event, cost

    def _abort_reservation(self, correlation_id: str, key, reservation_id: str) -> None:
        self.ledger.release(reservation_id)
        self.audit.append(
            correlation_id=correlation_id, actor=key.principal_id, action="settlement",
            subject={"reservation_id": reservation_id},
            details={"result": "released", "amount": 0})

    def _gateway_metadata(self, correlation_id, model_id, endpoint, cost,
                          usage: TokenUsage | None = None) -> dict:
        metadata = {
            "model_id": model_id,
            "provider_id": endpoint.provider_id,
            "region": endpoint.region.country_code,
            "jurisdiction": endpoint.region.jurisdiction,
            "cost": cost,
            "cost_display": micro_to_display(cost),
            "correlation_id": correlation_id,
        }
        if usage is not None:
            metadata["usage"] = {
                "prompt_tokens": usage.input_tokens,
                "completion_tokens": usage.output_tokens,
                "total_tokens": usage.input_tokens + usage.output_tokens,
            }
        return metadata
