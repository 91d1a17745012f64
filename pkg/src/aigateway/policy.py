"""Per-request access decisions and EU-first route resolution.

``authorize`` is a pure function of registry + entitlement + consent
snapshots and always yields an actionable verdict: capability gaps surface
as ``require_access_request``; ``deny`` is reserved for models that are
gone (removed, or deprecated past grace) and revoked credentials.

``resolve_route`` prefers the first EU-jurisdiction endpoint of a model's
ordered endpoint list; a NON_EU endpoint is only reachable when no EU one
exists, and authorize has already guaranteed the non-EU acknowledgment in
that case.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import TYPE_CHECKING, Callable, Iterable, Optional

from .errors import Duplicate, NoEndpoint, NotAuthorized, UnknownModel, UnknownPrincipal
from .registry import EU, Region, Registry

if TYPE_CHECKING:
    from .consent import ConsentService

VERDICT_ALLOW = "allow"
VERDICT_REQUIRE_CONSENT = "require_consent"
VERDICT_REQUIRE_ACCESS_REQUEST = "require_access_request"
VERDICT_DENY = "deny"


def singleton_group(principal_id: str) -> str:
    """Implicit per-principal group: single-user access is a one-member group."""
    return f"user:{principal_id}"


@dataclass(frozen=True)
class Principal:
    id: str
    display_name: str
    groups: frozenset[str] = frozenset()
    roles: frozenset[str] = frozenset({"user"})

    @property
    def is_admin(self) -> bool:
        return "admin" in self.roles


@dataclass(frozen=True)
class Entitlement:
    group_id: str
    model_id: str
    granted_by: str
    granted_at: datetime
    source: str  # baseline | access_request | manual


@dataclass(frozen=True)
class Endpoint:
    provider_id: str
    region: Region


@dataclass(frozen=True)
class Decision:
    verdict: str
    missing_elements: tuple[str, ...] = ()
    reason: str = ""

    def __post_init__(self):
        wants_missing = self.verdict == VERDICT_REQUIRE_CONSENT
        if wants_missing != bool(self.missing_elements):
            raise ValueError("missing_elements set iff verdict is require_consent")


class PrincipalStore:
    """Static principal directory; stands in for the institutional IdP."""

    def __init__(self, principals: Iterable[Principal] = ()):
        self._principals = {p.id: p for p in principals}

    def add(self, principal: Principal) -> None:
        self._principals[principal.id] = principal

    def get(self, principal_id: str) -> Principal:
        principal = self._principals.get(principal_id)
        if principal is None:
            raise UnknownPrincipal(f"unknown principal {principal_id}")
        return principal

    def all(self) -> list[Principal]:
        return sorted(self._principals.values(), key=lambda p: p.id)


class PolicyEngine:
    """Entitlement store plus the decision and routing functions."""

    def __init__(self, registry: Registry, principals: PrincipalStore,
                 clock: Callable[[], datetime] | None = None):
        self._registry = registry
        self._principals = principals
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._lock = threading.Lock()
        self._entitlements: dict[tuple[str, str], Entitlement] = {}
        self._routes: dict[str, tuple[Endpoint, ...]] = {}

    # -- routing table ----------------------------------------------------------

    def set_route(self, model_id: str, endpoints: Iterable[Endpoint]) -> None:
        endpoints = tuple(endpoints)
        if not endpoints:
            raise NoEndpoint(f"model {model_id} needs at least one endpoint")
        for ep in endpoints:
            self._registry.get_provider(ep.provider_id)  # raises if undefined
        self._routes[model_id] = endpoints

    def routes(self) -> dict[str, tuple[Endpoint, ...]]:
        return dict(self._routes)

    # -- entitlements -------------------------------------------------------------

    def grant_entitlement(self, group_id: str, model_id: str, actor: str,
                          source: str = "manual", actor_is_admin: bool = True) -> Entitlement:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not grant entitlements")
        self._registry.get(model_id)  # raises UnknownModel
        with self._lock:
            key = (group_id, model_id)
            if key in self._entitlements:
                raise Duplicate(f"entitlement {group_id}:{model_id} already granted")
            entitlement = Entitlement(
                group_id=group_id, model_id=model_id, granted_by=actor,
                granted_at=self._clock(), source=source)
            self._entitlements[key] = entitlement
            return entitlement

    def entitlements(self) -> list[Entitlement]:
        with self._lock:
            return sorted(self._entitlements.values(),
                          key=lambda e: (e.group_id, e.model_id))

    def is_entitled(self, principal: Principal, model_id: str) -> bool:
        groups = set(principal.groups) | {singleton_group(principal.id)}
        with self._lock:
            return any((group, model_id) in self._entitlements for group in groups)

    # -- decisions ----------------------------------------------------------------

    def authorize(self, principal_id: str, model_id: str,
                  consent_view: "ConsentService") -> Decision:
        principal = self._principals.get(principal_id)
        entry = self._registry.get(model_id)

        if not self._registry.is_invocable(entry):
            return Decision(verdict=VERDICT_DENY,
                            reason=f"model {model_id} is {entry.state}")
        if entry.state == "restricted" and not self.is_entitled(principal, model_id):
            return Decision(verdict=VERDICT_REQUIRE_ACCESS_REQUEST,
                            reason=f"model {model_id} is restricted")
        missing = consent_view.missing_elements(principal_id, model_id)
        if missing:
            return Decision(verdict=VERDICT_REQUIRE_CONSENT,
                            missing_elements=tuple(missing),
                            reason="consent incomplete")
        return Decision(verdict=VERDICT_ALLOW, reason="entitled and consented")

    def resolve_route(self, model_id: str) -> Endpoint:
        """First EU endpoint in preference order, else the first endpoint.

        Only call after authorize returned allow: a NON_EU-only route is
        reachable only because the non-EU acknowledgment is already on record.
        """
        endpoints = self._routes.get(model_id)
        if not endpoints:
            raise NoEndpoint(f"no endpoints for model {model_id}")
        for endpoint in endpoints:
            if endpoint.region.jurisdiction == EU:
                return endpoint
        return endpoints[0]
