"""Access-request lifecycle: submission, review, decision, SLA tracking.

Requests exist only for restricted models; approving one grants the
requesting principal's singleton group an entitlement in the same step, so
every approval is immediately enforceable and auditable.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta, timezone
from typing import Callable, Optional

from .errors import (
    AlreadyDecided,
    EmptyRationale,
    IncompleteRequest,
    ModelNotRestricted,
    NotAuthorized,
    UnknownRequest,
)
from .policy import PolicyEngine, Principal, PrincipalStore, singleton_group
from .registry import RISK_NON_EU_HOSTING, Registry

REQUEST_STATUSES = ("pending", "approved", "denied", "needs_info")
_STATUS_TRANSITIONS = {
    "pending": {"approved", "denied", "needs_info"},
    "needs_info": {"pending"},
    "approved": set(),
    "denied": set(),
}


def business_days_between(start: date, end: date) -> int:
    """Business days after ``start`` up to and including ``end`` (Mon-Fri).

    Same-day gives 0; Friday to Monday gives 1.
    """
    if end <= start:
        return 0
    days = 0
    current = start
    while current < end:
        current += timedelta(days=1)
        if current.weekday() < 5:
            days += 1
    return days


@dataclass(frozen=True)
class RequestDecision:
    actor: str
    rationale: str
    decided_at: datetime


@dataclass(frozen=True)
class AccessRequest:
    id: str
    principal_id: str
    model_id: str
    use_case: str
    local_testing_evidence: str
    expected_volume: int  # tokens/month estimate
    privacy_acknowledgment: bool
    submitted_at: datetime
    status: str = "pending"
    endorsement: Optional[dict] = None  # {endorser_id, text}
    decision: Optional[RequestDecision] = None


@dataclass(frozen=True)
class SlaRow:
    request_id: str
    status: str
    elapsed_business_days: int
    sla_business_days: int
    breached: bool


class AccessRequestService:
    def __init__(self, registry: Registry, policy: PolicyEngine, principals: PrincipalStore,
                 clock: Callable[[], datetime] | None = None,
                 min_use_case_chars: int = 20,
                 sla_business_days_standard: int = 2,
                 sla_business_days_restricted: int = 5):
        self._registry = registry
        self._policy = policy
        self._principals = principals
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self.min_use_case_chars = min_use_case_chars
        self.sla_standard = sla_business_days_standard
        self.sla_restricted = sla_business_days_restricted
        self._lock = threading.Lock()
        self._requests: dict[str, AccessRequest] = {}
        self._seq = itertools.count(1)

    # -- submission ---------------------------------------------------------

    def submit_request(self, principal_id: str, model_id: str, use_case: str,
                       local_testing_evidence: str, expected_volume: int = 0,
                       privacy_acknowledgment: bool = False,
                       endorsement: Optional[dict] = None) -> AccessRequest:
        principal = self._principals.get(principal_id)
        entry = self._registry.get(model_id)
        if entry.state != "restricted":
            raise ModelNotRestricted(
                f"model {model_id} is {entry.state}; restricted models are the "
                "only ones that take access requests — active models are "
                "directly usable")

        card = entry.card
        missing: list[str] = []
        if len(use_case.strip()) < self.min_use_case_chars:
            missing.append("use_case")
        if not local_testing_evidence.strip():
            missing.append("local_testing_evidence")
        if RISK_NON_EU_HOSTING in card.risk_flags and not privacy_acknowledgment:
            missing.append("privacy_acknowledgment")
        needs_endorsement = ("user" in principal.roles
                             and not principal.roles.intersection({"faculty", "admin"}))
        if needs_endorsement and not (endorsement and endorsement.get("endorser_id")):
            missing.append("endorsement")
        if missing:
            raise IncompleteRequest(missing)

        with self._lock:
            request = AccessRequest(
                id=f"req-{next(self._seq):06d}",
                principal_id=principal_id,
                model_id=model_id,
                use_case=use_case.strip(),
                local_testing_evidence=local_testing_evidence.strip(),
                expected_volume=expected_volume,
                privacy_acknowledgment=privacy_acknowledgment,
                submitted_at=self._clock(),
                endorsement=endorsement,
            )
            self._requests[request.id] = request
            return request

    def resubmit(self, request_id: str, use_case: str | None = None,
                 local_testing_evidence: str | None = None) -> AccessRequest:
        """Move a needs_info request back to pending with amended fields."""
        with self._lock:
            request = self._get_locked(request_id)
            if request.status != "needs_info":
                raise AlreadyDecided(f"request {request_id} is {request.status}")
            updated = replace(
                request,
                status="pending",
                decision=None,
                use_case=use_case.strip() if use_case else request.use_case,
                local_testing_evidence=(local_testing_evidence.strip()
                                        if local_testing_evidence else
                                        request.local_testing_evidence),
            )
            self._requests[request_id] = updated
            return updated

    # -- review ---------------------------------------------------------------

    def decide_request(self, request_id: str, verdict: str, rationale: str, actor: str,
                       actor_is_admin: bool = True) -> AccessRequest:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not decide access requests")
        if verdict not in ("approved", "denied", "needs_info"):
            raise ValueError(f"unknown verdict {verdict!r}")
        if not rationale.strip():
            raise EmptyRationale("a decision needs a rationale")
        with self._lock:
            request = self._get_locked(request_id)
            if verdict not in _STATUS_TRANSITIONS[request.status]:
                raise AlreadyDecided(f"request {request_id} is already {request.status}")
            decided = replace(
                request,
                status=verdict,
                decision=RequestDecision(actor=actor, rationale=rationale.strip(),
                                         decided_at=self._clock()),
            )
            if verdict == "approved":
                # entitlement and status flip together or not at all
                self._policy.grant_entitlement(
                    singleton_group(request.principal_id), request.model_id,
                    actor=actor, source="access_request")
            self._requests[request_id] = decided
            return decided

    def restore(self, record: dict) -> None:
        """Recovery path: re-seat a request replayed from the audit log."""
        with self._lock:
            request_id = record["request_id"]
            decision = None
            if record.get("status") in ("approved", "denied", "needs_info"):
                decision = RequestDecision(
                    actor=record.get("decided_by", ""),
                    rationale=record.get("rationale", ""),
                    decided_at=record.get("decided_at") or self._clock())
            self._requests[request_id] = AccessRequest(
                id=request_id,
                principal_id=record.get("principal", ""),
                model_id=record.get("model_id", ""),
                use_case=record.get("use_case") or "",
                local_testing_evidence=record.get("local_testing_evidence") or "",
                expected_volume=int(record.get("expected_volume") or 0),
                privacy_acknowledgment=bool(record.get("privacy_acknowledgment")),
                submitted_at=record.get("submitted_at") or self._clock(),
                status=record.get("status", "pending"),
                endorsement=record.get("endorsement"),
                decision=decision)
            # keep generated ids ahead of every restored one
            try:
                numeric = int(request_id.rsplit("-", 1)[1])
            except (IndexError, ValueError):
                return
            self._seq = itertools.count(max(numeric + 1, next(self._seq)))

    # -- queries ----------------------------------------------------------------

    def _get_locked(self, request_id: str) -> AccessRequest:
        request = self._requests.get(request_id)
        if request is None:
            raise UnknownRequest(f"unknown access request {request_id}")
        return request

    def get(self, request_id: str) -> AccessRequest:
        with self._lock:
            return self._get_locked(request_id)

    def list_requests(self, status: str | None = None,
                      principal_id: str | None = None) -> list[AccessRequest]:
        with self._lock:
            requests = list(self._requests.values())
        if status is not None:
            requests = [r for r in requests if r.status == status]
        if principal_id is not None:
            requests = [r for r in requests if r.principal_id == principal_id]
        requests.sort(key=lambda r: r.submitted_at)
        return requests

    def sla_report(self) -> list[SlaRow]:
        """Elapsed business days per request; breach when past the SLA.

        Requests target restricted models by construction, so the restricted
        SLA applies; pending requests measure against now.
        """
        now = self._clock()
        rows = []
        for request in self.list_requests():
            end = request.decision.decided_at if request.decision else now
            elapsed = business_days_between(request.submitted_at.date(), end.date())
            sla = self.sla_restricted
            rows.append(SlaRow(
                request_id=request.id,
                status=request.status,
                elapsed_business_days=elapsed,
                sla_business_days=sla,
                breached=elapsed > sla,
            ))
        return rows
