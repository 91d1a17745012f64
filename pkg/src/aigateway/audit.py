"""Append-only audit trail: the compliance-evidence layer.

One global JSONL file, one event per line, strictly increasing ``seq``.
Appends are durable (flush + fsync) before the triggering governance action
reports success; a torn trailing line from a crash is discarded on reopen,
so recovery always yields a gapless prefix.

``Projection`` rebuilds ledger totals, entitlements, consent validity, and
access-request outcomes from the log alone — the event-sourcing check that
live state is fully evidenced.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import StorageFailure

ACTIONS = frozenset({
    "card_registered",
    "lifecycle_transition",
    "entitlement_granted",
    "consent_granted",
    "consent_revoked",
    "key_issued",
    "key_revoked",
    "reservation",
    "settlement",
    "decision_rendered",
    "request_submitted",
    "request_decided",
    "topup",
    "alert_fired",
})

# Field names that must never appear in event details: the log is content-free.
_FORBIDDEN_DETAIL_KEYS = frozenset({"content", "messages", "prompt", "completion", "text"})


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    timestamp: datetime
    correlation_id: str
    actor: str
    action: str
    subject: dict[str, str]
    details: dict

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp.isoformat(),
            "correlation_id": self.correlation_id,
            "actor": self.actor,
            "action": self.action,
            "subject": dict(self.subject),
            "details": dict(self.details),
        }

    @classmethod
    def from_json(cls, raw: dict) -> "AuditEvent":
        return cls(
            seq=int(raw["seq"]),
            timestamp=datetime.fromisoformat(raw["timestamp"]),
            correlation_id=str(raw.get("correlation_id", "")),
            actor=str(raw.get("actor", "")),
            action=str(raw["action"]),
            subject={str(k): str(v) for k, v in raw.get("subject", {}).items()},
            details=raw.get("details", {}),
        )


class AuditLog:
    """Serialized append point; queries read consistent snapshots.

    ``path=None`` keeps the log purely in memory (unit tests); otherwise
    existing events are replayed from disk on open.
    """

    def __init__(self, path: str | Path | None = None,
                 clock: Callable[[], datetime] | None = None):
        self._lock = threading.Lock()
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._events: list[AuditEvent] = []
        self._path = Path(path) if path is not None else None
        self._fh = None
        if self._path is not None:
            self._open()

    def _open(self) -> None:
        self._path.parent.mkdir(parents=True, exist_ok=True)
        recovered, valid_bytes = [], 0
        if self._path.exists():
            raw = self._path.read_bytes()
            offset = 0
            for line in raw.split(b"\n"):
                end = offset + len(line) + 1
                if line.strip():
                    try:
                        recovered.append(AuditEvent.from_json(json.loads(line)))
                        valid_bytes = min(end, len(raw))
                    except (ValueError, KeyError):
                        break  # torn tail: keep the gapless prefix only
                offset = end
            if valid_bytes < len(raw):
                with open(self._path, "r+b") as fh:
                    fh.truncate(valid_bytes)
            if valid_bytes and raw[valid_bytes - 1:valid_bytes] != b"\n":
                with open(self._path, "ab") as fh:
                    fh.write(b"\n")
        self._events = recovered
        self._fh = open(self._path, "ab")

    @property
    def next_seq(self) -> int:
        return self._events[-1].seq + 1 if self._events else 1

    def append(self, correlation_id: str, actor: str, action: str,
               subject: dict[str, str] | None = None,
               details: dict | None = None) -> AuditEvent:
        """Durably append one event; the caller's action must not report
        success before this returns."""
        if action not in ACTIONS:
            raise StorageFailure(f"unknown audit action {action!r}")
        details = details or {}
        bad = _FORBIDDEN_DETAIL_KEYS.intersection(details)
        if bad:
            raise StorageFailure(f"content-bearing detail field rejected: {sorted(bad)}")
        with self._lock:
            event = AuditEvent(
                seq=self.next_seq,
                timestamp=self._clock(),
                correlation_id=correlation_id,
                actor=actor,
                action=action,
                subject=subject or {},
                details=details,
            )
            if self._fh is not None:
                try:
                    line = json.dumps(event.to_json(), separators=(",", ":"))
                    self._fh.write(line.encode() + b"\n")
                    self._fh.flush()
                    os.fsync(self._fh.fileno())
                except OSError as exc:  # governance action fails closed
                    raise StorageFailure(f"audit append failed: {exc}") from exc
            self._events.append(event)
            return event

    def query(self, correlation_id: str | None = None, actor: str | None = None,
              action: str | None = None, since: datetime | None = None,
              until: datetime | None = None) -> list[AuditEvent]:
        """Matching events in seq order; boundaries are inclusive since, exclusive until."""
        with self._lock:
            snapshot = list(self._events)
        out = []
        for event in snapshot:
            if correlation_id is not None and event.correlation_id != correlation_id:
                continue
            if actor is not None and event.actor != actor:
                continue
            if action is not None and event.action != action:
                continue
            if since is not None and event.timestamp < since:
                continue
            if until is not None and event.timestamp >= until:
                continue
            out.append(event)
        return out

    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def export_path(self, directory: str | Path, month: str) -> Path:
        """Write audit-YYYYMM.jsonl for one calendar month; returns the path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        target = directory / f"audit-{month.replace('-', '')}.jsonl"
        wanted = month  # "YYYY-MM"
        with open(target, "w", encoding="utf-8") as fh:
            for event in self.events():
                stamp = event.timestamp.astimezone(timezone.utc)
                if f"{stamp.year:04d}-{stamp.month:02d}" == wanted:
                    fh.write(json.dumps(event.to_json(), separators=(",", ":")) + "\n")
        return target

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class Projection:
    """State rebuilt purely from audit events.

    ledger_totals: (scope_id, period) -> settled micro total
    settlements: one dict per settled entry, with grouping meta
    entitlements: (group_id, model_id) -> source
    consent_valid: (principal, model_id) -> card_version of the live record
    requests: request id -> full submission and decision record
    topup_delta / topup_count: net cap increase and uses per scope
    """

    ledger_totals: dict[tuple[str, str], int] = field(default_factory=dict)
    settlements: list[dict] = field(default_factory=list)
    entitlements: dict[tuple[str, str], str] = field(default_factory=dict)
    consent_valid: dict[tuple[str, str], int] = field(default_factory=dict)
    consent_acked: dict[tuple[str, str], tuple[str, ...]] = field(default_factory=dict)
    requests: dict[str, dict] = field(default_factory=dict)
    topup_delta: dict[str, int] = field(default_factory=dict)
    topup_count: dict[str, int] = field(default_factory=dict)
    material_version: dict[str, int] = field(default_factory=dict)
    lifecycle_states: dict[str, list[str]] = field(default_factory=dict)

    @property
    def request_status(self) -> dict[str, str]:
        return {rid: r.get("status", "") for rid, r in self.requests.items()}

    @classmethod
    def replay(cls, events: Iterable[AuditEvent]) -> "Projection":
        p = cls()
        for event in events:
            d = event.details
            if event.action == "card_registered":
                model = event.subject.get("model_id", "")
                if d.get("material", True):
                    p.material_version[model] = int(d.get("card_version", 0))
                    # material bump invalidates every prior consent for the model
                    for key in [k for k in p.consent_valid if k[1] == model]:
                        if p.consent_valid[key] != p.material_version[model]:
                            del p.consent_valid[key]
                            p.consent_acked.pop(key, None)
            elif event.action == "settlement":
                if d.get("result") == "released":
                    continue
                amount = int(d.get("amount", 0))
                period = str(d.get("period", ""))
                scope_ids = [str(s) for s in d.get("scope_ids", [])]
                p.settlements.append({
                    "scope_ids": scope_ids,
                    "amount": amount,
                    "period": period,
                    "usage_event_id": str(d.get("usage_event_id", "")),
                    "user": event.actor,
                    "model": event.subject.get("model_id", ""),
                    "provider": event.subject.get("provider_id", ""),
                })
                for scope_id in scope_ids:
                    key = (scope_id, period)
                    p.ledger_totals[key] = p.ledger_totals.get(key, 0) + amount
            elif event.action == "entitlement_granted":
                key = (event.subject.get("group_id", ""), event.subject.get("model_id", ""))
                p.entitlements[key] = str(d.get("source", "manual"))
            elif event.action == "consent_granted":
                key = (event.subject.get("principal", ""), event.subject.get("model_id", ""))
                p.consent_valid[key] = int(d.get("card_version", 0))
                p.consent_acked[key] = tuple(d.get("acknowledged", []))
            elif event.action == "consent_revoked":
                key = (event.subject.get("principal", ""), event.subject.get("model_id", ""))
                p.consent_valid.pop(key, None)
                p.consent_acked.pop(key, None)
            elif event.action == "request_submitted":
                request_id = event.subject.get("request_id", "")
                p.requests[request_id] = {
                    "request_id": request_id,
                    "principal": event.subject.get("principal", ""),
                    "model_id": event.subject.get("model_id", ""),
                    "submitted_at": event.timestamp,
                    "status": "pending",
                    **{k: d.get(k) for k in ("use_case", "local_testing_evidence",
                                             "expected_volume", "privacy_acknowledgment",
                                             "endorsement")},
                }
            elif event.action == "request_decided":
                request = p.requests.setdefault(
                    event.subject.get("request_id", ""),
                    {"request_id": event.subject.get("request_id", "")})
                request["status"] = str(d.get("status", ""))
                request["rationale"] = str(d.get("rationale", ""))
                request["decided_by"] = event.actor
                request["decided_at"] = event.timestamp
            elif event.action == "topup":
                scope = event.subject.get("scope_id", "")
                p.topup_delta[scope] = p.topup_delta.get(scope, 0) + int(d.get("amount", 0))
                p.topup_count[scope] = p.topup_count.get(scope, 0) + 1
            elif event.action == "lifecycle_transition":
                model = event.subject.get("model_id", "")
                p.lifecycle_states.setdefault(model, []).append(str(d.get("state", "")))
        return p
