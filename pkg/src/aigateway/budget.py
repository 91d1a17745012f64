"""Multi-tier spend accounting with two-phase admission.

Money is an integer count of micro-currency units (1e-6). Token rates are
micro-units per 1M tokens, so cost arithmetic stays exact until a single
half-up rounding at the end. Caps are enforced *before* the upstream call:
``reserve`` admits against ``settled + held <= cap`` atomically across the
whole scope chain, ``settle`` converts the hold into an append-only ledger
entry (actual cost may exceed the hold; admission of the next request is
where the lockout happens).

All ledger mutations run under one mutex, which makes admission
linearizable: concurrent reservations can never jointly exceed headroom.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Optional

from .errors import (
    AlreadyTerminal,
    BudgetExceeded,
    EmptyJustification,
    NotAuthorized,
    Overflow,
    TopUpLimitReached,
    UnknownReservation,
    UnknownScope,
)
from .registry import Pricing

MICRO = 1_000_000  # micro-units per currency unit, and tokens per "1M tokens"

# Counts beyond this guard would stop being exactly representable in clients
# that read the JSON with IEEE doubles.
_COUNT_GUARD = 2 ** 53

SCOPE_KINDS = ("platform_monthly", "provider", "model", "user", "project")


def _round_half_up_div(numerator: int, denominator: int) -> int:
    q, r = divmod(numerator, denominator)
    return q + (1 if 2 * r >= denominator else 0)


def estimate_cost(pricing: Pricing, input_tokens: int, output_tokens: int,
                  cached_tokens: int = 0) -> int:
    """Cost in micro-units, exact integer arithmetic, one final half-up rounding."""
    if min(input_tokens, output_tokens, cached_tokens) < 0:
        raise ValueError("token counts must be >= 0")
    if cached_tokens > input_tokens:
        raise ValueError("cached_tokens exceeds input_tokens")
    if max(input_tokens, output_tokens) > _COUNT_GUARD:
        raise Overflow(f"token count beyond {_COUNT_GUARD}")
    total = (
        (input_tokens - cached_tokens) * pricing.input_rate
        + cached_tokens * pricing.cached_input_rate
        + output_tokens * pricing.output_rate
    )
    return _round_half_up_div(total, MICRO)


def micro_to_display(micro: int) -> str:
    """Two-decimal display string, half-up (0.039 -> "0.04")."""
    sign = "-" if micro < 0 else ""
    cents = _round_half_up_div(abs(micro), 10_000)
    return f"{sign}{cents // 100}.{cents % 100:02d}"


def parse_amount(text: str | int | float) -> int:
    """Parse a currency amount ("10.00", 10, 10.0) into micro-units."""
    if isinstance(text, int):
        return text * MICRO
    if isinstance(text, float):
        return round(text * MICRO)
    text = text.strip()
    negative = text.startswith("-")
    if negative:
        text = text[1:]
    whole, _, frac = text.partition(".")
    frac = (frac + "000000")[:6]
    value = int(whole or "0") * MICRO + int(frac or "0")
    return -value if negative else value


def period_key(ts: datetime) -> str:
    """UTC calendar month, e.g. "2026-08"."""
    ts = ts.astimezone(timezone.utc)
    return f"{ts.year:04d}-{ts.month:02d}"


@dataclass
class BudgetScope:
    id: str
    kind: str
    cap: int  # micro-units
    period: str  # "monthly" | "lifetime"
    parent: Optional[str] = None
    topup_count: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in SCOPE_KINDS:
            problems.append(f"scope {self.id}: unknown kind {self.kind!r}")
        if self.cap < 0:
            problems.append(f"scope {self.id}: negative cap")
        if self.period not in ("monthly", "lifetime"):
            problems.append(f"scope {self.id}: period must be monthly or lifetime")
        if self.kind == "platform_monthly" and self.period != "monthly":
            problems.append(f"scope {self.id}: platform_monthly scopes must have period monthly")
        return problems


@dataclass(frozen=True)
class Reservation:
    id: str
    scope_chain: tuple[str, ...]
    amount: int
    created_at: datetime
    state: str = "held"  # held | settled | released


@dataclass(frozen=True)
class LedgerEntry:
    id: str
    scope_ids: tuple[str, ...]
    usage_event_id: str
    amount: int
    period: str
    timestamp: datetime


@dataclass(frozen=True)
class Alert:
    scope_id: str
    threshold: float
    fired_at: datetime
    period: str
    spent: int
    cap: int


class BudgetLedger:
    """Scopes, holds, settlements, alerts, and reports behind one mutex."""

    def __init__(self, clock: Callable[[], datetime] | None = None,
                 thresholds: Iterable[float] = (0.8,),
                 topup_limit: int = 1,
                 alert_sink: Callable[[Alert], None] | None = None):
        self._lock = threading.Lock()
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._scopes: dict[str, BudgetScope] = {}
        self._reservations: dict[str, Reservation] = {}
        self._settled_by_reservation: dict[str, LedgerEntry] = {}
        self._entries: list[LedgerEntry] = []
        self._entry_meta: dict[str, dict] = {}  # entry id -> grouping keys
        self._alerts: dict[tuple[str, float, str], Alert] = {}
        self.thresholds = sorted(thresholds)
        self.topup_limit = topup_limit
        self.alert_sink = alert_sink
        self._res_seq = itertools.count(1)
        self._entry_seq = itertools.count(1)

    # -- scopes ---------------------------------------------------------------

    def add_scope(self, scope: BudgetScope) -> None:
        problems = scope.validate()
        if problems:
            raise UnknownScope("; ".join(problems))
        with self._lock:
            if scope.id in self._scopes:
                raise UnknownScope(f"scope id {scope.id} already defined")
            if scope.parent is not None and scope.parent not in self._scopes:
                raise UnknownScope(f"scope {scope.id}: parent {scope.parent} undefined")
            self._scopes[scope.id] = scope

    def get_scope(self, scope_id: str) -> BudgetScope:
        scope = self._scopes.get(scope_id)
        if scope is None:
            raise UnknownScope(f"unknown scope {scope_id}")
        return scope

    def scopes(self) -> list[BudgetScope]:
        return sorted(self._scopes.values(), key=lambda s: s.id)

    def chain_for(self, scope_id: str) -> tuple[str, ...]:
        """Scope plus ancestors, child first. Scope graph is a forest."""
        chain: list[str] = []
        current: Optional[str] = scope_id
        while current is not None:
            if current in chain:
                raise UnknownScope(f"scope cycle at {current}")
            chain.append(current)
            current = self.get_scope(current).parent
        return tuple(chain)

    # -- accounting -----------------------------------------------------------

    def _scope_period(self, scope: BudgetScope, ts: datetime) -> str:
        return period_key(ts) if scope.period == "monthly" else "lifetime"

    def _settled(self, scope_id: str, period: str) -> int:
        return sum(
            e.amount for e in self._entries
            if scope_id in e.scope_ids and (period == "lifetime" or e.period == period))

    def _held(self, scope_id: str) -> int:
        return sum(
            r.amount for r in self._reservations.values()
            if r.state == "held" and scope_id in r.scope_chain)

    def spent(self, scope_id: str, at: datetime | None = None) -> int:
        """Settled spend for the scope's current period."""
        ts = at or self._clock()
        with self._lock:
            scope = self.get_scope(scope_id)
            return self._settled(scope_id, self._scope_period(scope, ts))

    def utilization(self, scope_id: str) -> dict:
        ts = self._clock()
        with self._lock:
            scope = self.get_scope(scope_id)
            period = self._scope_period(scope, ts)
            settled = self._settled(scope_id, period)
            held = self._held(scope_id)
            return {
                "scope_id": scope_id, "kind": scope.kind, "cap": scope.cap,
                "period": period, "settled": settled, "held": held,
                "topup_count": scope.topup_count,
            }

    def reserve(self, scope_chain: Iterable[str], estimate: int) -> Reservation:
        """Admit atomically against every scope in the chain, or hold nothing."""
        chain = tuple(scope_chain)
        if estimate <= 0:
            raise ValueError("reservation amount must be >= 1 micro")
        ts = self._clock()
        with self._lock:
            for scope_id in chain:
                scope = self.get_scope(scope_id)
                period = self._scope_period(scope, ts)
                if self._settled(scope_id, period) + self._held(scope_id) + estimate > scope.cap:
                    raise BudgetExceeded(scope_id)
            reservation = Reservation(
                id=f"res-{next(self._res_seq):08d}", scope_chain=chain,
                amount=estimate, created_at=ts)
            self._reservations[reservation.id] = reservation
            return reservation

    def settle(self, reservation_id: str, actual_cost: int, usage_event_id: str) -> LedgerEntry:
        """Release the hold, append the actual cost, evaluate alerts. Idempotent."""
        if actual_cost < 0:
            raise ValueError("actual_cost must be >= 0")
        fired: list[Alert] = []
        with self._lock:
            reservation = self._reservations.get(reservation_id)
            if reservation is None:
                raise UnknownReservation(reservation_id)
            if reservation.state == "settled":
                return self._settled_by_reservation[reservation_id]
            if reservation.state == "released":
                raise AlreadyTerminal(f"reservation {reservation_id} already released")
            ts = self._clock()
            entry = LedgerEntry(
                id=f"led-{next(self._entry_seq):08d}",
                scope_ids=reservation.scope_chain,
                usage_event_id=usage_event_id,
                amount=actual_cost,
                period=period_key(ts),
                timestamp=ts)
            self._entries.append(entry)
            self._reservations[reservation_id] = Reservation(
                id=reservation.id, scope_chain=reservation.scope_chain,
                amount=reservation.amount, created_at=reservation.created_at,
                state="settled")
            self._settled_by_reservation[reservation_id] = entry
            fired = self._evaluate_alerts_locked(reservation.scope_chain, ts)
        for alert in fired:
            self._emit(alert)
        return entry

    def release(self, reservation_id: str) -> None:
        """Drop a hold without spending (upstream failure path). Idempotent."""
        with self._lock:
            reservation = self._reservations.get(reservation_id)
            if reservation is None:
                raise UnknownReservation(reservation_id)
            if reservation.state == "released":
                return
            if reservation.state == "settled":
                raise AlreadyTerminal(f"reservation {reservation_id} already settled")
            self._reservations[reservation_id] = Reservation(
                id=reservation.id, scope_chain=reservation.scope_chain,
                amount=reservation.amount, created_at=reservation.created_at,
                state="released")

    def get_reservation(self, reservation_id: str) -> Reservation:
        reservation = self._reservations.get(reservation_id)
        if reservation is None:
            raise UnknownReservation(reservation_id)
        return reservation

    def record_entry_meta(self, entry_id: str, **meta) -> None:
        """Attach grouping keys (user, model, provider) for spend reports."""
        self._entry_meta[entry_id] = meta

    def restore_entry(self, scope_ids: Iterable[str], amount: int, period: str,
                      usage_event_id: str, meta: dict | None = None) -> LedgerEntry:
        """Recovery path: re-append a settled entry replayed from the audit log."""
        with self._lock:
            entry = LedgerEntry(
                id=f"led-{next(self._entry_seq):08d}",
                scope_ids=tuple(scope_ids),
                usage_event_id=usage_event_id,
                amount=amount,
                period=period,
                timestamp=self._clock())
            self._entries.append(entry)
            if meta:
                self._entry_meta[entry.id] = dict(meta)
            return entry

    # -- top-ups --------------------------------------------------------------

    def top_up(self, scope_id: str, amount: int, justification: str, actor: str,
               actor_is_admin: bool = True) -> int:
        if not actor_is_admin:
            raise NotAuthorized(f"{actor} may not top up budgets")
        if not justification.strip():
            raise EmptyJustification("top-up requires a justification")
        if amount <= 0:
            raise ValueError("top-up amount must be positive")
        with self._lock:
            scope = self.get_scope(scope_id)
            if scope.topup_count >= self.topup_limit:
                raise TopUpLimitReached(
                    f"scope {scope_id} already used {scope.topup_count} of "
                    f"{self.topup_limit} top-ups")
            scope.cap += amount
            scope.topup_count += 1
            return scope.cap

    # -- alerts ---------------------------------------------------------------

    def _evaluate_alerts_locked(self, scope_ids: Iterable[str], ts: datetime) -> list[Alert]:
        fired = []
        for scope_id in scope_ids:
            scope = self._scopes.get(scope_id)
            if scope is None or scope.cap <= 0:
                continue
            period = self._scope_period(scope, ts)
            settled = self._settled(scope_id, period)
            for threshold in self.thresholds:
                key = (scope_id, threshold, period)
                if key in self._alerts:
                    continue
                if settled >= threshold * scope.cap:
                    alert = Alert(scope_id=scope_id, threshold=threshold, fired_at=ts,
                                  period=period, spent=settled, cap=scope.cap)
                    self._alerts[key] = alert
                    fired.append(alert)
        return fired

    def evaluate_alerts(self, scope_id: str) -> list[Alert]:
        """Fire any newly crossed thresholds for the scope; at most once per period."""
        with self._lock:
            fired = self._evaluate_alerts_locked([scope_id], self._clock())
        for alert in fired:
            self._emit(alert)
        return fired

    def _emit(self, alert: Alert) -> None:
        if self.alert_sink is not None:
            self.alert_sink(alert)

    def alerts(self) -> list[Alert]:
        with self._lock:
            return sorted(self._alerts.values(), key=lambda a: a.fired_at)

    # -- reports ----------------------------------------------------------------

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def spend_report(self, group_by: str, period: str | None = None) -> list[dict]:
        """Rows of (key, total, request_count), ordered by total desc then key."""
        if group_by not in ("user", "model", "provider", "period"):
            raise ValueError(f"unsupported group_by {group_by!r}")
        with self._lock:
            totals: dict[str, list[int]] = {}
            for entry in self._entries:
                if period is not None and entry.period != period:
                    continue
                meta = self._entry_meta.get(entry.id, {})
                key = entry.period if group_by == "period" else meta.get(group_by)
                if key is None:
                    continue
                bucket = totals.setdefault(str(key), [0, 0])
                bucket[0] += entry.amount
                bucket[1] += 1
        rows = [
            {"key": key, "total": total, "request_count": count}
            for key, (total, count) in totals.items()
        ]
        rows.sort(key=lambda r: (-r["total"], r["key"]))
        return rows
