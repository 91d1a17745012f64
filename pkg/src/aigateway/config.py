"""Startup configuration: one JSON file, env vars for secrets only.

Every cross-reference (provider ids in routes, scope ids on keys, parents
of scopes) is checked up front; an invalid config reports *all* violations
at once and the service refuses to start. Defaults mirror the pilot
policy: 10.00 per user, 500.00 platform monthly, one top-up, alert at 80%,
premium consent above 5x baseline.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .adapters import build_adapter
from .audit import AuditLog, Projection
from .budget import Alert, BudgetLedger, BudgetScope, parse_amount
from .consent import DEFAULT_RISK_ELEMENTS, ConsentService, RiskElement
from .errors import ConfigInvalid
from .policy import Endpoint, PolicyEngine, Principal, PrincipalStore
from .proxy import Gateway, KeyStore, ScopedKey, UsageLog
from .registry import (
    EU_MEMBER_STATES,
    Pricing,
    Provider,
    Region,
    Registry,
    card_from_dict,
    validate_card,
)
from .workflow import AccessRequestService

DEFAULTS = {
    "listen": "127.0.0.1:8080",
    "user_cap": "10.00",
    "platform_monthly_cap": "500.00",
    "alert_thresholds": [0.8],
    "topup_limit": 1,
    "premium_multiplier": 5.0,
    "sla_business_days_standard": 2,
    "sla_business_days_restricted": 5,
    "upstream_timeout_seconds": 120.0,
    "deprecation_grace_days": 0,
    "min_use_case_chars": 20,
    "hard_output_token_ceiling": 1_000_000,
    "card_reload_seconds": 0.0,  # 0 disables the directory watcher
    "baseline_pricing": {  # small EU-hosted default model
        "input_rate": 150_000, "output_rate": 600_000,
        "cached_input_rate": 75_000, "cost_tier": 1,
    },
}


@dataclass
class GatewayConfig:
    listen: str
    data_dir: Path
    card_dir: Optional[Path]
    providers: list[dict]
    routes: dict[str, list[dict]]  # model_id -> [{provider, region}]
    scopes: list[dict]
    principals: list[dict]
    baseline_entitlements: list[dict]
    static_keys: list[dict]
    model_scopes: dict[str, str]
    provider_scopes: dict[str, str]
    initial_lifecycle: dict[str, str]
    eu_member_states: frozenset[str]
    risk_element_overrides: dict[str, dict]
    alert_thresholds: list[float]
    topup_limit: int
    premium_multiplier: float
    sla_business_days_standard: int
    sla_business_days_restricted: int
    upstream_timeout_seconds: float
    deprecation_grace_days: int
    min_use_case_chars: int
    hard_output_token_ceiling: int
    card_reload_seconds: float
    baseline_pricing: Pricing
    raw: dict = field(default_factory=dict)


def load_config(path: str | Path) -> GatewayConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigInvalid([f"config file not found: {path}"])
    except ValueError as exc:
        raise ConfigInvalid([f"config is not valid JSON: {exc}"])
    return parse_config(raw, base_dir=path.parent)


def parse_config(raw: dict, base_dir: Path = Path(".")) -> GatewayConfig:
    violations: list[str] = []

    def resolve_path(value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    providers = raw.get("providers", [])
    provider_ids = {p.get("id") for p in providers}
    for p in providers:
        if not p.get("id"):
            violations.append("provider without id")
        if p.get("adapter_kind") not in ("mock", "generic_http"):
            violations.append(f"provider {p.get('id')}: adapter_kind must be mock or generic_http")
        if not p.get("regions"):
            violations.append(f"provider {p.get('id')}: regions empty")

    routes = raw.get("routes", {})
    for model_id, endpoints in routes.items():
        if not endpoints:
            violations.append(f"route {model_id}: no endpoints")
        for ep in endpoints:
            if ep.get("provider") not in provider_ids:
                violations.append(f"route {model_id}: unknown provider {ep.get('provider')!r}")

    scopes = raw.get("scopes", [])
    scope_ids = {s.get("id") for s in scopes}
    for s in scopes:
        if not s.get("id"):
            violations.append("scope without id")
        if s.get("kind") not in ("platform_monthly", "provider", "model", "user", "project"):
            violations.append(f"scope {s.get('id')}: unknown kind {s.get('kind')!r}")
        parent = s.get("parent")
        if parent is not None and parent not in scope_ids:
            violations.append(f"scope {s.get('id')}: unknown parent {parent!r}")

    principals = raw.get("principals", [])
    principal_ids = {p.get("id") for p in principals}
    for p in principals:
        if not p.get("id"):
            violations.append("principal without id")

    for ent in raw.get("baseline_entitlements", []):
        if not ent.get("group_id") or not ent.get("model_id"):
            violations.append(f"baseline entitlement incomplete: {ent}")

    static_keys = raw.get("keys", [])
    for k in static_keys:
        if not k.get("key_id"):
            violations.append("static key without key_id")
        if k.get("principal") not in principal_ids:
            violations.append(f"key {k.get('key_id')}: unknown principal {k.get('principal')!r}")
        if k.get("budget_scope") not in scope_ids:
            violations.append(f"key {k.get('key_id')}: unknown budget_scope {k.get('budget_scope')!r}")
        if not k.get("secret_env") and not k.get("secret_hash"):
            violations.append(f"key {k.get('key_id')}: needs secret_env or secret_hash")
        elif k.get("secret_env") and not os.environ.get(k["secret_env"]):
            violations.append(f"key {k.get('key_id')}: env var {k['secret_env']} not set")

    model_scopes = raw.get("model_scopes", {})
    for model_id, scope_id in model_scopes.items():
        if scope_id not in scope_ids:
            violations.append(f"model scope {model_id}: unknown scope {scope_id!r}")

    initial_lifecycle = raw.get("initial_lifecycle", {})
    for model_id, state in initial_lifecycle.items():
        if state not in ("evaluating", "active", "restricted"):
            violations.append(
                f"initial_lifecycle {model_id}: {state!r} not reachable at startup")

    risk_element_overrides = raw.get("risk_elements", {})
    for element_id, spec in risk_element_overrides.items():
        if not isinstance(spec, dict) or not str(spec.get("statement", "")).strip():
            violations.append(f"risk element {element_id}: statement required")
    provider_scopes = raw.get("provider_scopes", {})
    for provider_id, scope_id in provider_scopes.items():
        if provider_id not in provider_ids:
            violations.append(f"provider scope: unknown provider {provider_id!r}")
        if scope_id not in scope_ids:
            violations.append(f"provider scope {provider_id}: unknown scope {scope_id!r}")

    data_dir = resolve_path(raw.get("data_dir")) or (base_dir / "data")
    card_dir = resolve_path(raw.get("card_dir"))

    if violations:
        raise ConfigInvalid(violations)

    baseline_raw = raw.get("baseline_pricing", DEFAULTS["baseline_pricing"])
    baseline = Pricing(
        input_rate=int(baseline_raw["input_rate"]),
        output_rate=int(baseline_raw["output_rate"]),
        cached_input_rate=int(baseline_raw["cached_input_rate"]),
        cost_tier=int(baseline_raw.get("cost_tier", 1)))

    return GatewayConfig(
        listen=raw.get("listen", DEFAULTS["listen"]),
        data_dir=data_dir,
        card_dir=card_dir,
        providers=providers,
        routes=routes,
        scopes=scopes,
        principals=principals,
        baseline_entitlements=raw.get("baseline_entitlements", []),
        static_keys=static_keys,
        model_scopes=model_scopes,
        provider_scopes=provider_scopes,
        initial_lifecycle=initial_lifecycle,
        eu_member_states=frozenset(
            str(cc).upper() for cc in raw.get("eu_member_states", [])) or EU_MEMBER_STATES,
        risk_element_overrides=risk_element_overrides,
        alert_thresholds=[float(t) for t in raw.get("alert_thresholds", DEFAULTS["alert_thresholds"])],
        topup_limit=int(raw.get("topup_limit", DEFAULTS["topup_limit"])),
        premium_multiplier=float(raw.get("premium_multiplier", DEFAULTS["premium_multiplier"])),
        sla_business_days_standard=int(raw.get("sla_business_days_standard",
                                               DEFAULTS["sla_business_days_standard"])),
        sla_business_days_restricted=int(raw.get("sla_business_days_restricted",
                                                 DEFAULTS["sla_business_days_restricted"])),
        upstream_timeout_seconds=float(raw.get("upstream_timeout_seconds",
                                               DEFAULTS["upstream_timeout_seconds"])),
        deprecation_grace_days=int(raw.get("deprecation_grace_days",
                                           DEFAULTS["deprecation_grace_days"])),
        min_use_case_chars=int(raw.get("min_use_case_chars", DEFAULTS["min_use_case_chars"])),
        hard_output_token_ceiling=int(raw.get("hard_output_token_ceiling",
                                              DEFAULTS["hard_output_token_ceiling"])),
        card_reload_seconds=float(raw.get("card_reload_seconds",
                                          DEFAULTS["card_reload_seconds"])),
        baseline_pricing=baseline,
        raw=raw,
    )


def default_scopes(config: GatewayConfig) -> list[BudgetScope]:
    scopes = []
    for s in config.scopes:
        cap_raw = s.get("cap")
        if cap_raw is None:
            cap_raw = (DEFAULTS["platform_monthly_cap"]
                       if s["kind"] == "platform_monthly" else DEFAULTS["user_cap"])
        scopes.append(BudgetScope(
            id=s["id"], kind=s["kind"], cap=parse_amount(cap_raw),
            period=s.get("period", "monthly" if s["kind"] == "platform_monthly" else "lifetime"),
            parent=s.get("parent")))
    return scopes


def load_cards(gateway: Gateway, card_dir: Path, actor: str = "startup",
               eu_members: frozenset[str] = EU_MEMBER_STATES) -> list[str]:
    """Load every ``*.json`` card in the directory; invalid cards abort startup."""
    problems: list[str] = []
    loaded: list[str] = []
    for card_path in sorted(card_dir.glob("*.json")):
        try:
            card = card_from_dict(json.loads(card_path.read_text(encoding="utf-8")),
                                  eu_members)
        except (ValueError, KeyError, TypeError) as exc:
            problems.append(f"{card_path.name}: unreadable ({exc})")
            continue
        report = validate_card(card)
        if report:
            problems.extend(f"{card_path.name}: {v}" for v in report)
            continue
        gateway.register_card(card, actor=actor)
        loaded.append(card.model_id)
    if problems:
        raise ConfigInvalid(problems)
    return loaded


def reload_cards(gateway: Gateway, card_dir: Path, actor: str = "reload",
                 eu_members: frozenset[str] = EU_MEMBER_STATES) -> dict:
    """Pick up edited card files without a restart.

    A file wins only with a strictly newer ``card_version`` and a clean
    validation report; reload treats every accepted change as material
    (conservative: a silent edit must not keep stale consent alive).
    Unknown model ids register fresh. Returns a summary for logs/ops.
    """
    from .errors import GatewayError

    updated: list[str] = []
    skipped: list[str] = []
    problems: list[str] = []
    for card_path in sorted(card_dir.glob("*.json")):
        try:
            card = card_from_dict(json.loads(card_path.read_text(encoding="utf-8")),
                                  eu_members)
        except (ValueError, KeyError, TypeError) as exc:
            problems.append(f"{card_path.name}: unreadable ({exc})")
            continue
        report = validate_card(card)
        if report:
            problems.extend(f"{card_path.name}: {v}" for v in report)
            continue
        try:
            current = gateway.registry.get_card(card.model_id).card_version
        except GatewayError:
            current = None
        if current is not None and card.card_version <= current:
            skipped.append(card.model_id)
            continue
        gateway.register_card(card, actor=actor, material=True)
        updated.append(card.model_id)
    return {"updated": updated, "skipped": skipped, "problems": problems}


def start_card_watcher(gateway: Gateway, card_dir: Path, interval_seconds: float,
                       eu_members: frozenset[str] = EU_MEMBER_STATES):
    """Poll the card directory and reload on any mtime change. Daemon thread."""
    import logging
    import threading
    import time as time_mod

    logger = logging.getLogger("aigateway.cards")

    def snapshot() -> dict:
        return {p.name: p.stat().st_mtime for p in card_dir.glob("*.json")}

    def run():
        seen = snapshot()
        while True:
            time_mod.sleep(interval_seconds)
            try:
                now = snapshot()
                if now != seen:
                    seen = now
                    summary = reload_cards(gateway, card_dir, eu_members=eu_members)
                    if summary["updated"] or summary["problems"]:
                        logger.info("card reload: %s", summary)
            except OSError as exc:
                logger.warning("card watcher: %s", exc)

    thread = threading.Thread(target=run, daemon=True, name="card-watcher")
    thread.start()
    return thread


def build_gateway(config: GatewayConfig, in_memory: bool = False,
                  clock=None, replay_audit: bool = True) -> Gateway:
    """Assemble every service from a validated config.

    ``in_memory=True`` skips all file-backed logs (unit tests). When a
    previous audit log exists, governance state (ledger totals, consents,
    entitlements, requests, top-ups) is restored by replaying it.
    """
    registry = Registry(clock=clock, deprecation_grace_days=config.deprecation_grace_days)
    for p in config.providers:
        registry.add_provider(Provider(
            id=p["id"], name=p.get("name", p["id"]), adapter_kind=p["adapter_kind"],
            base_endpoint=p.get("base_endpoint", ""),
            regions_offered=frozenset(p["regions"])))

    principals = PrincipalStore(
        Principal(
            id=p["id"], display_name=p.get("display_name", p["id"]),
            groups=frozenset(p.get("groups", [])),
            roles=frozenset(p.get("roles", ["user"])),
        ) for p in config.principals)

    policy = PolicyEngine(registry, principals, clock=clock)
    elements = dict(DEFAULT_RISK_ELEMENTS)
    for element_id, spec in config.risk_element_overrides.items():
        base = elements.get(element_id)
        elements[element_id] = RiskElement(
            id=element_id,
            statement=str(spec["statement"]),
            derived_from=str(spec.get("derived_from",
                                      base.derived_from if base else "governance_status")))
    consent = ConsentService(registry, config.baseline_pricing,
                             premium_multiplier=config.premium_multiplier, clock=clock,
                             elements=elements)

    data_dir = config.data_dir
    if not in_memory:
        data_dir.mkdir(parents=True, exist_ok=True)
    audit = AuditLog(None if in_memory else data_dir / "audit.jsonl", clock=clock)
    usage_log = UsageLog(None if in_memory else data_dir / "usage.jsonl")

    recovered = Projection.replay(audit.events()) if replay_audit else Projection()

    ledger = BudgetLedger(clock=clock, thresholds=config.alert_thresholds,
                          topup_limit=config.topup_limit)
    for scope in default_scopes(config):
        scope.cap += recovered.topup_delta.get(scope.id, 0)
        scope.topup_count = recovered.topup_count.get(scope.id, 0)
        ledger.add_scope(scope)

    keys = KeyStore(clock=clock, path=None if in_memory else data_dir / "keys.json")
    for k in config.static_keys:
        secret_hash = k.get("secret_hash")
        if not secret_hash:
            secret_hash = hashlib.sha256(os.environ[k["secret_env"]].encode()).hexdigest()
        keys.add_static(ScopedKey(
            key_id=k["key_id"], secret_hash=secret_hash, principal_id=k["principal"],
            allowed_models=(frozenset(k["allowed_models"])
                            if k.get("allowed_models") not in (None, "*") else None),
            budget_scope=k["budget_scope"],
            routing_constraint=k.get("routing_constraint")))

    workflow = AccessRequestService(
        registry, policy, principals, clock=clock,
        min_use_case_chars=config.min_use_case_chars,
        sla_business_days_standard=config.sla_business_days_standard,
        sla_business_days_restricted=config.sla_business_days_restricted)

    gateway = Gateway(
        registry=registry, policy=policy, consent=consent, ledger=ledger,
        audit=audit, keys=keys, principals=principals, workflow=workflow,
        usage_log=usage_log, clock=clock,
        model_scopes=config.model_scopes, provider_scopes=config.provider_scopes,
        hard_output_token_ceiling=config.hard_output_token_ceiling,
        upstream_timeout=config.upstream_timeout_seconds)
    if not in_memory:
        gateway.alert_stream_path = data_dir / "alerts.jsonl"
    ledger.alert_sink = gateway.record_alert

    for p in config.providers:
        api_key = os.environ.get(p["api_key_env"]) if p.get("api_key_env") else None
        gateway.set_adapter(p["id"], build_adapter(
            p["adapter_kind"], p.get("base_endpoint", ""), api_key=api_key,
            **p.get("adapter_options", {})))

    if config.card_dir is not None and config.card_dir.exists():
        load_cards(gateway, config.card_dir, eu_members=config.eu_member_states)

    # routes and baseline entitlements need cards/providers in place
    for model_id, endpoints in config.routes.items():
        policy.set_route(model_id, [
            Endpoint(provider_id=ep["provider"], region=Region.from_country(ep["region"], config.eu_member_states))
            for ep in endpoints])
    for ent in config.baseline_entitlements:
        policy.grant_entitlement(ent["group_id"], ent["model_id"],
                                 actor="config", source="baseline")

    # restore replayed governance state on top of config baselines, then
    # apply first-boot lifecycle hints for models with no history yet
    _apply_projection(gateway, recovered)
    _bootstrap_lifecycle(gateway, config.initial_lifecycle,
                         set(recovered.lifecycle_states))
    return gateway


def _bootstrap_lifecycle(gateway: Gateway, initial: dict[str, str],
                         already_transitioned: set[str]) -> None:
    """First-boot convenience: walk each configured model from ``proposed``
    to its target state, with every hop audited like any other transition."""
    paths = {"evaluating": ["evaluating"],
             "active": ["evaluating", "active"],
             "restricted": ["evaluating", "restricted"]}
    for model_id, target in initial.items():
        if model_id in already_transitioned:
            continue  # replayed history wins over config hints
        entry = gateway.registry.get(model_id)
        if entry.state != "proposed" or target == "proposed":
            continue
        for hop in paths.get(target, []):
            gateway.transition_lifecycle(model_id, hop, actor="startup",
                                         rationale="configured initial state")


def _apply_projection(gateway: Gateway, projection: Projection) -> None:
    from .errors import GatewayError

    for model_id, states in projection.lifecycle_states.items():
        for state in states:
            try:
                gateway.registry.transition_lifecycle(
                    model_id, state, actor="recovery", rationale="audit replay")
            except GatewayError:
                pass  # card file changed underneath the history
    for (group_id, model_id), source in sorted(projection.entitlements.items()):
        try:
            gateway.policy.grant_entitlement(group_id, model_id,
                                             actor="recovery", source=source)
        except GatewayError:
            pass  # already granted from config baseline, or model gone
    for (principal_id, model_id), version in sorted(projection.consent_valid.items()):
        acked = projection.consent_acked.get((principal_id, model_id), ())
        try:
            gateway.consent.grant_consent(principal_id, model_id, version, acked)
        except GatewayError:
            pass  # card gone or version superseded while down
    for settlement in projection.settlements:
        known = [s for s in settlement["scope_ids"]
                 if _scope_exists(gateway, s)]
        if not known:
            continue
        gateway.ledger.restore_entry(
            known, settlement["amount"], settlement["period"],
            settlement["usage_event_id"],
            meta={k: settlement[k] for k in ("user", "model", "provider")})
    for record in projection.requests.values():
        gateway.workflow.restore(record)


def _scope_exists(gateway: Gateway, scope_id: str) -> bool:
    from .errors import GatewayError
    try:
        gateway.ledger.get_scope(scope_id)
        return True
    except GatewayError:
        return False
