"""Governed multi-provider AI gateway.

Policy as configuration: scoped keys, tiered budgets with two-phase
admission, EU-first routing, card-driven consent gating, and a
content-free audit trail, in front of interchangeable model providers.
"""

from .budget import BudgetLedger, BudgetScope, estimate_cost, micro_to_display, parse_amount
from .config import GatewayConfig, build_gateway, load_config, parse_config
from .consent import ConsentService, derive_consent_config
from .policy import Decision, Endpoint, PolicyEngine, Principal, PrincipalStore
from .proxy import ChatRequest, Gateway, KeyStore, ScopedKey, UsageEvent
from .registry import ModelCard, Pricing, Provider, Region, Registry, validate_card
from .workflow import AccessRequestService

__version__ = "0.1.0"

__all__ = [
    "AccessRequestService",
    "BudgetLedger",
    "BudgetScope",
    "ChatRequest",
    "ConsentService",
    "Decision",
    "Endpoint",
    "Gateway",
    "GatewayConfig",
    "KeyStore",
    "ModelCard",
    "PolicyEngine",
    "Pricing",
    "Principal",
    "PrincipalStore",
    "Provider",
    "Region",
    "Registry",
    "ScopedKey",
    "UsageEvent",
    "build_gateway",
    "derive_consent_config",
    "estimate_cost",
    "load_config",
    "micro_to_display",
    "parse_amount",
    "parse_config",
    "validate_card",
]
