"""Typed error taxonomy shared by every gateway module.

Every error carries a stable machine-readable ``code`` so HTTP handlers,
the CLI, and clients can branch without parsing prose.
"""

from __future__ import annotations


class GatewayError(Exception):
    """Base class; ``code`` is stable across releases."""

    code = "gateway_error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.__class__.__name__)
        self.details = details


# -- registry ---------------------------------------------------------------

class ValidationFailed(GatewayError):
    code = "validation_failed"

    def __init__(self, violations):
        super().__init__(f"card invalid: {'; '.join(violations)}", violations=list(violations))
        self.violations = list(violations)


class StaleVersion(GatewayError):
    code = "stale_version"


class IllegalTransition(GatewayError):
    code = "illegal_transition"


class UnknownModel(GatewayError):
    code = "unknown_model"


# -- policy -----------------------------------------------------------------

class UnknownPrincipal(GatewayError):
    code = "unknown_principal"


class NotAuthorized(GatewayError):
    code = "not_authorized"


class Duplicate(GatewayError):
    code = "duplicate"


class NoEndpoint(GatewayError):
    code = "no_endpoint"


# -- consent ----------------------------------------------------------------

class IncompleteAcknowledgment(GatewayError):
    code = "incomplete_acknowledgment"

    def __init__(self, missing):
        super().__init__(f"missing acknowledgments: {', '.join(missing)}", missing=list(missing))
        self.missing = list(missing)


class StaleCardVersion(GatewayError):
    code = "stale_card_version"


class NothingToRevoke(GatewayError):
    code = "nothing_to_revoke"


# -- budget -----------------------------------------------------------------

class BudgetExceeded(GatewayError):
    code = "budget_exceeded"

    def __init__(self, scope_id: str, message: str = ""):
        super().__init__(message or f"budget exceeded on scope {scope_id}", scope_id=scope_id)
        self.scope_id = scope_id


class UnknownScope(GatewayError):
    code = "unknown_scope"


class UnknownReservation(GatewayError):
    code = "unknown_reservation"


class AlreadyTerminal(GatewayError):
    code = "already_terminal"


class TopUpLimitReached(GatewayError):
    code = "topup_limit_reached"


class EmptyJustification(GatewayError):
    code = "empty_justification"


class Overflow(GatewayError):
    code = "overflow"


# -- proxy ------------------------------------------------------------------

class InvalidKey(GatewayError):
    code = "invalid_key"


class UnknownKey(GatewayError):
    code = "unknown_key"


class AccessDenied(GatewayError):
    code = "access_denied"


class ConsentRequired(GatewayError):
    code = "consent_required"

    def __init__(self, missing):
        super().__init__(f"consent required: {', '.join(missing)}", missing=list(missing))
        self.missing = list(missing)


class ModelUnavailable(GatewayError):
    code = "model_unavailable"


class UpstreamError(GatewayError):
    code = "upstream_error"

    def __init__(self, message: str = "", status: int | None = None):
        super().__init__(message or "upstream failure", status=status)
        self.status = status


class Timeout(UpstreamError):
    code = "upstream_timeout"


# -- workflow ---------------------------------------------------------------

class IncompleteRequest(GatewayError):
    code = "incomplete_request"

    def __init__(self, missing):
        super().__init__(f"missing fields: {', '.join(missing)}", missing=list(missing))
        self.missing = list(missing)


class ModelNotRestricted(GatewayError):
    code = "model_not_restricted"


class UnknownRequest(GatewayError):
    code = "unknown_request"


class AlreadyDecided(GatewayError):
    code = "already_decided"


class EmptyRationale(GatewayError):
    code = "empty_rationale"


# -- audit / config ---------------------------------------------------------

class StorageFailure(GatewayError):
    code = "storage_failure"


class ConfigInvalid(GatewayError):
    code = "config_invalid"

    def __init__(self, violations):
        super().__init__("config invalid:\n  " + "\n  ".join(violations), violations=list(violations))
        self.violations = list(violations)
