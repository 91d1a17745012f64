"""HTTP surface: client API under /v1, governance API under /admin.

Thin views over the Gateway. Admin routes demand a scoped key whose
principal holds the admin role; client routes accept any live scoped key.
Streaming responses are relayed as server-sent events.
"""

from __future__ import annotations

import json
from datetime import datetime
from typing import Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from . import errors
from .budget import BudgetScope, micro_to_display, parse_amount
from .proxy import ChatRequest, ChatResult, Gateway
from .registry import LEGAL_TRANSITIONS, card_from_dict, card_to_dict, validate_card

_STATUS_BY_CODE = {
    "invalid_key": 401,
    "not_authorized": 403,
    "access_denied": 403,
    "consent_required": 403,
    "budget_exceeded": 402,
    "unknown_model": 404,
    "model_unavailable": 404,
    "unknown_principal": 404,
    "unknown_scope": 404,
    "unknown_key": 404,
    "unknown_request": 404,
    "unknown_reservation": 404,
    "no_endpoint": 404,
    "nothing_to_revoke": 404,
    "duplicate": 409,
    "stale_version": 409,
    "stale_card_version": 409,
    "already_decided": 409,
    "already_terminal": 409,
    "topup_limit_reached": 409,
    "illegal_transition": 409,
    "model_not_restricted": 409,
    "validation_failed": 422,
    "incomplete_acknowledgment": 422,
    "incomplete_request": 422,
    "empty_justification": 422,
    "empty_rationale": 422,
    "config_invalid": 422,
    "overflow": 400,
    "upstream_error": 502,
    "upstream_timeout": 504,
    "storage_failure": 500,
}


def _error_response(exc: errors.GatewayError) -> JSONResponse:
    status = _STATUS_BY_CODE.get(exc.code, 400)
    body = {"error": {"code": exc.code, "message": str(exc), **exc.details}}
    return JSONResponse(status_code=status, content=body)


def create_app(gateway: Gateway) -> FastAPI:
    app = FastAPI(title="aigateway", docs_url=None, redoc_url=None)
    app.state.gateway = gateway
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"])

    @app.exception_handler(errors.GatewayError)
    async def handle_gateway_error(request: Request, exc: errors.GatewayError):
        return _error_response(exc)

    def bearer_secret(authorization: Optional[str] = Header(default=None)) -> str:
        if not authorization or not authorization.startswith("Bearer "):
            raise errors.InvalidKey("missing bearer key")
        return authorization[len("Bearer "):]

    def caller_key(authorization: Optional[str] = Header(default=None)):
        return gateway.keys.authenticate(bearer_secret(authorization))

    def admin_principal(authorization: Optional[str] = Header(default=None)) -> str:
        key = caller_key(authorization)
        principal = gateway.principals.get(key.principal_id)
        if not principal.is_admin:
            raise errors.NotAuthorized(f"{principal.id} lacks the admin role")
        return principal.id

    # -- health ------------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "models": len(gateway.registry.models())}

    # -- client API ----------------------------------------------------------------

    @app.post("/v1/chat/completions")
    def chat_completions(body: dict, authorization: Optional[str] = Header(default=None)):
        secret = bearer_secret(authorization)
        request = ChatRequest(
            model_id=str(body.get("model", "")),
            messages=body.get("messages", []),
            max_output_tokens=body.get("max_tokens") or body.get("max_output_tokens"),
            stream=bool(body.get("stream", False)),
        )
        result = gateway.handle_chat(secret, request)
        if isinstance(result, ChatResult):
            return JSONResponse(content=result.response)

        def sse():
            for chunk in result.chunks:
                payload = {"choices": [{"index": 0, "delta": {"content": chunk}}],
                           "model": result.model_id}
                yield f"data: {json.dumps(payload, ensure_ascii=False)}\n\n"
            if result.metadata is not None:
                yield f"data: {json.dumps({'gateway': result.metadata})}\n\n"
            yield "data: [DONE]\n\n"

        return StreamingResponse(sse(), media_type="text/event-stream")

    @app.get("/v1/models")
    def list_models(key=Depends(caller_key)):
        summaries = gateway.list_models(key.principal_id)
        return {"data": [s.__dict__ for s in summaries]}

    @app.get("/v1/models/{model_id}/card")
    def get_card(model_id: str, key=Depends(caller_key)):
        return card_to_dict(gateway.registry.get_card(model_id))

    @app.get("/v1/consent")
    def list_consents(key=Depends(caller_key)):
        records = gateway.consent.list_consents(key.principal_id)
        return {"data": [{
            "model_id": r.model_id,
            "card_version": r.card_version,
            "acknowledged": sorted(r.acknowledged),
            "granted_at": r.granted_at.isoformat(),
            "revoked_at": r.revoked_at.isoformat() if r.revoked_at else None,
            "status": "revoked" if r.revoked else (
                "valid" if gateway.consent.valid_record(key.principal_id, r.model_id) is r
                else "superseded"),
        } for r in records]}

    @app.get("/v1/consent/{model_id}")
    def get_disclosure(model_id: str, key=Depends(caller_key)):
        payload = gateway.consent.get_disclosure(key.principal_id, model_id)
        if payload.none_needed:
            return {"none_needed": True, "model_id": model_id,
                    "card_version": payload.card_version}
        return {
            "none_needed": False,
            "model_id": model_id,
            "card_version": payload.card_version,
            "universal": {
                "geography": payload.universal.geography,
                "key_limitations": payload.universal.key_limitations,
                "cost_note": payload.universal.cost_note,
            },
            "required_elements": [
                {"id": e.id, "statement": e.statement, "derived_from": e.derived_from}
                for e in payload.missing_elements],
            "card_ref": payload.card_ref,
        }

    @app.post("/v1/consent/{model_id}")
    def grant_consent(model_id: str, body: dict, key=Depends(caller_key)):
        record = gateway.grant_consent(
            key.principal_id, model_id,
            card_version=int(body.get("card_version", 0)),
            acknowledged_ids=body.get("acknowledged", []))
        return {"model_id": model_id, "card_version": record.card_version,
                "granted_at": record.granted_at.isoformat(),
                "acknowledged": sorted(record.acknowledged)}

    @app.delete("/v1/consent/{model_id}")
    def revoke_consent(model_id: str, key=Depends(caller_key)):
        record = gateway.revoke_consent(key.principal_id, model_id)
        return {"model_id": model_id, "revoked_at": record.revoked_at.isoformat()}

    @app.post("/v1/access-requests")
    def submit_access_request(body: dict, key=Depends(caller_key)):
        request = gateway.submit_access_request(
            key.principal_id, str(body.get("model_id", "")),
            use_case=str(body.get("use_case", "")),
            local_testing_evidence=str(body.get("local_testing_evidence", "")),
            expected_volume=int(body.get("expected_volume", 0)),
            privacy_acknowledgment=bool(body.get("privacy_acknowledgment", False)),
            endorsement=body.get("endorsement"))
        return _request_json(request)

    @app.get("/v1/access-requests/mine")
    def my_access_requests(key=Depends(caller_key)):
        rows = gateway.workflow.list_requests(principal_id=key.principal_id)
        return {"data": [_request_json(r) for r in rows]}

    # -- admin: models ---------------------------------------------------------------

    @app.get("/admin/models")
    def admin_models(actor: str = Depends(admin_principal)):
        out = []
        for entry in gateway.registry.models():
            card = entry.card
            out.append({
                "model_id": card.model_id,
                "state": entry.state,
                "card_version": card.card_version,
                "cost_tier": card.pricing.cost_tier,
                "hosting_regions": [r.country_code for r in card.hosting_regions],
                "risk_flags": sorted(card.risk_flags),
                "consent_required": gateway.consent.config_for(card.model_id).modal_required,
                "legal_transitions": sorted(LEGAL_TRANSITIONS[entry.state]),
                "lifecycle": {
                    "changed_by": entry.lifecycle.changed_by,
                    "changed_at": entry.lifecycle.changed_at.isoformat(),
                    "rationale": entry.lifecycle.rationale,
                },
            })
        return {"data": out}

    @app.post("/admin/models")
    def admin_register_card(body: dict, actor: str = Depends(admin_principal)):
        card = card_from_dict(body.get("card", body))
        report = validate_card(card)
        if report:
            raise errors.ValidationFailed(report)
        model_id = gateway.register_card(card, actor=actor,
                                         material=bool(body.get("material", True)))
        return {"model_id": model_id, "state": gateway.registry.get(model_id).state}

    @app.post("/admin/models/{model_id}/lifecycle")
    def admin_lifecycle(model_id: str, body: dict, actor: str = Depends(admin_principal)):
        lifecycle = gateway.transition_lifecycle(
            model_id, str(body.get("target_state", "")), actor,
            str(body.get("rationale", "")))
        return {"model_id": model_id, "state": lifecycle.state,
                "changed_at": lifecycle.changed_at.isoformat()}

    # -- admin: entitlements ------------------------------------------------------------

    @app.post("/admin/entitlements")
    def admin_grant_entitlement(body: dict, actor: str = Depends(admin_principal)):
        entitlement = gateway.grant_entitlement(
            str(body.get("group_id", "")), str(body.get("model_id", "")),
            actor=actor, source=str(body.get("source", "manual")))
        return {"group_id": entitlement.group_id, "model_id": entitlement.model_id,
                "source": entitlement.source,
                "granted_at": entitlement.granted_at.isoformat()}

    @app.get("/admin/entitlements")
    def admin_list_entitlements(actor: str = Depends(admin_principal)):
        return {"data": [{
            "group_id": e.group_id, "model_id": e.model_id, "source": e.source,
            "granted_by": e.granted_by, "granted_at": e.granted_at.isoformat(),
        } for e in gateway.policy.entitlements()]}

    # -- admin: budget --------------------------------------------------------------------

    @app.get("/admin/budget/scopes")
    def admin_scopes(actor: str = Depends(admin_principal)):
        rows = []
        for scope in gateway.ledger.scopes():
            info = gateway.ledger.utilization(scope.id)
            info["cap_display"] = micro_to_display(info["cap"])
            info["settled_display"] = micro_to_display(info["settled"])
            rows.append(info)
        return {"data": rows}

    @app.post("/admin/budget/scopes")
    def admin_add_scope(body: dict, actor: str = Depends(admin_principal)):
        scope = BudgetScope(
            id=str(body.get("id", "")), kind=str(body.get("kind", "")),
            cap=parse_amount(body.get("cap", 0)),
            period=str(body.get("period", "monthly")),
            parent=body.get("parent"))
        gateway.ledger.add_scope(scope)
        return {"id": scope.id, "cap": scope.cap}

    @app.post("/admin/budget/{scope_id}/topup")
    def admin_topup(scope_id: str, body: dict, actor: str = Depends(admin_principal)):
        new_cap = gateway.top_up(
            scope_id, parse_amount(body.get("amount", 0)),
            justification=str(body.get("justification", "")), actor=actor)
        return {"scope_id": scope_id, "cap": new_cap,
                "cap_display": micro_to_display(new_cap)}

    @app.get("/admin/reports/spend")
    def admin_spend_report(group_by: str = Query(...), period: Optional[str] = Query(default=None),
                           actor: str = Depends(admin_principal)):
        rows = gateway.ledger.spend_report(group_by, period)
        for row in rows:
            row["total_display"] = micro_to_display(row["total"])
        return {"group_by": group_by, "period": period, "data": rows}

    # -- admin: access requests --------------------------------------------------------------

    @app.get("/admin/access-requests")
    def admin_requests(status: Optional[str] = Query(default=None),
                       actor: str = Depends(admin_principal)):
        sla = {row.request_id: row for row in gateway.workflow.sla_report()}
        out = []
        for request in gateway.workflow.list_requests(status=status):
            row = _request_json(request)
            sla_row = sla.get(request.id)
            if sla_row is not None:
                row["elapsed_business_days"] = sla_row.elapsed_business_days
                row["sla_business_days"] = sla_row.sla_business_days
                row["sla_breached"] = sla_row.breached
            out.append(row)
        return {"data": out}

    @app.post("/admin/access-requests/{request_id}/decision")
    def admin_decide(request_id: str, body: dict, actor: str = Depends(admin_principal)):
        request = gateway.decide_access_request(
            request_id, str(body.get("verdict", "")),
            rationale=str(body.get("rationale", "")), actor=actor)
        return _request_json(request)

    # -- admin: keys -----------------------------------------------------------------------

    @app.post("/admin/keys")
    def admin_issue_key(body: dict, actor: str = Depends(admin_principal)):
        expires_raw = body.get("expires_at")
        expires = datetime.fromisoformat(expires_raw) if expires_raw else None
        allowed = body.get("allowed_models")
        key, secret = gateway.issue_key(
            str(body.get("principal_id", "")),
            None if allowed in (None, "*") else list(allowed),
            str(body.get("budget_scope", "")), expires, actor=actor,
            routing_constraint=body.get("routing_constraint"))
        # the plaintext secret appears in this response and nowhere else
        return {"key_id": key.key_id, "secret": secret}

    @app.get("/admin/keys")
    def admin_list_keys(actor: str = Depends(admin_principal)):
        return {"data": [k.to_public_dict() for k in gateway.keys.keys()]}

    @app.post("/admin/keys/{key_id}/revoke")
    def admin_revoke_key(key_id: str, actor: str = Depends(admin_principal)):
        key = gateway.revoke_key(key_id, actor=actor)
        return {"key_id": key.key_id, "revoked": key.revoked}

    # -- admin: audit -----------------------------------------------------------------------

    @app.get("/admin/audit")
    def admin_audit(correlation: Optional[str] = None, actor_filter: Optional[str] = Query(default=None, alias="actor"),
                    action: Optional[str] = None,
                    from_ts: Optional[str] = Query(default=None, alias="from"),
                    to_ts: Optional[str] = Query(default=None, alias="to"),
                    caller: str = Depends(admin_principal)):
        events = gateway.audit.query(
            correlation_id=correlation, actor=actor_filter, action=action,
            since=datetime.fromisoformat(from_ts) if from_ts else None,
            until=datetime.fromisoformat(to_ts) if to_ts else None)
        return {"data": [e.to_json() for e in events]}

    return app


def _request_json(request) -> dict:
    return {
        "request_id": request.id,
        "principal_id": request.principal_id,
        "model_id": request.model_id,
        "use_case": request.use_case,
        "local_testing_evidence": request.local_testing_evidence,
        "expected_volume": request.expected_volume,
        "privacy_acknowledgment": request.privacy_acknowledgment,
        "endorsement": request.endorsement,
        "submitted_at": request.submitted_at.isoformat(),
        "status": request.status,
        "decision": None if request.decision is None else {
            "actor": request.decision.actor,
            "rationale": request.decision.rationale,
            "decided_at": request.decision.decided_at.isoformat(),
        },
    }
