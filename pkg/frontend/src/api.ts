/**
 * Typed client for the gateway admin API.
 *
 * Every displayed money value comes back from the server pre-formatted
 * (`*_display` fields); the console never derives totals itself.
 */

import type { ConsoleSession } from "./session.js";

export interface AdminModel {
  model_id: string;
  state: string;
  card_version: number;
  cost_tier: number;
  hosting_regions: string[];
  risk_flags: string[];
  consent_required: boolean;
  legal_transitions: string[];
  lifecycle: { changed_by: string; changed_at: string; rationale: string };
}

export interface ScopeUtilization {
  scope_id: string;
  kind: string;
  cap: number;
  period: string;
  settled: number;
  held: number;
  topup_count: number;
  cap_display: string;
  settled_display: string;
}

export interface SpendRow {
  key: string;
  total: number;
  request_count: number;
  total_display: string;
}

export interface SpendReport {
  group_by: string;
  period: string | null;
  data: SpendRow[];
}

export interface AccessRequestRow {
  request_id: string;
  principal_id: string;
  model_id: string;
  use_case: string;
  local_testing_evidence: string;
  expected_volume: number;
  privacy_acknowledgment: boolean;
  endorsement: { endorser_id: string; text: string } | null;
  submitted_at: string;
  status: string;
  decision: { actor: string; rationale: string; decided_at: string } | null;
  elapsed_business_days?: number;
  sla_business_days?: number;
  sla_breached?: boolean;
}

export interface EntitlementRow {
  group_id: string;
  model_id: string;
  source: string;
  granted_by: string;
  granted_at: string;
}

export interface RiskElement {
  id: string;
  statement: string;
  derived_from: string;
}

export interface DisclosurePayload {
  none_needed: boolean;
  model_id: string;
  card_version: number;
  universal?: {
    geography: string;
    key_limitations: string;
    cost_note: string | null;
  };
  required_elements?: RiskElement[];
  card_ref?: string;
}

/** Server error payloads are surfaced verbatim: code and message untouched. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly details: Record<string, unknown> = {},
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly session: ConsoleSession,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchFn(`${this.session.baseUrl}${path}`, {
      method,
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${this.session.adminKey}`,
      },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await response.json().catch(() => ({}));
    if (!response.ok) {
      const err = (payload as { error?: Record<string, unknown> }).error ?? {};
      throw new ApiError(
        response.status,
        String(err.code ?? "unknown_error"),
        String(err.message ?? `HTTP ${response.status}`),
        err,
      );
    }
    return payload as T;
  }

  health(): Promise<{ status: string; models: number }> {
    return this.request("GET", "/healthz");
  }

  listModels(): Promise<AdminModel[]> {
    return this.request<{ data: AdminModel[] }>("GET", "/admin/models")
      .then((r) => r.data);
  }

  transitionLifecycle(modelId: string, targetState: string, rationale: string) {
    return this.request<{ model_id: string; state: string }>(
      "POST", `/admin/models/${encodeURIComponent(modelId)}/lifecycle`,
      { target_state: targetState, rationale });
  }

  listScopes(): Promise<ScopeUtilization[]> {
    return this.request<{ data: ScopeUtilization[] }>("GET", "/admin/budget/scopes")
      .then((r) => r.data);
  }

  topUp(scopeId: string, amount: string, justification: string) {
    return this.request<{ scope_id: string; cap_display: string }>(
      "POST", `/admin/budget/${encodeURIComponent(scopeId)}/topup`,
      { amount, justification });
  }

  spendReport(groupBy: string, period?: string): Promise<SpendReport> {
    const query = period
      ? `?group_by=${encodeURIComponent(groupBy)}&period=${encodeURIComponent(period)}`
      : `?group_by=${encodeURIComponent(groupBy)}`;
    return this.request("GET", `/admin/reports/spend${query}`);
  }

  listAccessRequests(status?: string): Promise<AccessRequestRow[]> {
    const query = status ? `?status=${encodeURIComponent(status)}` : "";
    return this.request<{ data: AccessRequestRow[] }>(
      "GET", `/admin/access-requests${query}`).then((r) => r.data);
  }

  decideRequest(requestId: string, verdict: string, rationale: string) {
    return this.request<AccessRequestRow>(
      "POST", `/admin/access-requests/${encodeURIComponent(requestId)}/decision`,
      { verdict, rationale });
  }

  listEntitlements(): Promise<EntitlementRow[]> {
    return this.request<{ data: EntitlementRow[] }>("GET", "/admin/entitlements")
      .then((r) => r.data);
  }

  consentPreview(modelId: string): Promise<DisclosurePayload> {
    return this.request("GET", `/v1/consent/${encodeURIComponent(modelId)}`);
  }
}
