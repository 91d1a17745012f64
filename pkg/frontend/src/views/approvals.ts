/**
 * Approvals queue: pending access requests with full submitted fields, an
 * SLA countdown, and approve/deny actions that demand a rationale (the
 * client mirrors the server rule instead of round-tripping empty input).
 */

import type { AccessRequestRow, ApiClient } from "../api.js";
import { el } from "../dom.js";

export interface SlaBadge {
  label: string;
  breached: boolean;
}

/** Countdown text from the server's SLA fields; day math only, no money. */
export function slaBadge(row: AccessRequestRow): SlaBadge {
  if (row.sla_business_days === undefined || row.elapsed_business_days === undefined) {
    return { label: "SLA unknown", breached: false };
  }
  if (row.sla_breached) {
    return { label: `SLA breached (${row.elapsed_business_days}d elapsed)`, breached: true };
  }
  const left = row.sla_business_days - row.elapsed_business_days;
  return { label: `${left} business day${left === 1 ? "" : "s"} left`, breached: false };
}

export function rationaleIsValid(text: string): boolean {
  return text.trim().length > 0;
}

export interface ApprovalsActions {
  onDecided: () => Promise<void>;
  onError: (message: string) => void;
}

function requestCard(row: AccessRequestRow, api: ApiClient,
                     actions: ApprovalsActions): HTMLElement {
  const badge = slaBadge(row);
  const rationale = el("textarea", {
    class: "rationale-input",
    placeholder: "Decision rationale (required)",
    rows: "2",
  }) as HTMLTextAreaElement;

  const decide = async (verdict: string) => {
    if (!rationaleIsValid(rationale.value)) {
      actions.onError("a rationale is required before deciding");
      return;
    }
    try {
      await api.decideRequest(row.request_id, verdict, rationale.value.trim());
      await actions.onDecided();
    } catch (err) {
      actions.onError(err instanceof Error ? err.message : String(err));
    }
  };

  return el("article", { class: "request-card", "data-request-id": row.request_id },
    el("header", {},
      el("strong", {}, `${row.principal_id} requests ${row.model_id}`),
      el("span", { class: badge.breached ? "sla-badge breached" : "sla-badge" },
        badge.label)),
    el("dl", { class: "request-fields" },
      el("dt", {}, "Use case"), el("dd", {}, row.use_case),
      el("dt", {}, "Local testing"), el("dd", {}, row.local_testing_evidence),
      el("dt", {}, "Expected volume"), el("dd", {}, `${row.expected_volume} tokens/month`),
      el("dt", {}, "Privacy acknowledged"), el("dd", {}, row.privacy_acknowledgment ? "yes" : "no"),
      el("dt", {}, "Endorsement"),
      el("dd", {}, row.endorsement
        ? `${row.endorsement.endorser_id}: ${row.endorsement.text}`
        : "none"),
      el("dt", {}, "Submitted"), el("dd", {}, row.submitted_at)),
    rationale,
    el("div", { class: "actions" },
      el("button", { class: "approve", onclick: () => void decide("approved") }, "Approve"),
      el("button", { class: "deny", onclick: () => void decide("denied") }, "Deny"),
      el("button", { class: "needs-info", onclick: () => void decide("needs_info") },
        "Request info")));
}

function decidedRow(row: AccessRequestRow): HTMLElement {
  return el("li", { class: `decided-row status-${row.status}` },
    el("span", { class: "status-badge", title: row.decision?.rationale ?? "" },
      row.status),
    ` ${row.principal_id} / ${row.model_id}`,
    row.decision ? el("em", {}, ` — ${row.decision.rationale}`) : null);
}

export function renderApprovalsQueue(pending: AccessRequestRow[],
                                     decided: AccessRequestRow[],
                                     api: ApiClient,
                                     actions: ApprovalsActions): HTMLElement {
  const root = el("section", { class: "approvals-queue" },
    el("h2", {}, `Approvals queue (${pending.length} pending)`));
  if (pending.length === 0) {
    root.append(el("p", { class: "empty-state" }, "No pending access requests."));
  }
  for (const row of pending) {
    root.append(requestCard(row, api, actions));
  }
  if (decided.length > 0) {
    root.append(el("h3", {}, "Recently decided"));
    const list = el("ul", { class: "decided-list" });
    for (const row of decided.slice(-10).reverse()) {
      list.append(decidedRow(row));
    }
    root.append(list);
  }
  return root;
}
