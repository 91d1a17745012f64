/**
 * Consent preview: the disclosure modal exactly as a fresh client receives
 * it — universal disclosure triad, one checkbox per required element, and
 * the full-card link. A version indicator appears when the preview was
 * fetched against an older card than the catalog now carries.
 */

import type { AdminModel, DisclosurePayload } from "../api.js";
import { el } from "../dom.js";

export function previewIsStale(payload: DisclosurePayload,
                               model: AdminModel | undefined): boolean {
  return model !== undefined && payload.card_version !== model.card_version;
}

export function renderConsentPreview(payload: DisclosurePayload,
                                     model: AdminModel | undefined): HTMLElement {
  const root = el("section", { class: "consent-preview" },
    el("h2", {}, `Consent preview: ${payload.model_id}`));

  if (previewIsStale(payload, model)) {
    root.append(el("div", { class: "stale-indicator", role: "status" },
      `Preview is for card v${payload.card_version}; the catalog now carries ` +
      `v${model!.card_version}. Refresh to see the current modal.`));
  }

  if (payload.none_needed) {
    root.append(el("p", { class: "no-modal-notice" },
      "No consent modal required: this model carries no acknowledgeable risk elements."));
    return root;
  }

  const universal = payload.universal!;
  root.append(el("div", { class: "universal-disclosure" },
    el("p", { class: "geography" }, universal.geography),
    el("p", { class: "limitations" }, universal.key_limitations),
    universal.cost_note
      ? el("p", { class: "cost-note" }, universal.cost_note)
      : null));

  const checklist = el("ul", { class: "element-checklist" });
  for (const element of payload.required_elements ?? []) {
    checklist.append(el("li", { class: "element", "data-element-id": element.id },
      el("input", { type: "checkbox", id: `ack-${element.id}`, disabled: "true" }),
      el("label", { for: `ack-${element.id}` }, element.statement)));
  }
  root.append(checklist);
  root.append(el("a", { class: "card-link", href: payload.card_ref ?? "#" },
    "Open the full model card"));
  return root;
}
