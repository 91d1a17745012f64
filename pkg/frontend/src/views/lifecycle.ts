/**
 * Lifecycle board: models grouped by state in fixed column order. Each card
 * offers only the server-declared legal transitions; the removed column is
 * read-only by construction (its legal set is empty).
 */

import type { AdminModel, ApiClient } from "../api.js";
import { el } from "../dom.js";

export const COLUMN_ORDER = [
  "proposed", "evaluating", "active", "restricted", "deprecated", "removed",
] as const;

export function groupByState(models: AdminModel[]): Map<string, AdminModel[]> {
  const grouped = new Map<string, AdminModel[]>();
  for (const state of COLUMN_ORDER) {
    grouped.set(state, []);
  }
  for (const model of models) {
    grouped.get(model.state)?.push(model);
  }
  return grouped;
}

export interface LifecycleActions {
  promptRationale: (modelId: string, target: string) => string | null;
  onTransitioned: () => Promise<void>;
  onError: (message: string) => void;
}

function modelCard(model: AdminModel, api: ApiClient,
                   actions: LifecycleActions): HTMLElement {
  const card = el("article", { class: "model-card", "data-model-id": model.model_id },
    el("strong", {}, model.model_id),
    el("span", { class: "card-version" }, `card v${model.card_version}`),
    el("span", { class: "cost-tier" }, "€".repeat(model.cost_tier)),
    model.risk_flags.length > 0
      ? el("span", { class: "risk-flags", title: model.risk_flags.join(", ") },
        `${model.risk_flags.length} risk flag${model.risk_flags.length === 1 ? "" : "s"}`)
      : null);
  const buttons = el("div", { class: "transition-buttons" });
  for (const target of model.legal_transitions) {
    buttons.append(el("button", {
      class: `transition-${target}`,
      onclick: () => {
        const rationale = actions.promptRationale(model.model_id, target);
        if (rationale === null || rationale.trim() === "") {
          actions.onError("lifecycle transitions need a rationale");
          return;
        }
        api.transitionLifecycle(model.model_id, target, rationale.trim())
          .then(() => actions.onTransitioned())
          .catch((err) => actions.onError(
            err instanceof Error ? err.message : String(err)));
      },
    }, target));
  }
  card.append(buttons);
  return card;
}

export function renderLifecycleBoard(models: AdminModel[], api: ApiClient,
                                     actions: LifecycleActions): HTMLElement {
  const root = el("section", { class: "lifecycle-board" },
    el("h2", {}, "Model lifecycle"));
  const columns = el("div", { class: "board-columns" });
  const grouped = groupByState(models);
  for (const state of COLUMN_ORDER) {
    const column = el("div", { class: `board-column column-${state}`, "data-state": state },
      el("h3", {}, state));
    for (const model of grouped.get(state) ?? []) {
      column.append(modelCard(model, api, actions));
    }
    columns.append(column);
  }
  root.append(columns);
  return root;
}
