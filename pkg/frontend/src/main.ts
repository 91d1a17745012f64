/**
 * App shell: key entry, tab navigation, 10-second polling, explicit refetch
 * after every mutation. No optimistic updates: governance views always show
 * server truth.
 */

import { ApiClient } from "./api.js";
import { clear, el, errorBanner } from "./dom.js";
import { ConsoleSession, normalizeBaseUrl } from "./session.js";
import { renderApprovalsQueue } from "./views/approvals.js";
import { renderConsentPreview } from "./views/consent.js";
import { renderLifecycleBoard } from "./views/lifecycle.js";
import { renderSpendDashboard } from "./views/spend.js";

const POLL_INTERVAL_MS = 10_000;

type Tab = "approvals" | "spend" | "lifecycle" | "consent";

interface AppState {
  api: ApiClient;
  tab: Tab;
  groupBy: string;
  previewModel: string;
  timer: number | null;
}

function loginForm(onReady: (session: ConsoleSession) => void): HTMLElement {
  const url = el("input", {
    type: "text", value: "http://127.0.0.1:8080", id: "gateway-url",
  }) as HTMLInputElement;
  const key = el("input", {
    type: "password", placeholder: "admin key (memory only)", id: "admin-key",
  }) as HTMLInputElement;
  return el("form", {
    class: "login-form",
    onsubmit: (event: Event) => {
      event.preventDefault();
      if (!key.value.trim()) return;
      onReady(new ConsoleSession(normalizeBaseUrl(url.value), key.value.trim()));
    },
  },
    el("h1", {}, "Gateway console"),
    el("label", { for: "gateway-url" }, "Gateway URL"), url,
    el("label", { for: "admin-key" }, "Admin key"), key,
    el("button", { type: "submit" }, "Connect"));
}

async function renderTab(state: AppState, container: HTMLElement): Promise<void> {
  const banner = (message: string) => {
    container.prepend(errorBanner(message));
  };
  try {
    if (state.tab === "approvals") {
      const [pending, decided] = await Promise.all([
        state.api.listAccessRequests("pending"),
        state.api.listAccessRequests(),
      ]);
      clear(container);
      container.append(renderApprovalsQueue(
        pending, decided.filter((r) => r.status !== "pending"), state.api, {
          onDecided: () => renderTab(state, container),
          onError: banner,
        }));
    } else if (state.tab === "spend") {
      const [report, scopes] = await Promise.all([
        state.api.spendReport(state.groupBy),
        state.api.listScopes(),
      ]);
      clear(container);
      const picker = el("select", {
        onchange: (event: Event) => {
          state.groupBy = (event.target as HTMLSelectElement).value;
          void renderTab(state, container);
        },
      });
      for (const option of ["user", "model", "provider", "period"]) {
        const node = el("option", { value: option }, option);
        if (option === state.groupBy) node.setAttribute("selected", "selected");
        picker.append(node);
      }
      container.append(el("div", { class: "toolbar" }, "Group by ", picker));
      container.append(renderSpendDashboard(report, scopes));
    } else if (state.tab === "lifecycle") {
      const models = await state.api.listModels();
      clear(container);
      container.append(renderLifecycleBoard(models, state.api, {
        promptRationale: (modelId, target) =>
          window.prompt(`Rationale for moving ${modelId} to ${target}:`),
        onTransitioned: () => renderTab(state, container),
        onError: banner,
      }));
    } else {
      const models = await state.api.listModels();
      clear(container);
      const picker = el("select", {
        onchange: (event: Event) => {
          state.previewModel = (event.target as HTMLSelectElement).value;
          void renderTab(state, container);
        },
      });
      for (const model of models) {
        const node = el("option", { value: model.model_id }, model.model_id);
        if (model.model_id === state.previewModel) {
          node.setAttribute("selected", "selected");
        }
        picker.append(node);
      }
      container.append(el("div", { class: "toolbar" }, "Model ", picker));
      const target = state.previewModel || models[0]?.model_id;
      if (target) {
        const payload = await state.api.consentPreview(target);
        container.append(renderConsentPreview(
          payload, models.find((m) => m.model_id === target)));
      }
    }
  } catch (err) {
    clear(container);
    container.append(errorBanner(err instanceof Error ? err.message : String(err)));
  }
}

function startApp(session: ConsoleSession, root: HTMLElement): void {
  const state: AppState = {
    api: new ApiClient(session),
    tab: "approvals",
    groupBy: "user",
    previewModel: "",
    timer: null,
  };
  clear(root);
  const content = el("main", { class: "tab-content" });
  const nav = el("nav", { class: "tabs" });
  for (const tab of ["approvals", "spend", "lifecycle", "consent"] as Tab[]) {
    nav.append(el("button", {
      class: `tab-${tab}`,
      onclick: () => {
        state.tab = tab;
        void renderTab(state, content);
      },
    }, tab));
  }
  root.append(el("header", { class: "top-bar" },
    el("span", {}, `Connected to ${session.baseUrl}`), nav), content);
  void renderTab(state, content);
  state.timer = window.setInterval(() => {
    if (state.tab === "approvals" || state.tab === "spend") {
      void renderTab(state, content);
    }
  }, POLL_INTERVAL_MS);
}

export function mount(root: HTMLElement): void {
  root.append(loginForm((session) => startApp(session, root)));
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  mount(document.getElementById("app")!);
}
