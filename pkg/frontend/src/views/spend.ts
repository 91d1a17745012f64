/**
 * Spend dashboard: report table plus bar chart, and per-scope utilization
 * bars with warning coloring at 80%.
 *
 * Every number shown is a server-provided string (total_display,
 * cap_display, settled_display, request_count). Raw micro integers are used
 * only for bar geometry and the warning predicate, never rendered.
 */

import type { ScopeUtilization, SpendReport, SpendRow } from "../api.js";
import { el } from "../dom.js";

export const WARNING_FRACTION = 0.8;

export function barWidthPercent(row: SpendRow, rows: SpendRow[]): number {
  const max = Math.max(...rows.map((r) => r.total), 1);
  return Math.max(1, Math.round((row.total / max) * 100));
}

export function utilizationFraction(scope: ScopeUtilization): number {
  if (scope.cap <= 0) return 0;
  return (scope.settled + scope.held) / scope.cap;
}

export function scopeWarning(scope: ScopeUtilization): boolean {
  return utilizationFraction(scope) >= WARNING_FRACTION;
}

export function renderSpendDashboard(report: SpendReport,
                                     scopes: ScopeUtilization[]): HTMLElement {
  const root = el("section", { class: "spend-dashboard" },
    el("h2", {}, `Spend by ${report.group_by}` +
      (report.period ? ` (${report.period})` : "")));

  if (report.data.length === 0) {
    root.append(el("p", { class: "empty-state" },
      "No spend recorded for this grouping yet."));
  } else {
    const table = el("table", { class: "spend-table" },
      el("thead", {}, el("tr", {},
        el("th", {}, report.group_by),
        el("th", {}, "total"),
        el("th", {}, "requests"))));
    const body = el("tbody", {});
    for (const row of report.data) {
      body.append(el("tr", { "data-key": row.key },
        el("td", {}, row.key),
        el("td", { class: "amount" }, row.total_display),
        el("td", { class: "count" }, String(row.request_count))));
    }
    table.append(body);
    root.append(table);

    const chart = el("div", { class: "bar-chart" });
    for (const row of report.data) {
      chart.append(el("div", { class: "bar-row" },
        el("span", { class: "bar-label" }, row.key),
        el("div", {
          class: "bar",
          style: `width: ${barWidthPercent(row, report.data)}%`,
          title: row.total_display,
        }),
        el("span", { class: "bar-value" }, row.total_display)));
    }
    root.append(chart);
  }

  root.append(el("h3", {}, "Scope utilization"));
  const list = el("div", { class: "scope-list" });
  for (const scope of scopes) {
    const fraction = utilizationFraction(scope);
    list.append(el("div", {
      class: scopeWarning(scope) ? "scope-row warning" : "scope-row",
      "data-scope-id": scope.scope_id,
    },
      el("span", { class: "scope-name" }, `${scope.scope_id} (${scope.kind})`),
      el("div", { class: "utilization-track" },
        el("div", {
          class: "utilization-fill",
          style: `width: ${Math.min(100, Math.round(fraction * 100))}%`,
        })),
      el("span", { class: "scope-numbers" },
        `${scope.settled_display} of ${scope.cap_display}`)));
  }
  root.append(list);
  return root;
}
