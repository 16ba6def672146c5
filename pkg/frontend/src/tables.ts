// HTML tables mirroring the CLI layouts.

import { formatValue } from "./format.js";
import type { ImpactPayload, OverheadPayload, TuningRow } from "./types.js";

export const TUNINGS_HEADERS = [
  "Parameter Tuning",
  "t_step",
  "Parameter Tuned",
  "Old Val",
  "New Val",
];

export function tuningsCells(rows: TuningRow[]): string[][] {
  return rows.map((r) => [
    r.tuning_id,
    r.t_step === null ? "-" : String(r.t_step),
    r.attribute,
    formatValue(r.old_value),
    formatValue(r.new_value),
  ]);
}

function htmlTable(headers: string[], rows: string[][], className: string): string {
  const head = headers.map((h) => `<th>${escapeHtml(h)}</th>`).join("");
  const body = rows
    .map((cells) => `<tr>${cells.map((c) => `<td>${escapeHtml(c)}</td>`).join("")}</tr>`)
    .join("");
  return (
    `<table class="${className}"><thead><tr>${head}</tr></thead>` +
    `<tbody>${body}</tbody></table>`
  );
}

export function renderTuningsTable(rows: TuningRow[]): string {
  return htmlTable(TUNINGS_HEADERS, tuningsCells(rows), "tunings");
}

const METRIC_LABELS: Record<string, string> = { elapsed_ms: "Time (s)" };

export function impactHeaders(payload: ImpactPayload): string[] {
  const names: string[] = [];
  for (const row of payload.rows) {
    for (const name of Object.keys(row.metrics)) {
      if (!names.includes(name)) names.push(name);
    }
  }
  const headers = ["Parameter Tuning", "t_step"];
  for (const name of names) {
    const label = METRIC_LABELS[name] ?? name;
    headers.push(`Avg ${label} Bef`, `Avg ${label} Aft`);
  }
  headers.push("Partial");
  return headers;
}

export function impactCells(payload: ImpactPayload): string[][] {
  const names = impactHeaders(payload)
    .slice(2, -1)
    .filter((_, i) => i % 2 === 0)
    .map((h) => h.replace(/^Avg /, "").replace(/ Bef$/, ""))
    .map((label) =>
      label === "Time (s)" ? "elapsed_ms" : label
    );
  return payload.rows.map((row) => {
    const cells = [row.tuning_id, String(row.t_step)];
    for (const name of names) {
      const cell = row.metrics[name] ?? { before: null, after: null };
      const scale = name === "elapsed_ms" ? 0.001 : 1;
      cells.push(fmtAvg(cell.before, scale), fmtAvg(cell.after, scale));
    }
    const partial = [
      row.partial_before ? "before" : "",
      row.partial_after ? "after" : "",
    ]
      .filter(Boolean)
      .join(",");
    cells.push(partial);
    return cells;
  });
}

function fmtAvg(value: number | null, scale: number): string {
  if (value === null) return "-";
  return formatValue(Number((value * scale).toFixed(6)));
}

export function renderImpactTable(payload: ImpactPayload): string {
  return htmlTable(impactHeaders(payload), impactCells(payload), "impact");
}

export function renderOverheadTable(payload: OverheadPayload): string {
  const order = ["comp", "prov", "ext", "s_point", "s_action"];
  const rows = order.map((name) => {
    const component = payload.components[name];
    return [name, component.seconds.toFixed(4), fmtPercent(component.percent)];
  });
  rows.push(["c(Df)", payload.total_seconds.toFixed(4), "100%"]);
  return htmlTable(["Component", "Total time (s)", "Total time (%)"], rows, "overhead");
}

function fmtPercent(value: number): string {
  if (value === 0) return "0%";
  if (value >= 0.01) {
    return `${value.toFixed(2).replace(/0+$/, "").replace(/\.$/, "")}%`;
  }
  return `${formatValue(Number(value.toPrecision(2)))}%`;
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;");
}
