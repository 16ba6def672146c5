// DOM wiring: poll the server, render the panels, relay form tunes.

import { ApiError, Client } from "./api.js";
import { renderChart } from "./chart.js";
import { buildSeriesView } from "./series.js";
import { renderImpactTable, renderOverheadTable, renderTuningsTable } from "./tables.js";
import {
  IDLE_BADGE,
  SubmissionBadge,
  TuneFormState,
  afterSubmit,
  buildTuneRequest,
  refreshBadge,
  submitEnabled,
  submitFailed,
} from "./tuneform.js";
import type { SeriesView } from "./types.js";

const POLL_INTERVAL_MS = 2000;
const CHART_METRICS = ["linear_iters", "num_elements"];

const client = new Client("");
const views = new Map<string, SeriesView>();
let runId: string | null = null;
let badge: SubmissionBadge = IDLE_BADGE;
let backoffMs = POLL_INTERVAL_MS;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function setBanner(message: string | null): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = message ?? "";
  banner.style.display = message ? "block" : "none";
}

function renderBadge(): void {
  const node = el<HTMLSpanElement>("badge");
  node.className = `badge ${badge.state}`;
  node.textContent =
    badge.state === "idle"
      ? ""
      : badge.state === "pending"
        ? `pending ${badge.actionId}`
        : badge.state === "applied"
          ? `applied ${badge.actionId}`
          : "submit failed";
}

async function pollOnce(): Promise<void> {
  runId = runId ?? (await client.latestRunId());
  if (!runId) {
    setBanner("no runs registered yet");
    return;
  }
  el<HTMLSpanElement>("run-id").textContent = runId;
  const tunings = (await client.getTunings(runId)).rows;
  for (const metric of CHART_METRICS) {
    const payload = await client.getSeries(runId, metric);
    const view = buildSeriesView(views.get(metric) ?? null, payload, tunings);
    views.set(metric, view);
    el<HTMLDivElement>(`chart-${metric}`).innerHTML = renderChart(view);
  }
  el<HTMLDivElement>("tunings").innerHTML = renderTuningsTable(tunings);
  try {
    el<HTMLDivElement>("impact").innerHTML = renderImpactTable(
      await client.getImpact(runId, 10, CHART_METRICS)
    );
  } catch (error) {
    if (!(error instanceof ApiError && error.status === 404)) throw error;
  }
  try {
    el<HTMLDivElement>("overhead").innerHTML = renderOverheadTable(
      await client.getOverhead(runId)
    );
  } catch (error) {
    if (!(error instanceof ApiError && error.status === 404)) throw error;
  }
  badge = refreshBadge(badge, tunings);
  renderBadge();
  setBanner(null);
  backoffMs = POLL_INTERVAL_MS;
}

function schedulePoll(): void {
  pollOnce()
    .catch((error) => {
      setBanner(`fetch failed: ${error instanceof Error ? error.message : error}`);
      backoffMs = Math.min(backoffMs * 2, 30_000);
    })
    .finally(() => {
      window.setTimeout(schedulePoll, backoffMs);
    });
}

function readForm(): TuneFormState {
  const rows = Array.from(
    document.querySelectorAll<HTMLTableRowElement>("#tune-rows tr")
  ).map((tr) => ({
    name: tr.dataset.name ?? "",
    dataType: (tr.dataset.type ?? "numeric") as TuneFormState["rows"][number]["dataType"],
    currentValue: tr.dataset.current,
    newValue: tr.querySelector<HTMLInputElement>("input")?.value ?? "",
  }));
  return {
    datasetTag: el<HTMLInputElement>("dataset-tag").value,
    rows,
    reason: el<HTMLInputElement>("reason").value,
    user: el<HTMLInputElement>("user").value || "dashboard",
  };
}

function refreshSubmitState(): void {
  el<HTMLButtonElement>("submit-tune").disabled = !submitEnabled(readForm());
}

async function onSubmit(event: Event): Promise<void> {
  event.preventDefault();
  if (!runId) return;
  const form = readForm();
  if (!submitEnabled(form)) return;
  const button = el<HTMLButtonElement>("submit-tune");
  button.disabled = true;
  try {
    badge = afterSubmit(await client.submitTune(runId, buildTuneRequest(form)));
  } catch (error) {
    badge = submitFailed();
    setBanner(`tune rejected: ${error instanceof Error ? error.message : error}`);
  }
  renderBadge();
  refreshSubmitState();
}

export function start(): void {
  el<HTMLFormElement>("tune-form").addEventListener("submit", onSubmit);
  el<HTMLFormElement>("tune-form").addEventListener("input", refreshSubmitState);
  refreshSubmitState();
  schedulePoll();
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  start();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", start);
}
