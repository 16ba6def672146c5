// Series view model: incremental merge of polled points plus tune markers.

import { formatValue } from "./format.js";
import type { SeriesPayload, SeriesView, TuningRow } from "./types.js";

/**
 * Merge freshly polled points into an existing series by t_step: re-polls
 * never duplicate a step, later values for a step win, and the result stays
 * sorted ascending.
 */
export function mergePoints(
  existing: [number, number][],
  incoming: [number, number][]
): [number, number][] {
  const byStep = new Map<number, number>(existing);
  for (const [t, v] of incoming) byStep.set(t, v);
  return [...byStep.entries()].sort((a, b) => a[0] - b[0]);
}

/** One-line label for a tune marker: the attributes it changed. */
export function tuningSummary(rows: TuningRow[]): string {
  return rows
    .map((r) => `${r.attribute}: ${formatValue(r.old_value)} → ${formatValue(r.new_value)}`)
    .join(", ");
}

export function buildSeriesView(
  previous: SeriesView | null,
  payload: SeriesPayload,
  tunings: TuningRow[]
): SeriesView {
  const byTuning = new Map<string, TuningRow[]>();
  for (const row of tunings) {
    const group = byTuning.get(row.tuning_id) ?? [];
    group.push(row);
    byTuning.set(row.tuning_id, group);
  }
  const annotations = payload.annotations
    .filter((a) => a.t_step !== null)
    .map((a) => ({
      tStep: a.t_step as number,
      tuningId: a.tuning_id,
      summary: tuningSummary(byTuning.get(a.tuning_id) ?? []),
    }));
  return {
    metric: payload.metric,
    points: mergePoints(previous?.points ?? [], payload.points),
    annotations,
  };
}

/** Detect a sustained level change around an annotation (for tests/status). */
export function levelAround(
  view: SeriesView,
  tStep: number,
  span = 3
): { before: number | null; after: number | null } {
  const byStep = new Map(view.points);
  const pick = (steps: number[]) => {
    const values = steps.map((t) => byStep.get(t)).filter((v): v is number => v !== undefined);
    return values.length ? values.reduce((a, b) => a + b, 0) / values.length : null;
  };
  const before = pick(Array.from({ length: span }, (_, i) => tStep - 1 - i));
  const after = pick(Array.from({ length: span }, (_, i) => tStep + 1 + i));
  return { before, after };
}
