// Tune-submission form model: row validation, request building, badges.

import { parseTypedValue } from "./format.js";
import type { TuneRequest, TuningRow } from "./types.js";

export type AttributeType = "numeric" | "textual" | "boolean" | "array";

export interface ParameterRow {
  name: string;
  dataType: AttributeType;
  currentValue: unknown;
  newValue: string; // raw text from the input, blank = untouched
}

export interface TuneFormState {
  datasetTag: string;
  rows: ParameterRow[];
  reason: string;
  user: string;
}

export interface RowValidation {
  touched: boolean;
  valid: boolean;
  value?: unknown;
}

export function validateRow(row: ParameterRow): RowValidation {
  if (row.newValue.trim() === "") return { touched: false, valid: true };
  const parsed = parseTypedValue(row.newValue, row.dataType);
  return parsed.ok
    ? { touched: true, valid: true, value: parsed.value }
    : { touched: true, valid: false };
}

/** Submit is enabled only when >=1 row is touched and every touched row parses. */
export function submitEnabled(form: TuneFormState): boolean {
  const checks = form.rows.map(validateRow);
  return checks.some((c) => c.touched) && checks.every((c) => c.valid);
}

export function buildTuneRequest(form: TuneFormState): TuneRequest {
  if (!submitEnabled(form)) throw new Error("form is not submittable");
  const eta: Record<string, unknown> = {};
  for (const row of form.rows) {
    const check = validateRow(row);
    if (check.touched) eta[row.name] = check.value;
  }
  const request: TuneRequest = { dataset_tag: form.datasetTag, eta, user: form.user };
  if (form.reason.trim()) request.reason = form.reason.trim();
  return request;
}

export type BadgeState = "idle" | "pending" | "applied" | "failed";

export interface SubmissionBadge {
  actionId: string | null;
  state: BadgeState;
}

export const IDLE_BADGE: SubmissionBadge = { actionId: null, state: "idle" };

export function afterSubmit(actionId: string): SubmissionBadge {
  return { actionId, state: "pending" };
}

export function submitFailed(): SubmissionBadge {
  return { actionId: null, state: "failed" };
}

/** Flip pending to applied once the tuning shows up in the tunings query. */
export function refreshBadge(badge: SubmissionBadge, tunings: TuningRow[]): SubmissionBadge {
  if (badge.state !== "pending" || badge.actionId === null) return badge;
  const applied = tunings.some((row) => row.tuning_id === badge.actionId);
  return applied ? { ...badge, state: "applied" } : badge;
}
