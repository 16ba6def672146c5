// Wire shapes served by the provenance server (field names match the API).

export interface TuningRow {
  tuning_id: string;
  t_step: number | null;
  attribute: string;
  old_value: unknown;
  new_value: unknown;
}

export interface SeriesPayload {
  metric: string;
  points: [number, number][];
  annotations: { t_step: number | null; tuning_id: string }[];
}

export interface ImpactMetricCell {
  before: number | null;
  after: number | null;
}

export interface ImpactRow {
  tuning_id: string;
  t_step: number;
  metrics: Record<string, ImpactMetricCell>;
  partial_before: boolean;
  partial_after: boolean;
}

export interface ImpactPayload {
  window: number;
  rows: ImpactRow[];
}

export interface OverheadPayload {
  components: Record<string, { seconds: number; percent: number }>;
  total_seconds: number;
  overhead_seconds: number;
}

export interface RunInfo {
  workflow_run_id: string;
  dataflow_tag: string;
  execution_model: string;
  registered_at: number;
  closed: boolean;
}

export interface SeriesAnnotation {
  tStep: number;
  tuningId: string;
  summary: string;
}

export interface SeriesView {
  metric: string;
  points: [number, number][];
  annotations: SeriesAnnotation[];
}

export interface TuneRequest {
  dataset_tag: string;
  eta: Record<string, unknown>;
  user: string;
  reason?: string;
}
