// Thin fetch client for the provenance server's query and tune endpoints.

import type {
  ImpactPayload,
  OverheadPayload,
  RunInfo,
  SeriesPayload,
  TuneRequest,
  TuningRow,
} from "./types.js";

export class ApiError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

export class Client {
  constructor(readonly baseUrl: string = "") {}

  private async get<T>(path: string): Promise<T> {
    const response = await fetch(this.baseUrl + path);
    if (!response.ok) {
      const body = await response.text();
      throw new ApiError(body || response.statusText, response.status);
    }
    return (await response.json()) as T;
  }

  listRuns(): Promise<{ runs: RunInfo[] }> {
    return this.get("/v1/runs");
  }

  async latestRunId(): Promise<string | null> {
    const { runs } = await this.listRuns();
    return runs.length ? runs[runs.length - 1].workflow_run_id : null;
  }

  getTunings(runId: string, user?: string): Promise<{ rows: TuningRow[] }> {
    const query = user ? `?user=${encodeURIComponent(user)}` : "";
    return this.get(`/v1/runs/${encodeURIComponent(runId)}/tunings${query}`);
  }

  getSeries(runId: string, metric: string): Promise<SeriesPayload> {
    return this.get(
      `/v1/runs/${encodeURIComponent(runId)}/series?metric=${encodeURIComponent(metric)}`
    );
  }

  getImpact(runId: string, window = 10, metrics: string[] = []): Promise<ImpactPayload> {
    const extra = metrics.length ? `&metrics=${encodeURIComponent(metrics.join(","))}` : "";
    return this.get(`/v1/runs/${encodeURIComponent(runId)}/impact?window=${window}${extra}`);
  }

  getOverhead(runId: string): Promise<OverheadPayload> {
    return this.get(`/v1/runs/${encodeURIComponent(runId)}/overhead`);
  }

  async submitTune(runId: string, request: TuneRequest): Promise<string> {
    const response = await fetch(
      this.baseUrl + `/v1/runs/${encodeURIComponent(runId)}/tune`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(request),
      }
    );
    const body = await response.text();
    if (!response.ok) throw new ApiError(body || response.statusText, response.status);
    return (JSON.parse(body) as { action_id: string }).action_id;
  }
}
