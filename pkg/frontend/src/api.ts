/** Typed client for the engine's HTTP schema.
 *
 * The UI never computes physics: every number it shows comes back from
 * these calls verbatim. The engine base URL comes from the `engine` query
 * parameter (default: same origin).
 */

export interface ModelInfo {
  arch: Record<string, unknown>;
  domain: {
    spatial_bounds: [number, number][];
    param_bounds: [number, number][];
    spatial_names: string[];
    param_names: string[];
    v_min: number;
    v_max: number;
  };
  value_range: [number, number];
}

export interface SliceResponse {
  axis: string;
  index: number;
  coord: number;
  dims: [number, number];
  u_axis: string;
  v_axis: string;
  u_extent: [number, number];
  v_extent: [number, number];
  values: number[][];
  value_range: [number, number];
  seconds: number;
  reference?: number[];
}

export interface DistResponse {
  mu: number;
  sigma: number;
  seconds: number;
  mc?: {
    mean: number;
    std: number;
    n: number;
    seconds: number;
    histogram: { edges: number[]; counts: number[] };
  };
}

export interface CandidateRow {
  params_physical: number[];
  center_physical: number[];
  scale_physical: number[];
  divergence: number;
  mu: number;
  sigma: number;
  box: Record<string, unknown>;
  iteration: number;
  restart: number;
}

export interface SearchStatus {
  status: "running" | "done" | "failed";
  candidates: CandidateRow[];
  error?: string;
}

export type ParamBox = Record<string, number | [number, number]>;

export function engineBaseUrl(search: string = window.location.search): string {
  const params = new URLSearchParams(search);
  return params.get("engine") ?? "";
}

export class EngineClient {
  constructor(private base: string = "") {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await fetch(this.base + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      const detail = await resp.json().catch(() => ({}));
      throw new Error(`${path} failed (${resp.status}): ${detail.error ?? ""}`);
    }
    return resp.json() as Promise<T>;
  }

  async info(): Promise<ModelInfo> {
    const resp = await fetch(this.base + "/model/info");
    if (!resp.ok) throw new Error(`/model/info failed (${resp.status})`);
    return resp.json() as Promise<ModelInfo>;
  }

  slice(body: Record<string, unknown>): Promise<SliceResponse> {
    return this.post<SliceResponse>("/field/slice", body);
  }

  dist(body: Record<string, unknown>): Promise<DistResponse> {
    return this.post<DistResponse>("/query/dist", body);
  }

  point(body: Record<string, unknown>): Promise<{ value: number }> {
    return this.post<{ value: number }>("/query/point", body);
  }

  startSearch(body: Record<string, unknown>): Promise<{ job_id: string }> {
    return this.post<{ job_id: string }>("/search", body);
  }

  async searchStatus(jobId: string): Promise<SearchStatus> {
    const resp = await fetch(`${this.base}/search/${jobId}`);
    if (!resp.ok) throw new Error(`/search/${jobId} failed (${resp.status})`);
    return resp.json() as Promise<SearchStatus>;
  }
}
