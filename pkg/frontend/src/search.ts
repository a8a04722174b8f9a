/** Search console: target editor, job polling, sortable candidate table. */

import { CandidateRow, EngineClient, SearchStatus } from "./api.js";

export interface GaussianTarget {
  kind: "gaussian";
  mu: number;
  sigma: number;
}

export interface HistogramTarget {
  kind: "histogram";
  edges: number[];
  counts: number[];
}

export type Target = GaussianTarget | HistogramTarget;

export function targetToJson(t: Target): Record<string, unknown> {
  if (t.kind === "gaussian") return { gaussian: { mu: t.mu, sigma: t.sigma } };
  return { histogram: { edges: t.edges, counts: t.counts } };
}

export interface SearchConfig {
  mode: "joint" | "param" | "spatial";
  iters: number;
  restarts: number;
  seed: number;
  freezeScale: boolean;
  initScale: number;
  lr: number;
}

export type SortKey = "divergence" | "mu" | "sigma" | "iteration";

export interface ConsoleState {
  jobId: string | null;
  status: "idle" | "running" | "done" | "failed";
  candidates: CandidateRow[];
  error: string | null;
  sortKey: SortKey;
  ascending: boolean;
  selected: number | null;
}

export class SearchConsole {
  state: ConsoleState = {
    jobId: null, status: "idle", candidates: [], error: null,
    sortKey: "divergence", ascending: true, selected: null,
  };
  onChange: (s: ConsoleState) => void = () => {};
  pollMs = 300;

  constructor(private client: EngineClient) {}

  async launch(target: Target, cfg: SearchConfig): Promise<void> {
    const body = {
      target: targetToJson(target),
      mode: cfg.mode,
      iters: cfg.iters,
      restarts: cfg.restarts,
      seed: cfg.seed,
      freeze_scale: cfg.freezeScale,
      init_scale: cfg.initScale,
      lr: cfg.lr,
    };
    this.state = { ...this.state, status: "running", candidates: [],
                   error: null, selected: null };
    this.onChange(this.state);
    try {
      const { job_id } = await this.client.startSearch(body);
      this.state = { ...this.state, jobId: job_id };
      this.onChange(this.state);
      await this.poll(job_id);
    } catch (e) {
      this.state = { ...this.state, status: "failed", error: String(e) };
      this.onChange(this.state);
    }
  }

  private async poll(jobId: string): Promise<void> {
    for (;;) {
      const doc: SearchStatus = await this.client.searchStatus(jobId);
      if (this.state.jobId !== jobId) return;      // superseded launch
      this.state = {
        ...this.state,
        candidates: doc.candidates,
        status: doc.status === "running" ? "running" : doc.status,
        error: doc.error ?? null,
      };
      this.onChange(this.state);
      if (doc.status !== "running") return;
      await new Promise((r) => setTimeout(r, this.pollMs));
    }
  }

  setSort(key: SortKey): void {
    if (this.state.sortKey === key) {
      this.state = { ...this.state, ascending: !this.state.ascending };
    } else {
      this.state = { ...this.state, sortKey: key, ascending: true };
    }
    this.onChange(this.state);
  }

  /** Candidates in display order (default: divergence ascending). */
  sorted(): CandidateRow[] {
    const key = this.state.sortKey;
    const sign = this.state.ascending ? 1 : -1;
    return [...this.state.candidates].sort(
      (a, b) => sign * ((a[key] as number) - (b[key] as number)));
  }

  select(displayIndex: number): CandidateRow | null {
    const rows = this.sorted();
    if (displayIndex < 0 || displayIndex >= rows.length) return null;
    this.state = { ...this.state, selected: displayIndex };
    this.onChange(this.state);
    return rows[displayIndex];
  }
}

/** Slider values for loading a candidate into the slice viewer. */
export function candidateToViewer(c: CandidateRow, paramNames: string[]):
    { params: Record<string, number>; center: number[]; scale: number[] } {
  const params: Record<string, number> = {};
  paramNames.forEach((name, i) => { params[name] = c.params_physical[i]; });
  return { params, center: c.center_physical, scale: c.scale_physical };
}

/** Histogram drawn by dragging bars: edit one bar, keep counts nonnegative. */
export function dragBar(counts: number[], index: number, value: number): number[] {
  const next = counts.slice();
  if (index >= 0 && index < next.length) next[index] = Math.max(0, value);
  return next;
}
