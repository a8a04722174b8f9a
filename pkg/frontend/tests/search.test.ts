/** Search console behavior: polling, sorting, candidate loading. */

import { describe, expect, it } from "vitest";
import { CandidateRow, EngineClient, SearchStatus } from "../src/api.js";
import { SearchConsole, candidateToViewer, dragBar, targetToJson } from "../src/search.js";
import fixtures from "./fixtures/responses.json";

function fakeClient(statuses: SearchStatus[]): EngineClient {
  let call = 0;
  return {
    startSearch: async () => ({ job_id: "job1" }),
    searchStatus: async () => statuses[Math.min(call++, statuses.length - 1)],
  } as unknown as EngineClient;
}

const done = fixtures.search_done as SearchStatus;

describe("search console", () => {
  it("polls until done and exposes the candidate list verbatim", async () => {
    const running: SearchStatus = { status: "running", candidates: [] };
    const console_ = new SearchConsole(fakeClient([running, running, done]));
    console_.pollMs = 1;
    await console_.launch({ kind: "gaussian", mu: 0.5, sigma: 0.05 },
                          { mode: "joint", iters: 40, restarts: 1, seed: 7,
                            freezeScale: false, initScale: 0.03, lr: 0.02 });
    expect(console_.state.status).toBe("done");
    expect(console_.state.candidates).toEqual(done.candidates);
  });

  it("sorts by divergence ascending by default", () => {
    const console_ = new SearchConsole(fakeClient([done]));
    const rows: CandidateRow[] = [
      { ...done.candidates[0], divergence: 0.5 },
      { ...done.candidates[0], divergence: 0.1 },
      { ...done.candidates[0], divergence: 0.3 },
    ];
    console_.state = { ...console_.state, candidates: rows };
    expect(console_.sorted().map((r) => r.divergence)).toEqual([0.1, 0.3, 0.5]);
    console_.setSort("divergence");          // toggles to descending
    expect(console_.sorted().map((r) => r.divergence)).toEqual([0.5, 0.3, 0.1]);
  });

  it("clicking a candidate yields slider values from its row", () => {
    const cand = done.candidates[0];
    const loaded = candidateToViewer(cand, ["shift", "amp"]);
    expect(loaded.params.shift).toBe(cand.params_physical[0]);
    expect(loaded.params.amp).toBe(cand.params_physical[1]);
    expect(loaded.center).toEqual(cand.center_physical);
  });

  it("failed jobs surface the engine diagnostics", async () => {
    const failed: SearchStatus = { status: "failed", candidates: [],
                                   error: "SearchAbort: boom" };
    const console_ = new SearchConsole(fakeClient([failed]));
    console_.pollMs = 1;
    await console_.launch({ kind: "gaussian", mu: 0.5, sigma: 0.05 },
                          { mode: "joint", iters: 10, restarts: 1, seed: 0,
                            freezeScale: false, initScale: 0.03, lr: 0.02 });
    expect(console_.state.status).toBe("failed");
    expect(console_.state.error).toContain("SearchAbort");
  });

  it("histogram bar dragging clamps at zero", () => {
    expect(dragBar([1, 2, 3], 1, -5)).toEqual([1, 0, 3]);
    expect(dragBar([1, 2, 3], 2, 7)).toEqual([1, 2, 7]);
  });

  it("target JSON matches the engine schema", () => {
    expect(targetToJson({ kind: "gaussian", mu: 1, sigma: 2 }))
      .toEqual({ gaussian: { mu: 1, sigma: 2 } });
    expect(targetToJson({ kind: "histogram", edges: [0, 1], counts: [3] }))
      .toEqual({ histogram: { edges: [0, 1], counts: [3] } });
  });
});
