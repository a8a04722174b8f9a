/** Point-distribution panel: UP Gaussian readout with MC histogram overlay.
 *
 * mu/sigma/timing render exactly as the engine reported them; the curve
 * and histogram geometry are presentation derived from those numbers.
 */

import { DistResponse, EngineClient, ParamBox } from "./api.js";

export interface DistState {
  point: { x: number; y: number; z: number } | null;
  payload: DistResponse | null;
  error: string | null;
  pending: boolean;
}

export class DistributionViewModel {
  state: DistState = { point: null, payload: null, error: null, pending: false };
  private seq = 0;
  onChange: (s: DistState) => void = () => {};

  constructor(private client: EngineClient) {}

  async query(point: { x: number; y: number; z: number }, paramBox: ParamBox,
              mcSamples: number | null, seed = 0): Promise<void> {
    const my = ++this.seq;
    this.state = { ...this.state, point, pending: true, error: null };
    this.onChange(this.state);
    const body: Record<string, unknown> = { ...point, param_box: paramBox };
    if (mcSamples) {
      body.n = mcSamples;
      body.seed = seed;
    }
    try {
      const payload = await this.client.dist(body);
      if (my !== this.seq) return;
      this.state = { point, payload, error: null, pending: false };
    } catch (e) {
      if (my !== this.seq) return;
      this.state = { ...this.state, error: String(e), pending: false };
    }
    this.onChange(this.state);
  }

  /** Text lines shown in the panel; values verbatim from the API. */
  readout(): string[] {
    const p = this.state.payload;
    if (!p) return [];
    if (p.sigma === 0) {
      return [`deterministic here: value ${p.mu}`, `UP ${p.seconds.toFixed(4)}s`];
    }
    const lines = [
      `mu ${p.mu}`,
      `sigma ${p.sigma}`,
      `UP ${p.seconds.toFixed(4)}s`,
    ];
    if (p.mc) {
      lines.push(`MC mean ${p.mc.mean}`);
      lines.push(`MC std ${p.mc.std}`);
      lines.push(`MC n=${p.mc.n} ${p.mc.seconds.toFixed(4)}s`);
    }
    return lines;
  }
}

/** Gaussian curve polyline over [mu-4s, mu+4s], density normalized to peak 1. */
export function gaussianCurve(mu: number, sigma: number, n = 121):
    { x: number; y: number }[] {
  if (sigma <= 0) return [{ x: mu, y: 1 }];
  const pts: { x: number; y: number }[] = [];
  for (let i = 0; i < n; i++) {
    const x = mu - 4 * sigma + (8 * sigma * i) / (n - 1);
    const z = (x - mu) / sigma;
    pts.push({ x, y: Math.exp(-0.5 * z * z) });
  }
  return pts;
}

/** Histogram bars rescaled to a density whose peak matches the curve scale. */
export function histogramBars(edges: number[], counts: number[]):
    { x0: number; x1: number; h: number }[] {
  const total = counts.reduce((a, b) => a + b, 0);
  if (total <= 0) return [];
  const dens = counts.map((c, i) => c / total / Math.max(edges[i + 1] - edges[i], 1e-30));
  const peak = Math.max(...dens, 1e-30);
  return counts.map((_, i) => ({
    x0: edges[i], x1: edges[i + 1], h: dens[i] / peak,
  }));
}
