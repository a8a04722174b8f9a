/** Slice viewer state: one in-flight request, stale responses dropped.
 *
 * The model keeps the engine payload untouched; rendering reads values
 * from it and the probe tooltip reports them digit-for-digit.
 */

import { EngineClient, ParamBox, SliceResponse } from "./api.js";

export type Stat = "value" | "mean" | "std" | "corr";

export interface SliceRequest {
  axis: "x" | "y" | "z";
  index: number;
  dims: number;
  stat: Stat;
  params?: number[];
  paramBox?: ParamBox;
  ref?: number[] | "auto";
}

export interface SliceState {
  request: SliceRequest | null;
  payload: SliceResponse | null;
  error: string | null;
  pending: boolean;
}

export class SliceViewModel {
  state: SliceState = { request: null, payload: null, error: null, pending: false };
  private seq = 0;
  onChange: (s: SliceState) => void = () => {};

  constructor(private client: EngineClient) {}

  buildBody(req: SliceRequest): Record<string, unknown> {
    const body: Record<string, unknown> = {
      axis: req.axis, index: req.index, dims: req.dims, stat: req.stat,
    };
    if (req.stat === "value") body.params = req.params;
    else body.param_box = req.paramBox;
    if (req.stat === "corr" && req.ref) body.ref = req.ref;
    return body;
  }

  async load(req: SliceRequest): Promise<void> {
    const my = ++this.seq;
    this.state = { ...this.state, request: req, pending: true, error: null };
    this.onChange(this.state);
    try {
      const payload = await this.client.slice(this.buildBody(req));
      if (my !== this.seq) return;            // stale response: discard
      this.state = { request: req, payload, error: null, pending: false };
    } catch (e) {
      if (my !== this.seq) return;
      this.state = { ...this.state, error: String(e), pending: false };
    }
    this.onChange(this.state);
  }

  /** Exact engine value at a pixel; no client-side rescaling. */
  valueAt(i: number, j: number): number | null {
    const p = this.state.payload;
    if (!p || i < 0 || j < 0 || i >= p.dims[0] || j >= p.dims[1]) return null;
    return p.values[i][j];
  }

  /** Physical (u, v) coordinate of a pixel's voxel center. */
  coordAt(i: number, j: number): [number, number] | null {
    const p = this.state.payload;
    if (!p) return null;
    const fu = p.dims[0] > 1 ? i / (p.dims[0] - 1) : 0;
    const fv = p.dims[1] > 1 ? j / (p.dims[1] - 1) : 0;
    return [
      p.u_extent[0] + fu * (p.u_extent[1] - p.u_extent[0]),
      p.v_extent[0] + fv * (p.v_extent[1] - p.v_extent[0]),
    ];
  }

  /** Pixel indices of the reference marker when it lies on this slice. */
  referencePixel(): [number, number] | null {
    const p = this.state.payload;
    if (!p || !p.reference) return null;
    const axes: Record<string, number> = { x: 0, y: 1, z: 2 };
    const a = axes[p.axis];
    const others = [0, 1, 2].filter((k) => k !== a);
    const eps = 1e-9;
    if (Math.abs(p.reference[a] - p.coord) > Math.abs(p.coord) * 1e-6 + 1e-6) return null;
    const locate = (extent: [number, number], n: number, v: number) => {
      const f = (v - extent[0]) / (extent[1] - extent[0] || 1);
      return Math.round(f * (n - 1));
    };
    return [
      locate(p.u_extent, p.dims[0], p.reference[others[0]]),
      locate(p.v_extent, p.dims[1], p.reference[others[1]]),
    ];
  }
}

/** Full 3-D point for a clicked pixel, given the slice geometry. */
export function pointFromPixel(p: SliceResponse, i: number, j: number):
    { x: number; y: number; z: number } {
  const axes: Record<string, number> = { x: 0, y: 1, z: 2 };
  const a = axes[p.axis];
  const others = [0, 1, 2].filter((k) => k !== a);
  const coords = [0, 0, 0];
  coords[a] = p.coord;
  const fu = p.dims[0] > 1 ? i / (p.dims[0] - 1) : 0;
  const fv = p.dims[1] > 1 ? j / (p.dims[1] - 1) : 0;
  coords[others[0]] = p.u_extent[0] + fu * (p.u_extent[1] - p.u_extent[0]);
  coords[others[1]] = p.v_extent[0] + fv * (p.v_extent[1] - p.v_extent[0]);
  return { x: coords[0], y: coords[1], z: coords[2] };
}
