/** DOM wiring: sliders, canvas, panels. All numbers come from the API. */

import { EngineClient, ModelInfo, ParamBox, engineBaseUrl } from "./api.js";
import { colorFor, legendTicks } from "./colormap.js";
import { DistributionViewModel, gaussianCurve, histogramBars } from "./distribution.js";
import { SearchConsole, Target, candidateToViewer } from "./search.js";
import { SliceViewModel, Stat, pointFromPixel } from "./slice.js";

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

async function boot() {
  const client = new EngineClient(engineBaseUrl());
  let info: ModelInfo;
  try {
    info = await client.info();
    $("banner").style.display = "none";
  } catch (e) {
    const banner = $("banner");
    banner.textContent = `engine unreachable: ${e}. `;
    const retry = document.createElement("button");
    retry.textContent = "retry";
    retry.onclick = () => location.reload();
    banner.appendChild(retry);
    banner.style.display = "block";
    return;
  }

  const domain = info.domain;
  const slice = new SliceViewModel(client);
  const dist = new DistributionViewModel(client);
  const console_ = new SearchConsole(client);

  // ---- parameter sliders: point value + [lo, hi] range per axis --------
  const paramRows = $("params");
  const paramState = domain.param_bounds.map(([lo, hi], i) => ({
    name: domain.param_names[i], lo, hi,
    value: (lo + hi) / 2, rangeLo: lo, rangeHi: hi,
  }));
  paramState.forEach((p, i) => {
    const row = document.createElement("div");
    row.className = "param-row";
    row.innerHTML = `<label>${p.name}</label>
      <input type="range" class="pv" min="${p.lo}" max="${p.hi}" step="any" value="${p.value}">
      <span class="pv-read" id="pv-${i}">${p.value.toFixed(4)}</span>
      <input type="number" class="plo" value="${p.rangeLo}" step="any">
      <input type="number" class="phi" value="${p.rangeHi}" step="any">`;
    paramRows.appendChild(row);
    const pv = row.querySelector(".pv") as HTMLInputElement;
    pv.oninput = () => {
      p.value = parseFloat(pv.value);
      $(`pv-${i}`).textContent = p.value.toFixed(4);
      refreshSlice();
    };
    (row.querySelector(".plo") as HTMLInputElement).onchange = (ev) => {
      p.rangeLo = parseFloat((ev.target as HTMLInputElement).value);
      refreshSlice();
    };
    (row.querySelector(".phi") as HTMLInputElement).onchange = (ev) => {
      p.rangeHi = parseFloat((ev.target as HTMLInputElement).value);
      refreshSlice();
    };
  });

  const paramBox = (): ParamBox => {
    const box: ParamBox = {};
    paramState.forEach((p) => {
      box[p.name] = p.rangeLo === p.rangeHi ? p.rangeLo : [p.rangeLo, p.rangeHi];
    });
    return box;
  };
  const paramPoint = () => paramState.map((p) => p.value);

  // ---- slice controls ---------------------------------------------------
  const axisSel = $("axis") as unknown as HTMLSelectElement;
  const statSel = $("stat") as unknown as HTMLSelectElement;
  const indexSlider = $("slice-index") as unknown as HTMLInputElement;
  const dims = 64;
  indexSlider.max = String(dims - 1);
  let reference: number[] | "auto" = "auto";

  function refreshSlice() {
    const stat = statSel.value as Stat;
    void slice.load({
      axis: axisSel.value as "x" | "y" | "z",
      index: parseInt(indexSlider.value, 10),
      dims,
      stat,
      params: paramPoint(),
      paramBox: paramBox(),
      ref: stat === "corr" ? reference : undefined,
    });
  }
  axisSel.onchange = refreshSlice;
  statSel.onchange = refreshSlice;
  indexSlider.oninput = refreshSlice;

  // ---- slice rendering ---------------------------------------------------
  const canvas = $("slice-canvas") as unknown as HTMLCanvasElement;
  const ctx = canvas.getContext("2d")!;
  slice.onChange = (s) => {
    $("slice-status").textContent = s.pending ? "loading..." :
      s.error ? s.error :
      s.payload ? `${s.payload.axis}=${s.payload.coord.toFixed(4)} ` +
        `range [${s.payload.value_range[0].toPrecision(6)}, ` +
        `${s.payload.value_range[1].toPrecision(6)}] ` +
        `(${s.payload.seconds.toFixed(3)}s)` : "";
    const p = s.payload;
    if (!p) return;
    const [nu, nv] = p.dims;
    canvas.width = nu;
    canvas.height = nv;
    const img = ctx.createImageData(nu, nv);
    const [lo, hi] = p.value_range;
    const diverging = s.request?.stat === "corr";
    for (let i = 0; i < nu; i++) {
      for (let j = 0; j < nv; j++) {
        const [r, g, b] = colorFor(p.values[i][j], lo, hi, diverging);
        const o = 4 * ((nv - 1 - j) * nu + i);
        img.data[o] = r; img.data[o + 1] = g; img.data[o + 2] = b;
        img.data[o + 3] = 255;
      }
    }
    ctx.putImageData(img, 0, 0);
    const refPix = slice.referencePixel();
    if (refPix) {
      ctx.strokeStyle = "#ff00ff";
      ctx.lineWidth = 1;
      ctx.strokeRect(refPix[0] - 2, nv - 1 - refPix[1] - 2, 5, 5);
    }
    const legend = $("legend");
    legend.textContent = legendTicks(lo, hi).map((v) => v.toPrecision(4)).join("  ");
  };

  canvas.onmousemove = (ev) => {
    const p = slice.state.payload;
    if (!p) return;
    const rect = canvas.getBoundingClientRect();
    const i = Math.floor(((ev.clientX - rect.left) / rect.width) * p.dims[0]);
    const j = p.dims[1] - 1 - Math.floor(((ev.clientY - rect.top) / rect.height) * p.dims[1]);
    const v = slice.valueAt(i, j);
    if (v !== null) {
      $("probe").textContent = `value ${v}`;   // exact engine number
    }
  };

  canvas.onclick = (ev) => {
    const p = slice.state.payload;
    if (!p) return;
    const rect = canvas.getBoundingClientRect();
    const i = Math.floor(((ev.clientX - rect.left) / rect.width) * p.dims[0]);
    const j = p.dims[1] - 1 - Math.floor(((ev.clientY - rect.top) / rect.height) * p.dims[1]);
    const point = pointFromPixel(p, i, j);
    if (statSel.value === "corr") {
      reference = [point.x, point.y, point.z];
      refreshSlice();
      return;
    }
    const n = parseInt(($("mc-n") as unknown as HTMLInputElement).value, 10) || null;
    void dist.query(point, paramBox(), n);
  };

  // ---- distribution panel -----------------------------------------------
  dist.onChange = (s) => {
    $("dist-read").textContent = s.pending ? "querying..." :
      s.error ?? dist.readout().join("\n");
    const p = s.payload;
    const dcan = $("dist-canvas") as unknown as HTMLCanvasElement;
    const dctx = dcan.getContext("2d")!;
    dctx.clearRect(0, 0, dcan.width, dcan.height);
    if (!p || p.sigma <= 0) return;
    const curve = gaussianCurve(p.mu, p.sigma);
    const xs = curve.map((q) => q.x);
    let lo = Math.min(...xs);
    let hi = Math.max(...xs);
    if (p.mc) {
      lo = Math.min(lo, p.mc.histogram.edges[0]);
      hi = Math.max(hi, p.mc.histogram.edges[p.mc.histogram.edges.length - 1]);
    }
    const X = (x: number) => ((x - lo) / (hi - lo || 1)) * dcan.width;
    const Y = (y: number) => dcan.height - 4 - y * (dcan.height - 12);
    if (p.mc) {
      dctx.fillStyle = "rgba(120,120,220,0.55)";
      for (const bar of histogramBars(p.mc.histogram.edges, p.mc.histogram.counts)) {
        dctx.fillRect(X(bar.x0), Y(bar.h), Math.max(X(bar.x1) - X(bar.x0), 1),
                      Y(0) - Y(bar.h));
      }
    }
    dctx.strokeStyle = "#d62728";
    dctx.beginPath();
    curve.forEach((q, k) => (k ? dctx.lineTo(X(q.x), Y(q.y)) : dctx.moveTo(X(q.x), Y(q.y))));
    dctx.stroke();
  };

  // ---- search console ----------------------------------------------------
  $("search-run").onclick = () => {
    const target: Target = {
      kind: "gaussian",
      mu: parseFloat(($("target-mu") as unknown as HTMLInputElement).value),
      sigma: parseFloat(($("target-sigma") as unknown as HTMLInputElement).value),
    };
    void console_.launch(target, {
      mode: ($("search-mode") as unknown as HTMLSelectElement).value as
        "joint" | "param" | "spatial",
      iters: parseInt(($("search-iters") as unknown as HTMLInputElement).value, 10),
      restarts: 16,
      seed: parseInt(($("search-seed") as unknown as HTMLInputElement).value, 10),
      freezeScale: ($("freeze-scale") as unknown as HTMLInputElement).checked,
      initScale: 0.1,
      lr: 0.02,
    });
  };

  console_.onChange = (s) => {
    $("search-status").textContent =
      s.status + (s.error ? `: ${s.error}` : ` (${s.candidates.length} candidates)`);
    const tbody = $("cand-body");
    tbody.innerHTML = "";
    console_.sorted().forEach((c, row) => {
      const tr = document.createElement("tr");
      if (row === s.selected) tr.className = "selected";
      tr.innerHTML =
        `<td>${c.divergence.toExponential(3)}</td>` +
        `<td>${c.params_physical.map((v) => v.toFixed(4)).join(", ")}</td>` +
        `<td>${c.center_physical.map((v) => v.toFixed(4)).join(", ")}</td>` +
        `<td>${c.mu.toPrecision(6)}</td><td>${c.sigma.toPrecision(6)}</td>`;
      tr.onclick = () => {
        const cand = console_.select(row);
        if (!cand) return;
        const load = candidateToViewer(cand, domain.param_names);
        paramState.forEach((p, i) => {
          p.value = load.params[p.name];
          const input = paramRows.querySelectorAll<HTMLInputElement>(".pv")[i];
          input.value = String(p.value);
          $(`pv-${i}`).textContent = p.value.toFixed(4);
        });
        statSel.value = "value";
        refreshSlice();
      };
      tbody.appendChild(tr);
    });
  };
  ["divergence", "mu", "sigma", "iteration"].forEach((key) => {
    const el = document.getElementById(`sort-${key}`);
    if (el) el.onclick = () => console_.setSort(key as never);
  });

  refreshSlice();
}

void boot();
