/** Value-to-color mapping for slice rendering.
 *
 * Colors are presentation only; the underlying values stay exactly what
 * the engine returned (the probe tooltip reads them back out).
 */

const VIRIDIS: [number, number, number][] = [
  [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142],
  [33, 144, 141], [39, 173, 129], [92, 200, 99], [170, 220, 50],
  [253, 231, 37],
];

const DIVERGING: [number, number, number][] = [
  [5, 48, 97], [33, 102, 172], [67, 147, 195], [146, 197, 222],
  [247, 247, 247], [244, 165, 130], [214, 96, 77], [178, 24, 43],
  [103, 0, 31],
];

function interp(stops: [number, number, number][], t: number): [number, number, number] {
  const x = Math.min(Math.max(t, 0), 1) * (stops.length - 1);
  const i = Math.min(Math.floor(x), stops.length - 2);
  const f = x - i;
  return [0, 1, 2].map((c) => Math.round(stops[i][c] * (1 - f) + stops[i + 1][c] * f)) as [
    number, number, number];
}

export function colorFor(value: number, lo: number, hi: number,
                         diverging = false): [number, number, number] {
  const stops = diverging ? DIVERGING : VIRIDIS;
  if (diverging) {
    // symmetric around zero for correlation-style data
    const m = Math.max(Math.abs(lo), Math.abs(hi), 1e-30);
    return interp(stops, (value + m) / (2 * m));
  }
  const span = hi - lo;
  return interp(stops, span > 0 ? (value - lo) / span : 0.5);
}

export function legendTicks(lo: number, hi: number, n = 5): number[] {
  const out: number[] = [];
  for (let i = 0; i < n; i++) out.push(lo + ((hi - lo) * i) / (n - 1));
  return out;
}
