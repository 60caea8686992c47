/** Recovery-curve panel: the six per-nodule region series on one canvas. */

import type { GatewayClient } from '../api.js';
import { clear, el } from '../dom.js';
import type { CurvesPayload, RegionSeries } from '../types.js';

export const SERIES_COLORS = ['#4fc3f7', '#0288d1', '#aed581', '#689f38', '#ffb74d', '#f57c00'];

export interface Polyline {
  color: string;
  label: string;
  points: [number, number][];
}

/** Canvas-space polylines for one nodule's series. Pure for testing:
 * x spans [0, width), y is flipped so larger values sit higher. */
export function plotLayout(
  series: RegionSeries[],
  width: number,
  height: number,
  pad = 8,
): Polyline[] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const s of series) {
    for (const v of s.samples) {
      lo = Math.min(lo, v);
      hi = Math.max(hi, v);
    }
  }
  if (!(hi > lo)) {
    hi = lo + 1;
  }
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  return series.map((s, idx) => {
    const n = s.samples.length;
    const points: [number, number][] = s.samples.map((v, i) => [
      pad + (n <= 1 ? 0 : (i / (n - 1)) * innerW),
      pad + (1 - (v - lo) / (hi - lo)) * innerH,
    ]);
    return {
      color: SERIES_COLORS[idx % SERIES_COLORS.length]!,
      label: `${s.region} ${s.signal}`,
      points,
    };
  });
}

export async function renderCurves(
  client: GatewayClient,
  root: HTMLElement,
  caseId: string,
): Promise<void> {
  const payload: CurvesPayload = await client.curves(caseId);
  clear(root);
  root.append(el('h3', {}, 'Recovery curves'));

  for (const nodule of payload.nodules) {
    const canvas = el('canvas', { class: 'curves-canvas' });
    canvas.width = 560;
    canvas.height = 220;
    const ctx = canvas.getContext('2d')!;
    const lines = plotLayout(nodule.series, canvas.width, canvas.height);
    for (const line of lines) {
      ctx.beginPath();
      for (const [x, y] of line.points) ctx.lineTo(x, y);
      ctx.strokeStyle = line.color;
      ctx.lineWidth = 1.25;
      ctx.stroke();
    }
    const legend = el('div', { class: 'curves-legend' });
    for (const line of lines) {
      const chip = el('span', { class: 'legend-chip' }, line.label);
      chip.style.borderLeftColor = line.color;
      legend.append(chip);
    }
    root.append(el('h4', {}, `Nodule ${nodule.nodule_id}`), canvas, legend);
  }
}
