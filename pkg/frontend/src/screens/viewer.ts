/** Frame viewer + annotation editor: canvas raster at integer zoom with
 * nearest-neighbour scaling, cursor temperature readout, overlay drawing,
 * and polygon/point tools writing into the store's draft. */

import type { GatewayClient, FramePng } from '../api.js';
import { el, fmtSeconds } from '../dom.js';
import { legendGradient, pixelTemperature } from '../palette.js';
import type { Point } from '../polygon.js';
import { snapPoint } from '../polygon.js';
import { Store, editingAllowed } from '../state.js';
import type { CaseDetail } from '../types.js';

/** Temperature under a cursor position, from the 1:1 decoded RGBA buffer. */
export function readTemperature(
  rgba: Uint8ClampedArray,
  width: number,
  px: number,
  py: number,
  min: number,
  max: number,
): number {
  const o = (py * width + px) * 4;
  return pixelTemperature(rgba[o]!, rgba[o + 1]!, rgba[o + 2]!, min, max);
}

export interface ViewerHandles {
  root: HTMLElement;
  showFrame: (t: number) => Promise<void>;
  redrawOverlays: () => void;
}

export function buildViewer(
  client: GatewayClient,
  store: Store,
  detail: CaseDetail,
  zoom = 4,
): ViewerHandles {
  const base = document.createElement('canvas');
  base.width = detail.width;
  base.height = detail.height;
  const baseCtx = base.getContext('2d', { willReadFrequently: true })!;

  const canvas = el('canvas', { class: 'frame-canvas' });
  canvas.width = detail.width * zoom;
  canvas.height = detail.height * zoom;
  const ctx = canvas.getContext('2d')!;
  ctx.imageSmoothingEnabled = false;

  let current: FramePng | null = null;
  let rgba: Uint8ClampedArray | null = null;

  const readout = el('span', { class: 'readout' }, '--');
  const timeLabel = el('span', { class: 'time-label' }, '');
  const legend = el('div', { class: 'legend-bar' });
  legend.style.background = legendGradient();
  const legendMin = el('span', {}, '');
  const legendMax = el('span', {}, '');

  function drawOverlays(): void {
    const s = store.state;
    ctx.save();
    ctx.scale(zoom, zoom);
    ctx.lineWidth = 1.5 / zoom;
    if (s.overlays.mask) {
      for (const a of s.annotations) {
        if (!a.polygon || a.polygon.length < 3) continue;
        ctx.beginPath();
        for (const [x, y] of a.polygon) ctx.lineTo(x, y);
        ctx.closePath();
        ctx.fillStyle = 'rgba(80, 200, 255, 0.25)';
        ctx.strokeStyle = 'rgba(80, 200, 255, 0.9)';
        ctx.fill();
        ctx.stroke();
      }
    }
    if (s.overlays.points) {
      for (const a of s.annotations) {
        const [x, y] = a.point;
        ctx.beginPath();
        ctx.arc(x, y, 2.5 / zoom + 1, 0, Math.PI * 2);
        ctx.strokeStyle = '#ffee55';
        ctx.stroke();
      }
    }
    const draft = s.draft.points;
    if (draft.length > 0) {
      ctx.beginPath();
      for (const [x, y] of draft) ctx.lineTo(x, y);
      ctx.strokeStyle = '#55ff99';
      ctx.stroke();
      for (const [x, y] of draft) {
        ctx.beginPath();
        ctx.arc(x, y, 1.5 / zoom + 0.5, 0, Math.PI * 2);
        ctx.fillStyle = '#55ff99';
        ctx.fill();
      }
    }
    ctx.restore();
  }

  function repaint(): void {
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(base, 0, 0, canvas.width, canvas.height);
    drawOverlays();
  }

  async function showFrame(t: number): Promise<void> {
    current = await client.framePng(detail.case_id, t);
    const bitmap = await createImageBitmap(current.blob);
    baseCtx.clearRect(0, 0, base.width, base.height);
    baseCtx.drawImage(bitmap, 0, 0);
    rgba = baseCtx.getImageData(0, 0, base.width, base.height).data;
    timeLabel.textContent = fmtSeconds(current.seconds);
    legendMin.textContent = `${current.min.toFixed(2)} °C`;
    legendMax.textContent = `${current.max.toFixed(2)} °C`;
    repaint();
  }

  function canvasToImage(ev: MouseEvent): Point {
    const rect = canvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * detail.width;
    const y = ((ev.clientY - rect.top) / rect.height) * detail.height;
    return [x, y];
  }

  canvas.addEventListener('mousemove', (ev) => {
    if (!current || !rgba) return;
    const [x, y] = canvasToImage(ev);
    const px = Math.min(detail.width - 1, Math.max(0, Math.floor(x)));
    const py = Math.min(detail.height - 1, Math.max(0, Math.floor(y)));
    const temp = readTemperature(rgba, detail.width, px, py, current.min, current.max);
    readout.textContent = `(${px}, ${py})  ${temp.toFixed(2)} °C`;
  });

  canvas.addEventListener('click', (ev) => {
    const s = store.state;
    if (!editingAllowed(s)) return;
    const p = canvasToImage(ev);
    if (s.tool === 'polygon') {
      store.mutateDraft((d) => d.add(p));
    } else if (s.tool === 'point') {
      const snapped = snapPoint(p);
      const annotations = s.annotations.map((a) => ({ ...a }));
      const target = annotations[0];
      if (target) {
        target.point = snapped;
        store.setAnnotations(annotations, true);
      }
    }
  });

  const allTimes = detail.frame_times;
  const scrubber = el('input', {
    type: 'range',
    min: '0',
    max: String(allTimes.length - 1),
    step: '1',
    value: '0',
    class: 'scrubber',
  });
  scrubber.addEventListener('input', () => {
    const t = allTimes[Number(scrubber.value)];
    if (t !== undefined) {
      store.setFrame(t);
      void showFrame(t);
    }
  });

  const root = el(
    'div',
    { class: 'viewer' },
    canvas,
    el('div', { class: 'viewer-bar' }, scrubber, timeLabel, readout),
    el('div', { class: 'legend' }, legendMin, legend, legendMax),
  );

  return { root, showFrame, redrawOverlays: repaint };
}
