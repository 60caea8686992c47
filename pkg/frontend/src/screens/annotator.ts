/** Annotation editor panel: tool selection, nodule list, polygon apply,
 * undo, and persistence. Every edit goes through PUT before any run is
 * offered; the server copy is the single source of truth. */

import type { GatewayClient } from '../api.js';
import { ApiError } from '../api.js';
import { clear, el } from '../dom.js';
import { Store, editingAllowed } from '../state.js';
import type { Annotation } from '../types.js';

function centroid(points: [number, number][]): [number, number] {
  let sx = 0;
  let sy = 0;
  for (const [x, y] of points) {
    sx += x;
    sy += y;
  }
  return [sx / points.length, sy / points.length];
}

export function nextNoduleId(annotations: Annotation[]): string {
  let n = 0;
  while (annotations.some((a) => a.nodule_id === `n${n}`)) n++;
  return `n${n}`;
}

export function buildAnnotator(
  client: GatewayClient,
  store: Store,
  caseId: string,
  onSaved: () => void,
): HTMLElement {
  const status = el('span', { class: 'annot-status' }, '');
  const list = el('ul', { class: 'nodule-list' });

  function refreshList(): void {
    clear(list);
    for (const a of store.state.annotations) {
      const poly = a.polygon ? `${a.polygon.length} vertices` : 'no polygon';
      list.append(
        el('li', {}, `${a.nodule_id}: point (${a.point[0]}, ${a.point[1]}), ${poly}`),
      );
    }
  }

  const toolButtons: Record<string, HTMLButtonElement> = {};
  for (const tool of ['scrub', 'polygon', 'point'] as const) {
    toolButtons[tool] = el(
      'button',
      {
        class: 'tool-btn',
        onclick: () => store.setTool(tool),
      },
      tool,
    );
  }

  const applyBtn = el(
    'button',
    {
      onclick: () => {
        const s = store.state;
        if (!s.draft.closable()) {
          store.setError('polygon needs at least 3 vertices and no self-crossings');
          return;
        }
        const polygon = s.draft.points;
        const annotations = s.annotations.map((a) => ({ ...a }));
        if (annotations.length === 0) {
          annotations.push({
            nodule_id: nextNoduleId(annotations),
            point: centroid(polygon),
            polygon,
          });
        } else {
          annotations[0]!.polygon = polygon;
        }
        const applied = store.mutateDraft((d) => d.clear());
        if (applied) store.setAnnotations(annotations, true);
      },
    },
    'Apply polygon',
  );

  const undoBtn = el(
    'button',
    { onclick: () => void store.mutateDraft((d) => d.undo()) },
    'Undo',
  );

  const saveBtn = el(
    'button',
    {
      class: 'save-btn',
      onclick: async () => {
        const s = store.state;
        if (!editingAllowed(s)) return;
        status.textContent = 'saving…';
        try {
          const res = await client.putAnnotations(caseId, s.annotations);
          store.setAnnotations(res.annotations, false);
          status.textContent = `saved (status: ${res.status})`;
          store.setError(null);
          onSaved();
        } catch (err) {
          if (err instanceof ApiError) {
            status.textContent = '';
            store.setError(`${err.kind}: ${err.message}`);
          } else {
            store.setOffline(true);
          }
        }
      },
    },
    'Save annotations',
  );

  store.subscribe((s) => {
    const editable = editingAllowed(s);
    for (const [tool, btn] of Object.entries(toolButtons)) {
      btn.disabled = tool !== 'scrub' && !editable;
      btn.classList.toggle('active', s.tool === tool);
    }
    applyBtn.disabled = !editable;
    undoBtn.disabled = !editable;
    saveBtn.disabled = !editable || !s.dirty;
    refreshList();
  });
  refreshList();

  return el(
    'div',
    { class: 'annotator' },
    el('h3', {}, 'Annotations'),
    el('div', { class: 'tool-row' }, toolButtons['scrub']!, toolButtons['polygon']!, toolButtons['point']!),
    el('div', { class: 'tool-row' }, applyBtn, undoBtn, saveBtn, status),
    list,
  );
}
