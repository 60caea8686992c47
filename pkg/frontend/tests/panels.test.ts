// @vitest-environment happy-dom

import { beforeEach, describe, expect, it } from 'vitest';

import type { GatewayClient } from '../src/api.js';
import { clear, el, fmtSeconds } from '../src/dom.js';
import { buildAnnotator, nextNoduleId } from '../src/screens/annotator.js';
import { SERIES_COLORS, plotLayout } from '../src/screens/curves.js';
import { buildPredictionModel, renderPredictionPanel } from '../src/screens/prediction.js';
import { RHO_FLOOR, rhoBars } from '../src/screens/registration.js';
import { Store } from '../src/state.js';
import type { Job, RegistrationPayload } from '../src/types.js';

beforeEach(() => {
  document.body.innerHTML = '';
});

describe('dom helpers', () => {
  it('el assembles attributes, listeners and children', () => {
    let clicks = 0;
    const node = el('button', { class: 'x', onclick: () => clicks++ }, 'hi');
    expect(node.className).toBe('x');
    expect(node.textContent).toBe('hi');
    node.click();
    expect(clicks).toBe(1);
    // disabled buttons swallow clicks, so boolean attrs get their own node
    const off = el('button', { disabled: true }, 'no');
    expect(off.hasAttribute('disabled')).toBe(true);
    off.click();
    expect(clicks).toBe(1);
  });

  it('clear empties a node', () => {
    const node = el('div', {}, el('span', {}, 'a'), 'b');
    clear(node);
    expect(node.childNodes).toHaveLength(0);
  });

  it('fmtSeconds marks the precool frame', () => {
    expect(fmtSeconds(-5)).toBe('pre (-5s)');
    expect(fmtSeconds(0)).toBe('0s');
    expect(fmtSeconds(115)).toBe('115s');
  });
});

describe('prediction panel', () => {
  const raw =
    '{"case_id":"case000","families":["temporal","roi_textural","nodule_textural",'
    + '"relative_textural","first_order"],"nodules":[{"F":4,"label":"viable","nodule_id":"n1",'
    + '"p":[1.0,0.30000000000000004,0.825,0.0,6e-05],"votes":[1,1,1,0,1]}],'
    + '"schema":1,"vote_threshold":2}';

  it('keeps the raw bytes and extracts literal tokens', () => {
    const model = buildPredictionModel(raw);
    expect(model.raw).toBe(raw);
    expect(model.tokens).toHaveLength(1);
    expect(model.tokens[0]!.p).toEqual(['1.0', '0.30000000000000004', '0.825', '0.0', '6e-05']);
    expect(model.tokens[0]!.votes).toEqual(['1', '1', '1', '0', '1']);
    expect(model.tokens[0]!.F).toBe('4');
  });

  it('renders every field byte-for-byte from the payload', () => {
    const root = el('div');
    document.body.append(root);
    const model = buildPredictionModel(raw);
    renderPredictionPanel(root, model, false);

    const cells = [...root.querySelectorAll('table.pred-table tr')].slice(1).map((row) => {
      const tds = row.querySelectorAll('td');
      return [tds[0]!.textContent, tds[1]!.textContent, tds[2]!.textContent];
    });
    expect(cells).toEqual([
      ['temporal', '1.0', '1'],
      ['roi_textural', '0.30000000000000004', '1'],
      ['nodule_textural', '0.825', '1'],
      ['relative_textural', '0.0', '0'],
      ['first_order', '6e-05', '1'],
    ]);

    const verdict = root.querySelector('.verdict')!;
    expect(verdict.textContent).toBe('F = 4 of 5 (threshold 2) → viable');
    expect(verdict.classList.contains('viable')).toBe(true);

    expect(root.querySelector('details.raw-json pre')!.textContent).toBe(raw);
    expect(root.querySelector('.banner.warn')).toBeNull();
  });

  it('shows the review banner when alignment was flagged', () => {
    const root = el('div');
    renderPredictionPanel(root, buildPredictionModel(raw), true);
    expect(root.querySelector('.banner.warn')!.textContent).toContain('Review required');
  });
});

describe('registration timeline', () => {
  function payload(rhos: number[]): RegistrationPayload {
    return {
      review_required: rhos.some((r) => r < RHO_FLOOR),
      precool: { rho: 0.97, iterations: 12, converged: true },
      frames: rhos.map((rho, i) => ({
        frame_index: i,
        rho,
        iterations: 5,
        converged: true,
        before: `/api/cases/c/registration/${i}/before.png`,
        after: `/api/cases/c/registration/${i}/after.png`,
      })),
    };
  }

  it('clamps bar heights and flags sub-floor frames', () => {
    const bars = rhoBars(payload([1.0, 0.95, 0.9, 0.89, 0.3, -0.2]));
    expect(bars.map((b) => b.height)).toEqual([1.0, 0.95, 0.9, 0.89, 0.3, 0]);
    expect(bars.map((b) => b.flagged)).toEqual([false, false, false, true, true, true]);
  });
});

describe('curves layout', () => {
  it('scales all series into the padded box with y flipped', () => {
    const series = [
      { region: 'roi', signal: 'mean', samples: [0, 5, 10] },
      { region: 'win20', signal: 'std', samples: [5, 5, 5] },
    ];
    const lines = plotLayout(series, 120, 60, 10);
    expect(lines).toHaveLength(2);
    expect(lines[0]!.label).toBe('roi mean');
    expect(lines[0]!.color).toBe(SERIES_COLORS[0]);
    // x spans the inner box
    expect(lines[0]!.points.map(([x]) => x)).toEqual([10, 60, 110]);
    // global min 0 -> bottom (50), global max 10 -> top (10)
    expect(lines[0]!.points.map(([, y]) => y)).toEqual([50, 30, 10]);
    // constant series sits midway of the global range
    expect(lines[1]!.points.map(([, y]) => y)).toEqual([30, 30, 30]);
  });

  it('guards the degenerate flat window and single samples', () => {
    const flat = plotLayout([{ region: 'roi', signal: 'mean', samples: [2, 2] }], 100, 40, 8);
    for (const [, y] of flat[0]!.points) {
      expect(Number.isFinite(y)).toBe(true);
    }
    // lone sample: degenerate range puts the point at the box bottom
    const single = plotLayout([{ region: 'roi', signal: 'mean', samples: [7] }], 100, 40, 8);
    expect(single[0]!.points).toEqual([[8, 32]]);
  });
});

describe('annotator', () => {
  function fixture() {
    const store = new Store();
    store.selectCase('case000', [{ nodule_id: 'n1', point: [40, 30], polygon: null }], 0);
    const put: unknown[] = [];
    const client = {
      putAnnotations: async (caseId: string, annotations: unknown) => {
        put.push(annotations);
        return { case_id: caseId, annotations, status: 'segmented' };
      },
    } as unknown as GatewayClient;
    let saved = 0;
    const root = buildAnnotator(client, store, 'case000', () => saved++);
    document.body.append(root);
    const buttons = [...root.querySelectorAll('button')];
    const byText = (text: string) => buttons.find((b) => b.textContent === text)!;
    return { store, put, root, byText, savedCount: () => saved };
  }

  it('applies a closable draft to the first nodule and marks dirty', () => {
    const { store, byText } = fixture();
    store.mutateDraft((d) => {
      d.add([10.25, 10.25]);
      d.add([30.25, 10.25]);
      d.add([30.25, 30.25]);
    });
    byText('Apply polygon').click();
    expect(store.state.annotations[0]!.polygon).toEqual([
      [10.25, 10.25], [30.25, 10.25], [30.25, 30.25],
    ]);
    expect(store.state.dirty).toBe(true);
    expect(store.state.draft.length).toBe(0);
  });

  it('refuses to apply a non-closable draft', () => {
    const { store, byText } = fixture();
    store.mutateDraft((d) => {
      d.add([0, 0]);
      d.add([5, 5]);
    });
    byText('Apply polygon').click();
    expect(store.state.annotations[0]!.polygon).toBeNull();
    expect(store.state.lastError).toContain('polygon needs');
  });

  it('saves through the client and clears the dirty flag', async () => {
    const { store, put, byText, savedCount } = fixture();
    store.mutateDraft((d) => {
      d.add([10, 10]);
      d.add([20, 10]);
      d.add([20, 20]);
    });
    byText('Apply polygon').click();
    byText('Save annotations').click();
    await new Promise((r) => setTimeout(r, 0));
    expect(put).toHaveLength(1);
    expect(store.state.dirty).toBe(false);
    expect(savedCount()).toBe(1);
  });

  it('disables editing buttons while a job runs', () => {
    const { store, byText } = fixture();
    const job: Job = {
      job: 'job-9', case_id: 'case000', stage: 'features',
      status: 'running', result: null, error: null,
    };
    store.setJob(job);
    expect(byText('polygon').disabled).toBe(true);
    expect(byText('point').disabled).toBe(true);
    expect(byText('Apply polygon').disabled).toBe(true);
    expect(byText('scrub').disabled).toBe(false);
    store.setJob({ ...job, status: 'done' });
    expect(byText('polygon').disabled).toBe(false);
  });

  it('nextNoduleId skips taken ids', () => {
    expect(nextNoduleId([])).toBe('n0');
    expect(
      nextNoduleId([
        { nodule_id: 'n0', point: [0, 0], polygon: null },
        { nodule_id: 'n1', point: [1, 1], polygon: null },
      ]),
    ).toBe('n2');
  });
});
