/** Application wiring: hash routing, stage runs with 1 Hz job polling,
 * offline banner, and the per-case screen assembly. */

import { ApiError, GatewayClient, OfflineError } from './api.js';
import { clear, el } from './dom.js';
import { pollJob } from './jobs.js';
import { Store, jobActive } from './state.js';
import { buildAnnotator } from './screens/annotator.js';
import { renderCaseList } from './screens/caselist.js';
import { renderCurves } from './screens/curves.js';
import { loadPrediction } from './screens/prediction.js';
import { renderRegistration } from './screens/registration.js';
import { buildViewer } from './screens/viewer.js';
import type { Stage } from './types.js';

const client = new GatewayClient('');
const store = new Store();

const offlineBanner = el('div', { class: 'banner offline hidden' },
  'Gateway unreachable. ', el('button', { onclick: () => route() }, 'Retry'));
const errorBanner = el('div', { class: 'banner error hidden' }, '');
const content = el('div', { id: 'content' });

store.subscribe((s) => {
  offlineBanner.classList.toggle('hidden', !s.offline);
  errorBanner.classList.toggle('hidden', s.lastError === null);
  if (s.lastError !== null) errorBanner.textContent = s.lastError;
});

async function guard<T>(work: () => Promise<T>): Promise<T | null> {
  try {
    const value = await work();
    store.setOffline(false);
    return value;
  } catch (err) {
    if (err instanceof OfflineError) {
      store.setOffline(true);
    } else if (err instanceof ApiError) {
      store.setError(`${err.kind}: ${err.message}`);
    } else {
      store.setError(String(err));
    }
    return null;
  }
}

async function showCase(caseId: string): Promise<void> {
  clear(content);
  const detail = await guard(() => client.caseDetail(caseId));
  if (!detail) return;

  store.selectCase(caseId, detail.annotations, detail.frame_times[0] ?? null);

  const viewer = buildViewer(client, store, detail);
  store.subscribe(() => viewer.redrawOverlays());

  const jobLine = el('div', { class: 'job-line' }, '');
  const registrationRoot = el('div', { class: 'panel' });
  const curvesRoot = el('div', { class: 'panel' });
  const predictionRoot = el('div', { class: 'panel' });

  async function refreshPanels(): Promise<void> {
    const fresh = await guard(() => client.caseDetail(caseId));
    if (!fresh) return;
    if (fresh.artifacts.warps) {
      await guard(() => renderRegistration(client, registrationRoot, caseId));
    }
    if (fresh.artifacts.features) {
      await guard(() => renderCurves(client, curvesRoot, caseId));
    }
    if (fresh.artifacts.outcome) {
      await guard(() => loadPrediction(client, predictionRoot, caseId, fresh.review_required));
    }
  }

  function runButton(stage: Stage, options: Record<string, unknown> = {}, label?: string) {
    const btn = el('button', {
      onclick: async () => {
        if (jobActive(store.state)) return;
        const job = await guard(() => client.runStage(caseId, stage, options));
        if (!job) return;
        store.setJob(job);
        jobLine.textContent = `${job.stage}: ${job.status}`;
        const handle = pollJob(client, job.job, (update) => {
          store.setJob(update);
          jobLine.textContent = `${update.stage}: ${update.status}` +
            (update.error ? ` - ${update.error.error}: ${update.error.message}` : '');
        });
        const finished = await guard(() => handle.done);
        if (finished && finished.status === 'done') {
          await refreshPanels();
        }
      },
    }, label ?? `Run ${stage}`);
    store.subscribe((s) => {
      btn.disabled = jobActive(s) || s.dirty;
      btn.title = s.dirty ? 'save annotations first' : '';
    });
    return btn;
  }

  const runRow = el('div', { class: 'run-row' },
    runButton('align'),
    runButton('segment'),
    runButton('segment', { segmenter: 'manual' }, 'Segment from polygon'),
    runButton('features'),
    runButton('predict'),
    jobLine,
  );

  const header = el('div', { class: 'case-header' },
    el('a', { href: '#' }, '← cases'),
    el('h2', {}, detail.case_id),
    el('span', { class: 'meta' },
      `participant ${detail.participant_id ?? '?'} · ${detail.label ?? 'unlabelled'} · ${detail.status}`),
    detail.review_required
      ? el('span', { class: 'banner warn inline' }, 'review required')
      : null,
  );

  const overlays = el('div', { class: 'overlay-row' });
  for (const key of ['mask', 'points', 'registrationDiff'] as const) {
    const box = el('input', { type: 'checkbox' });
    box.checked = store.state.overlays[key];
    box.addEventListener('change', () => store.toggleOverlay(key));
    overlays.append(el('label', { class: 'overlay-toggle' }, box, key));
  }

  content.append(
    header,
    el('div', { class: 'case-grid' },
      el('div', { class: 'panel' }, viewer.root, overlays, runRow),
      buildAnnotator(client, store, caseId, () => void refreshPanels()),
    ),
    registrationRoot,
    curvesRoot,
    predictionRoot,
  );

  const firstTime = detail.frame_times[0];
  if (firstTime !== undefined) await guard(() => viewer.showFrame(firstTime));
  await refreshPanels();
}

async function route(): Promise<void> {
  const hash = window.location.hash;
  const match = /^#\/case\/(.+)$/.exec(hash);
  store.setError(null);
  if (match) {
    await showCase(decodeURIComponent(match[1]!));
  } else {
    clear(content);
    await guard(() => renderCaseList(client, content));
  }
}

window.addEventListener('hashchange', () => void route());

document.body.append(
  el('header', {}, el('h1', {}, 'thermoviab review'), offlineBanner, errorBanner),
  content,
);
void route();
