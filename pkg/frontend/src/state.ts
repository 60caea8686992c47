/** View state for one technician session. Pure transitions; rendering
 * subscribes and reacts. The one hard invariant: no annotation editing
 * while a job runs on the selected case. */

import { PolygonDraft } from './polygon.js';
import type { Annotation, Job } from './types.js';

export interface OverlayToggles {
  mask: boolean;
  points: boolean;
  registrationDiff: boolean;
}

export type Tool = 'scrub' | 'polygon' | 'point';

export interface ViewState {
  caseId: string | null;
  frameTime: number | null;
  overlays: OverlayToggles;
  tool: Tool;
  draft: PolygonDraft;
  /** local working copy; server copy is authoritative after PUT */
  annotations: Annotation[];
  dirty: boolean;
  job: Job | null;
  offline: boolean;
  lastError: string | null;
}

export function initialState(): ViewState {
  return {
    caseId: null,
    frameTime: null,
    overlays: { mask: true, points: true, registrationDiff: false },
    tool: 'scrub',
    draft: new PolygonDraft(),
    annotations: [],
    dirty: false,
    job: null,
    offline: false,
    lastError: null,
  };
}

export function jobActive(state: ViewState): boolean {
  return state.job !== null && (state.job.status === 'queued' || state.job.status === 'running');
}

/** Polygon/point tools are unavailable while a job runs on the case. */
export function editingAllowed(state: ViewState): boolean {
  return state.caseId !== null && !jobActive(state);
}

type Listener = (state: ViewState) => void;

export class Store {
  state: ViewState;
  private listeners: Listener[] = [];

  constructor(state: ViewState = initialState()) {
    this.state = state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.state);
  }

  update(patch: Partial<ViewState>): void {
    this.state = { ...this.state, ...patch };
    this.emit();
  }

  selectCase(caseId: string, annotations: Annotation[], firstFrame: number | null): void {
    this.update({
      caseId,
      frameTime: firstFrame,
      annotations,
      draft: new PolygonDraft(),
      dirty: false,
      job: null,
      lastError: null,
    });
  }

  setFrame(t: number): void {
    this.update({ frameTime: t });
  }

  setTool(tool: Tool): void {
    if (tool !== 'scrub' && !editingAllowed(this.state)) return;
    this.update({ tool });
  }

  toggleOverlay(key: keyof OverlayToggles): void {
    this.update({ overlays: { ...this.state.overlays, [key]: !this.state.overlays[key] } });
  }

  /** Draft mutations bounce while a job runs. Returns whether applied. */
  mutateDraft(fn: (draft: PolygonDraft) => void): boolean {
    if (!editingAllowed(this.state)) return false;
    fn(this.state.draft);
    this.emit();
    return true;
  }

  setAnnotations(annotations: Annotation[], dirty: boolean): void {
    if (dirty && !editingAllowed(this.state)) return;
    this.update({ annotations, dirty });
  }

  setJob(job: Job | null): void {
    const patch: Partial<ViewState> = { job };
    // a running job forces the tool back to scrubbing
    if (job !== null && (job.status === 'queued' || job.status === 'running')) {
      patch.tool = 'scrub';
    }
    this.update(patch);
  }

  setOffline(offline: boolean): void {
    if (offline !== this.state.offline) this.update({ offline });
  }

  setError(message: string | null): void {
    this.update({ lastError: message });
  }
}
