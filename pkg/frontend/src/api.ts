/** Typed client for the gateway. All pipeline work happens server-side;
 * this module only moves JSON and image bytes. */

import type {
  Annotation,
  CaseDetail,
  CaseRow,
  CurvesPayload,
  Job,
  OutcomePayload,
  RegistrationPayload,
  Stage,
} from './types.js';

export class ApiError extends Error {
  status: number;
  kind: string;

  constructor(status: number, kind: string, message: string) {
    super(message);
    this.status = status;
    this.kind = kind;
  }
}

/** Network-level failure (server unreachable), as opposed to an API error. */
export class OfflineError extends Error {}

export interface FramePng {
  blob: Blob;
  /** temperature window of the render, °C */
  min: number;
  max: number;
  /** timestamp actually served (nearest frame) */
  seconds: number;
}

async function parseError(res: Response): Promise<ApiError> {
  let kind = 'HTTPError';
  let message = `${res.status} ${res.statusText}`;
  try {
    const doc = await res.json();
    if (doc && typeof doc === 'object') {
      if (typeof doc.error === 'string') kind = doc.error;
      if (typeof doc.message === 'string') message = doc.message;
      else if (typeof doc.detail === 'string') message = doc.detail;
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(res.status, kind, message);
}

export class GatewayClient {
  base: string;

  constructor(base = '') {
    this.base = base.replace(/\/+$/, '');
  }

  url(path: string): string {
    return `${this.base}${path}`;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    let res: Response;
    try {
      res = await fetch(this.url(path), init);
    } catch (err) {
      throw new OfflineError(err instanceof Error ? err.message : String(err));
    }
    if (!res.ok) throw await parseError(res);
    return res;
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.request(path, init);
    return (await res.json()) as T;
  }

  listCases(): Promise<CaseRow[]> {
    return this.json<CaseRow[]>('/api/cases');
  }

  caseDetail(caseId: string): Promise<CaseDetail> {
    return this.json<CaseDetail>(`/api/cases/${encodeURIComponent(caseId)}`);
  }

  frameUrl(caseId: string, t: number): string {
    return this.url(`/api/cases/${encodeURIComponent(caseId)}/frames/${t}.png`);
  }

  async framePng(caseId: string, t: number): Promise<FramePng> {
    const res = await this.request(`/api/cases/${encodeURIComponent(caseId)}/frames/${t}.png`);
    const blob = await res.blob();
    return {
      blob,
      min: Number(res.headers.get('X-Temperature-Min')),
      max: Number(res.headers.get('X-Temperature-Max')),
      seconds: Number(res.headers.get('X-Frame-Seconds')),
    };
  }

  curves(caseId: string): Promise<CurvesPayload> {
    return this.json<CurvesPayload>(`/api/cases/${encodeURIComponent(caseId)}/curves`);
  }

  putAnnotations(
    caseId: string,
    annotations: Annotation[],
  ): Promise<{ case_id: string; annotations: Annotation[]; status: string }> {
    return this.json(`/api/cases/${encodeURIComponent(caseId)}/annotations`, {
      method: 'PUT',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ annotations }),
    });
  }

  runStage(caseId: string, stage: Stage, options: Record<string, unknown> = {}): Promise<Job> {
    return this.json<Job>(`/api/cases/${encodeURIComponent(caseId)}/run`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ stage, ...options }),
    });
  }

  job(jobId: string): Promise<Job> {
    return this.json<Job>(`/api/jobs/${encodeURIComponent(jobId)}`);
  }

  /** Raw text plus parsed document so callers can render the payload
   * without any reformatting of the server's bytes. */
  async resultRaw(caseId: string): Promise<{ raw: string; doc: OutcomePayload }> {
    const res = await this.request(`/api/cases/${encodeURIComponent(caseId)}/result`);
    const raw = await res.text();
    return { raw, doc: JSON.parse(raw) as OutcomePayload };
  }

  registration(caseId: string): Promise<RegistrationPayload> {
    return this.json<RegistrationPayload>(`/api/cases/${encodeURIComponent(caseId)}/registration`);
  }
}
