/** Payload shapes of the gateway API, verbatim. */

export interface Annotation {
  nodule_id: string;
  point: [number, number];
  polygon: [number, number][] | null;
}

export interface CaseRow {
  case_id: string;
  participant_id: string | null;
  label: string | null;
  status: string;
  review_required: boolean;
}

export interface CaseDetail extends CaseRow {
  busy: boolean;
  width: number;
  height: number;
  nominal_rate_hz: number;
  frame_times: number[];
  provenance: unknown;
  annotations: Annotation[];
  artifacts: { warps: boolean; roi: boolean; features: boolean; outcome: boolean };
}

export type JobStatus = 'queued' | 'running' | 'done' | 'failed';

export interface Job {
  job: string;
  case_id: string;
  stage: string;
  status: JobStatus;
  result: Record<string, unknown> | null;
  error: { error: string; message: string } | null;
}

export interface RegionSeries {
  region: string;
  signal: string;
  samples: number[];
}

export interface CurvesPayload {
  times: number[];
  nodules: { nodule_id: string; series: RegionSeries[] }[];
}

export interface NoduleOutcome {
  nodule_id: string;
  p: number[];
  votes: number[];
  F: number;
  label: string;
}

export interface OutcomePayload {
  schema: number;
  case_id: string | null;
  families: string[];
  vote_threshold: number;
  nodules: NoduleOutcome[];
}

export interface RegistrationFrame {
  frame_index: number;
  rho: number;
  iterations: number;
  converged: boolean;
  before: string;
  after: string;
}

export interface RegistrationPayload {
  review_required: boolean;
  precool: { rho: number; iterations: number; converged: boolean };
  frames: RegistrationFrame[];
}

export type Stage = 'align' | 'segment' | 'features' | 'predict';
