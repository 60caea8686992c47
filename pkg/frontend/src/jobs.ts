/** Job polling at 1 Hz until a terminal state. */

import type { GatewayClient } from './api.js';
import type { Job } from './types.js';

export const POLL_INTERVAL_MS = 1000;

export interface PollHandle {
  done: Promise<Job>;
  cancel: () => void;
}

export function pollJob(
  client: GatewayClient,
  jobId: string,
  onUpdate?: (job: Job) => void,
  intervalMs = POLL_INTERVAL_MS,
): PollHandle {
  let timer: ReturnType<typeof setTimeout> | null = null;
  let cancelled = false;

  const done = new Promise<Job>((resolve, reject) => {
    const tick = async () => {
      if (cancelled) return;
      let job: Job;
      try {
        job = await client.job(jobId);
      } catch (err) {
        reject(err);
        return;
      }
      if (onUpdate) onUpdate(job);
      if (job.status === 'done' || job.status === 'failed') {
        resolve(job);
        return;
      }
      timer = setTimeout(tick, intervalMs);
    };
    void tick();
  });

  return {
    done,
    cancel: () => {
      cancelled = true;
      if (timer !== null) clearTimeout(timer);
    },
  };
}
