/** Registration review: per-frame correlation timeline and a before/after
 * blink comparator for the selected frame. */

import type { GatewayClient } from '../api.js';
import { clear, el } from '../dom.js';
import type { RegistrationPayload } from '../types.js';

export const RHO_FLOOR = 0.9;

/** Bar heights (0..1) for the rho timeline; rho below the review floor is
 * flagged. Kept pure for testing. */
export function rhoBars(payload: RegistrationPayload): { height: number; flagged: boolean }[] {
  return payload.frames.map((f) => ({
    height: Math.max(0, Math.min(1, f.rho)),
    flagged: f.rho < RHO_FLOOR,
  }));
}

export async function renderRegistration(
  client: GatewayClient,
  root: HTMLElement,
  caseId: string,
): Promise<void> {
  const payload = await client.registration(caseId);
  clear(root);

  const timeline = el('div', { class: 'rho-timeline' });
  const img = el('img', { class: 'diff-image' });
  const blinkLabel = el('span', { class: 'blink-label' }, 'before');
  let selected = 0;
  let showAfter = false;

  function refreshImage(): void {
    const frame = payload.frames[selected];
    if (!frame) return;
    img.src = client.url(showAfter ? frame.after : frame.before);
    blinkLabel.textContent = `frame ${frame.frame_index} - ${showAfter ? 'after' : 'before'} `
      + `(rho ${frame.rho.toFixed(4)})`;
  }

  const bars = rhoBars(payload);
  bars.forEach((bar, i) => {
    const div = el('div', {
      class: `rho-bar${bar.flagged ? ' flagged' : ''}`,
      title: `frame ${i}: rho ${payload.frames[i]!.rho.toFixed(4)}`,
      onclick: () => {
        selected = i;
        refreshImage();
      },
    });
    div.style.height = `${(bar.height * 100).toFixed(1)}%`;
    timeline.append(div);
  });

  const blink = setInterval(() => {
    showAfter = !showAfter;
    refreshImage();
  }, 700);
  // stop blinking when the section leaves the document
  const observer = new MutationObserver(() => {
    if (!root.isConnected) {
      clearInterval(blink);
      observer.disconnect();
    }
  });
  observer.observe(document.body, { childList: true, subtree: true });

  refreshImage();
  root.append(
    el('h3', {}, 'Registration'),
    payload.review_required
      ? el('div', { class: 'banner warn' }, 'Alignment flagged for review: low correlation on at least one frame.')
      : el('div', { class: 'banner ok' }, `Alignment healthy (precool rho ${payload.precool.rho.toFixed(4)}).`),
    timeline,
    el('div', { class: 'blink-box' }, img, blinkLabel),
  );
}
