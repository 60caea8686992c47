/** Case list: one row per case with progress and review flags. */

import type { GatewayClient } from '../api.js';
import { clear, el } from '../dom.js';

export async function renderCaseList(client: GatewayClient, root: HTMLElement): Promise<void> {
  const rows = await client.listCases();
  clear(root);
  const table = el('table', { class: 'case-table' });
  table.append(
    el(
      'tr',
      {},
      el('th', {}, 'Case'),
      el('th', {}, 'Participant'),
      el('th', {}, 'Label'),
      el('th', {}, 'Status'),
      el('th', {}, 'Review'),
    ),
  );
  for (const row of rows) {
    const link = el('a', { href: `#/case/${encodeURIComponent(row.case_id)}` }, row.case_id);
    table.append(
      el(
        'tr',
        { class: row.review_required ? 'review-needed' : '' },
        el('td', {}, link),
        el('td', {}, row.participant_id ?? ''),
        el('td', {}, row.label ?? 'unlabelled'),
        el('td', {}, row.status),
        el('td', {}, row.review_required ? 'needs review' : ''),
      ),
    );
  }
  root.append(el('h2', {}, 'Cases'), table);
}
