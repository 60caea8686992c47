/** Prediction panel. Renders the gateway's classification payload as-is:
 * no probabilities are recomputed, rounded, or re-derived client-side.
 * Numeric cells show the literal tokens from the response text, so what
 * the technician reads is byte-identical to what the server sent. */

import type { GatewayClient } from '../api.js';
import { clear, el } from '../dom.js';
import { items, member, numberToken, parseRaw } from '../rawjson.js';
import type { OutcomePayload } from '../types.js';

export interface NoduleTokens {
  p: string[];
  votes: string[];
  F: string;
}

export interface PredictionModel {
  /** exact bytes of the gateway response */
  raw: string;
  doc: OutcomePayload;
  /** per-nodule literal number tokens, in document order */
  tokens: NoduleTokens[];
}

export function buildPredictionModel(raw: string): PredictionModel {
  const doc = JSON.parse(raw) as OutcomePayload;
  const tokens = items(member(parseRaw(raw), 'nodules')).map((nodule) => ({
    p: items(member(nodule, 'p')).map(numberToken),
    votes: items(member(nodule, 'votes')).map(numberToken),
    F: numberToken(member(nodule, 'F')),
  }));
  return { raw, doc, tokens };
}

export function renderPredictionPanel(
  root: HTMLElement,
  model: PredictionModel,
  reviewRequired: boolean,
): void {
  clear(root);
  root.append(el('h3', {}, 'Prediction'));
  if (reviewRequired) {
    root.append(
      el('div', { class: 'banner warn' },
        'Review required: alignment quality was low. Treat this classification with caution.'),
    );
  }
  const doc = model.doc;
  doc.nodules.forEach((nodule, n) => {
    const tok = model.tokens[n]!;
    const table = el('table', { class: 'pred-table' });
    table.append(
      el('tr', {},
        el('th', {}, 'Family'),
        el('th', {}, 'p'),
        el('th', {}, 'Vote'),
      ),
    );
    doc.families.forEach((family, i) => {
      table.append(
        el('tr', {},
          el('td', {}, family),
          el('td', { class: 'mono' }, tok.p[i]),
          el('td', { class: 'mono' }, tok.votes[i]),
        ),
      );
    });
    const verdict = el(
      'div',
      { class: `verdict ${nodule.label}` },
      `F = ${tok.F} of ${doc.families.length} (threshold ${doc.vote_threshold}) → ${nodule.label}`,
    );
    root.append(el('h4', {}, `Nodule ${nodule.nodule_id}`), table, verdict);
  });
  root.append(
    el('details', { class: 'raw-json' },
      el('summary', {}, 'Raw gateway payload'),
      el('pre', { class: 'mono' }, model.raw),
    ),
  );
}

export async function loadPrediction(
  client: GatewayClient,
  root: HTMLElement,
  caseId: string,
  reviewRequired: boolean,
): Promise<PredictionModel> {
  const { raw } = await client.resultRaw(caseId);
  const model = buildPredictionModel(raw);
  renderPredictionPanel(root, model, reviewRequired);
  return model;
}
