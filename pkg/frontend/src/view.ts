/** Pure HTML renderers for the transcript.
 *
 * Everything here is a string-in/string-out function so rendering rules can
 * be tested without a DOM. The rules the tests pin down: a sources panel
 * appears only on answer turns and only lists citations the service
 * returned; clarification turns get a visible badge and no sources; any
 * turn the service could not verify against its sources carries an
 * "unverified" marker.
 */

import { ChatError, TurnView } from "./store.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function renderSource(source: { passageId: string; docId?: string; snippet?: string; score?: number }): string {
  const parts = [`<span class="source-id">${escapeHtml(source.passageId)}</span>`];
  if (source.docId) {
    parts.push(`<span class="source-doc">${escapeHtml(source.docId)}</span>`);
  }
  if (source.score !== undefined) {
    parts.push(`<span class="source-score">${source.score.toFixed(3)}</span>`);
  }
  if (source.snippet) {
    parts.push(`<span class="source-snippet">${escapeHtml(source.snippet)}</span>`);
  }
  return `<li class="source">${parts.join(" ")}</li>`;
}

export function renderTurn(turn: TurnView): string {
  const pieces = [
    `<div class="turn-user">${escapeHtml(turn.userText)}</div>`,
  ];

  const classes = ["turn-assistant", `turn-${turn.kind}`];
  const body = [`<p class="turn-text">${escapeHtml(turn.text)}</p>`];

  if (turn.kind === "clarification") {
    body.unshift(`<span class="badge badge-clarification">needs clarification</span>`);
  }
  if (turn.kind === "answer" && !turn.grounded) {
    body.push(`<span class="marker-unverified">unverified against sources</span>`);
  }
  if (turn.kind === "answer" && turn.sources.length > 0) {
    const items = turn.sources.map(renderSource).join("");
    body.push(`<ul class="sources">${items}</ul>`);
  }

  pieces.push(`<div class="${classes.join(" ")}">${body.join("")}</div>`);
  return `<section class="turn">${pieces.join("")}</section>`;
}

export function renderTranscript(turns: readonly TurnView[]): string {
  return turns.map(renderTurn).join("");
}

export function renderError(error: ChatError | null): string {
  if (!error) {
    return "";
  }
  return `<div class="error" data-code="${escapeHtml(error.code)}">${escapeHtml(error.message)}</div>`;
}
