/** Pure rendering: server payloads in, markup out. Nothing is computed
 * client-side beyond formatting; traces are stored verbatim. */

import type { MessageResponse, NeighborsResponse, TurnView } from "./types.js";

export const MAX_TURNS = 8;

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** The trace is kept exactly as the server sent it. */
export function buildTurnView(userText: string, trace: MessageResponse): TurnView {
  return { userText, trace };
}

export function turnCapReached(turn: number, maxTurns: number = MAX_TURNS): boolean {
  return turn >= maxTurns;
}

export function renderReward(view: TurnView): string {
  const r = view.trace.reward_breakdown;
  return (
    `relevance ${r.relevance.toFixed(3)} | closeness ${r.closeness.toFixed(3)} | ` +
    `repetition ${r.repetition} | total ${r.weighted_total.toFixed(3)}`
  );
}

export function renderTurnView(view: TurnView): string {
  const t = view.trace;
  return [
    `<div class="turn" data-turn="${t.turn}">`,
    `  <div class="user">you: ${escapeHtml(view.userText)}</div>`,
    `  <div class="agent">bot: ${escapeHtml(t.response)}</div>`,
    `  <div class="trace">`,
    `    <span class="goal" data-goal="${t.goal_id}">goal ${t.goal_id} ` +
      `(${t.goal_terms.map(escapeHtml).join(", ")})</span>`,
    `    <span class="vertex" data-vertex="${t.vertex_id}">vertex ${t.vertex_id} ` +
      `&quot;${escapeHtml(t.vertex_phrase)}&quot;</span>`,
    `    <span class="reward">${renderReward(view)}</span>`,
    `  </div>`,
    `</div>`,
  ].join("\n");
}

export function renderTranscript(views: TurnView[]): string {
  return views.map(renderTurnView).join("\n");
}

/** Neighbor rows in exactly the order the API returned them. */
export function renderNeighborList(resp: NeighborsResponse): string {
  if (resp.neighbors.length === 0) {
    return `<div class="empty">no ${escapeHtml(resp.type)} neighbors</div>`;
  }
  const rows = resp.neighbors.map(
    (n) =>
      `<li class="neighbor" data-id="${n.id}">` +
      `<button data-recenter="${n.id}">#${n.id}</button> ` +
      `weight ${n.weight.toFixed(4)}</li>`,
  );
  return `<ul class="neighbors">\n${rows.join("\n")}\n</ul>`;
}

export function renderCapNotice(turn: number): string {
  return `<div class="cap">turn cap reached (${turn}/${MAX_TURNS}); start a new session</div>`;
}

export function renderPinState(pinGoal: number | null): string {
  return pinGoal === null
    ? `<span class="pin none">no goal pinned</span>`
    : `<span class="pin active" data-pin="${pinGoal}">next turn pinned to goal ${pinGoal}</span>`;
}
