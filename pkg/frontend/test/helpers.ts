import type { MessageResponse } from "../src/types.js";

export interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

export type Route = (call: RecordedCall) => { status: number; body: unknown };

/** Minimal fetch stub: routes by predicate, records every call. */
export function installFetch(routes: Array<[RegExp, Route]>): RecordedCall[] {
  const calls: RecordedCall[] = [];
  globalThis.fetch = (async (input: RequestInfo | URL, init?: RequestInit) => {
    const url = String(input);
    const call: RecordedCall = {
      url,
      method: init?.method ?? "GET",
      body: init?.body ? JSON.parse(String(init.body)) : null,
    };
    calls.push(call);
    for (const [pattern, route] of routes) {
      if (pattern.test(url)) {
        const { status, body } = route(call);
        return new Response(JSON.stringify(body), {
          status,
          headers: { "Content-Type": "application/json" },
        });
      }
    }
    throw new TypeError(`no route for ${url}`);
  }) as typeof fetch;
  return calls;
}

export function sampleTrace(turn = 1): MessageResponse {
  return {
    response: "let us go to Huangshan",
    goal_id: 2,
    goal_terms: ["travel", "mountain", "trip"],
    vertex_id: 7,
    vertex_phrase: "go to Huangshan",
    reward_breakdown: {
      relevance: 0.8125,
      closeness: 0.5,
      repetition: 0,
      weighted_total: 49.0,
      scorer_failed: false,
    },
    turn,
  };
}
