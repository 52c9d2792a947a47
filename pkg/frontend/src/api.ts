/** REST client for the atlas chat/graph service. */

import type {
  EdgeType,
  MessageResponse,
  NeighborsResponse,
  VertexRecord,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`${status}: ${detail}`);
  }
}

async function unwrap<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = await resp.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body: keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return resp.json() as Promise<T>;
}

export class AtlasClient {
  constructor(private readonly baseUrl: string = "") {}

  async createSession(): Promise<string> {
    const resp = await fetch(`${this.baseUrl}/api/session`, { method: "POST" });
    const body = await unwrap<{ session_id: string }>(resp);
    return body.session_id;
  }

  /** Send one user message; pinGoal, when set, restricts the goal choice. */
  async sendMessage(
    sessionId: string,
    text: string,
    pinGoal: number | null = null,
  ): Promise<MessageResponse> {
    const payload: Record<string, unknown> = { text };
    if (pinGoal !== null) payload.pin_goal = pinGoal;
    const resp = await fetch(`${this.baseUrl}/api/session/${sessionId}/message`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    return unwrap<MessageResponse>(resp);
  }

  async getVertex(id: number, kind: "utter" | "sess" = "utter"): Promise<VertexRecord> {
    const resp = await fetch(`${this.baseUrl}/api/graph/vertex/${id}?kind=${kind}`);
    return unwrap<VertexRecord>(resp);
  }

  async getNeighbors(
    id: number,
    type: EdgeType = "uu",
    limit = 20,
  ): Promise<NeighborsResponse> {
    const resp = await fetch(
      `${this.baseUrl}/api/graph/neighbors/${id}?type=${type}&limit=${limit}`,
    );
    return unwrap<NeighborsResponse>(resp);
  }
}
