/** Wire types mirroring the chat service JSON, field for field. */

export interface RewardBreakdown {
  relevance: number;
  closeness: number;
  repetition: number;
  weighted_total: number;
  scorer_failed: boolean;
}

export interface MessageResponse {
  response: string;
  goal_id: number;
  goal_terms: string[];
  vertex_id: number;
  vertex_phrase: string;
  reward_breakdown: RewardBreakdown;
  turn: number;
}

export interface NeighborEntry {
  id: number;
  weight: number;
}

export interface NeighborsResponse {
  id: number;
  type: string;
  neighbors: NeighborEntry[];
}

export interface VertexRecord {
  id: number;
  kind: "utter" | "sess";
  phrase?: string;
  terms?: string[];
}

/** One rendered turn: the user's text plus the server trace, verbatim. */
export interface TurnView {
  userText: string;
  trace: MessageResponse;
}

export type EdgeType = "uu" | "su" | "ss";
