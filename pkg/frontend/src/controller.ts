/** Chat session state machine: wraps the client, owns the transcript, the
 * goal pin, and the turn cap. DOM-free so it is directly testable. */

import { ApiError, AtlasClient } from "./api.js";
import type { MessageResponse, TurnView } from "./types.js";
import { MAX_TURNS, buildTurnView, turnCapReached } from "./views.js";

export type SendOutcome =
  | { kind: "turn"; view: TurnView }
  | { kind: "cap" }
  | { kind: "rejected"; reason: string }
  | { kind: "network"; reason: string };

export class ChatController {
  readonly transcript: TurnView[] = [];
  pinGoal: number | null = null;
  capReached = false;
  private sessionId: string | null = null;

  constructor(
    private readonly client: AtlasClient,
    private readonly maxTurns: number = MAX_TURNS,
  ) {}

  async ensureSession(): Promise<string> {
    if (this.sessionId === null) {
      this.sessionId = await this.client.createSession();
    }
    return this.sessionId;
  }

  pin(goalId: number): void {
    this.pinGoal = goalId;
  }

  clearPin(): void {
    this.pinGoal = null;
  }

  get lastTrace(): MessageResponse | null {
    const last = this.transcript[this.transcript.length - 1];
    return last ? last.trace : null;
  }

  /** One round trip; the pin applies to exactly one turn and then clears. */
  async send(text: string): Promise<SendOutcome> {
    if (this.capReached) return { kind: "cap" };
    let sessionId: string;
    try {
      sessionId = await this.ensureSession();
    } catch (err) {
      return { kind: "network", reason: String(err) };
    }
    const pinned = this.pinGoal;
    try {
      const trace = await this.client.sendMessage(sessionId, text, pinned);
      const view = buildTurnView(text, trace);
      this.transcript.push(view);
      this.pinGoal = null;
      if (turnCapReached(trace.turn, this.maxTurns)) this.capReached = true;
      return { kind: "turn", view };
    } catch (err) {
      if (err instanceof ApiError) {
        if (err.status === 409) {
          this.capReached = true;
          return { kind: "cap" };
        }
        // invalid pin or unmappable input: surface the reason, keep the pin
        // so the user can correct it deliberately
        return { kind: "rejected", reason: err.detail };
      }
      return { kind: "network", reason: String(err) };
    }
  }
}
