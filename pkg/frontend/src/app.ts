/** DOM wiring for the console: chat panel with per-turn traces, the goal
 * pin control, and the neighborhood explorer. */

import { ApiError, AtlasClient } from "./api.js";
import { ChatController } from "./controller.js";
import type { EdgeType } from "./types.js";
import {
  renderCapNotice,
  renderNeighborList,
  renderPinState,
  renderTranscript,
} from "./views.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function baseUrl(): string {
  const fromGlobal = (window as { ATLAS_BASE_URL?: string }).ATLAS_BASE_URL;
  return fromGlobal ?? "";
}

export function startApp(): void {
  const client = new AtlasClient(baseUrl());
  const chat = new ChatController(client);

  const transcript = el<HTMLDivElement>("transcript");
  const input = el<HTMLInputElement>("chat-input");
  const sendBtn = el<HTMLButtonElement>("send");
  const banner = el<HTMLDivElement>("banner");
  const pinInput = el<HTMLInputElement>("pin-input");
  const pinBtn = el<HTMLButtonElement>("pin");
  const clearPinBtn = el<HTMLButtonElement>("clear-pin");
  const pinState = el<HTMLSpanElement>("pin-state");
  const explorer = el<HTMLDivElement>("explorer");
  const exploreInput = el<HTMLInputElement>("explore-input");
  const edgeType = el<HTMLSelectElement>("edge-type");
  const exploreBtn = el<HTMLButtonElement>("explore");

  let lastText: string | null = null;

  function toast(message: string): void {
    banner.textContent = message;
    banner.className = "banner error";
    setTimeout(() => (banner.className = "banner hidden"), 4000);
  }

  function refresh(): void {
    transcript.innerHTML =
      renderTranscript(chat.transcript) +
      (chat.capReached ? renderCapNotice(chat.transcript.length) : "");
    pinState.innerHTML = renderPinState(chat.pinGoal);
    input.disabled = chat.capReached;
    sendBtn.disabled = chat.capReached;
    transcript.scrollTop = transcript.scrollHeight;
  }

  async function send(text: string): Promise<void> {
    if (!text.trim()) return;
    lastText = text;
    const outcome = await chat.send(text);
    switch (outcome.kind) {
      case "turn": {
        input.value = "";
        const vertex = outcome.view.trace.vertex_id;
        exploreInput.value = String(vertex);
        await explore(vertex, edgeType.value as EdgeType);
        break;
      }
      case "cap":
        break;
      case "rejected":
        toast(`rejected: ${outcome.reason}`);
        break;
      case "network":
        banner.innerHTML =
          `network failure - <button id="retry">retry</button>`;
        banner.className = "banner error";
        el<HTMLButtonElement>("retry").onclick = () => {
          banner.className = "banner hidden";
          if (lastText) void send(lastText);
        };
        break;
    }
    refresh();
  }

  async function explore(id: number, type: EdgeType): Promise<void> {
    try {
      const resp = await client.getNeighbors(id, type, 25);
      explorer.innerHTML =
        `<div class="center">vertex #${resp.id} (${resp.type})</div>` +
        renderNeighborList(resp);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        toast(`unknown vertex ${id}`);
      } else {
        toast(String(err));
      }
    }
  }

  sendBtn.onclick = () => void send(input.value);
  input.onkeydown = (ev) => {
    if (ev.key === "Enter") void send(input.value);
  };
  pinBtn.onclick = () => {
    const value = Number(pinInput.value);
    if (Number.isInteger(value)) {
      chat.pin(value);
      refresh();
    }
  };
  clearPinBtn.onclick = () => {
    chat.clearPin();
    refresh();
  };
  exploreBtn.onclick = () => {
    const id = Number(exploreInput.value);
    if (Number.isInteger(id)) void explore(id, edgeType.value as EdgeType);
  };
  explorer.onclick = (ev) => {
    const target = ev.target as HTMLElement;
    const recenter = target.getAttribute("data-recenter");
    if (recenter !== null) {
      exploreInput.value = recenter;
      void explore(Number(recenter), edgeType.value as EdgeType);
    }
  };

  refresh();
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", startApp);
}
