"""HTTP service exposing the trained agent and graph lookups."""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .errors import AtlasError, GraphError, UnmappableContext
from .generator import Seq2SeqGenerator
from .graph import StructureGraph, goal_top_terms
from .model import ModelBundle
from .policy import MAX_TURNS, DialogAgent, PolicyNet
from .relevance import RelevanceScorer


@dataclass
class ServiceArtifacts:
    bundle: ModelBundle
    graph: StructureGraph
    generator: Seq2SeqGenerator
    policy: PolicyNet
    scorer: RelevanceScorer
    max_turns: int = MAX_TURNS
    beam_size: int = 3  # rollouts decode greedily; the service uses beam search


@dataclass
class _Session:
    agent: DialogAgent
    lock: threading.Lock = field(default_factory=threading.Lock)
    created_at: float = field(default_factory=time.time)
    last_active: float = field(default_factory=time.time)
    transcript: list[dict] = field(default_factory=list)


class MessageIn(BaseModel):
    text: str
    pin_goal: int | None = None


def create_app(
    artifacts: ServiceArtifacts | None,
    static_dir: str | Path | None = None,
    idle_ttl: float = 3600.0,
) -> FastAPI:
    app = FastAPI(title="atlas chat service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()
    goal_terms_cache: dict[int, list[str]] = {}

    def _get_session(session_id: str) -> _Session:
        with registry_lock:
            now = time.time()
            expired = [sid for sid, s in sessions.items() if now - s.last_active > idle_ttl]
            for sid in expired:
                del sessions[sid]
            sess = sessions.get(session_id)
        if sess is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return sess

    def _goal_terms(goal_id: int) -> list[str]:
        if goal_id not in goal_terms_cache:
            goal_terms_cache[goal_id] = goal_top_terms(artifacts.graph, goal_id)
        return goal_terms_cache[goal_id]

    @app.post("/api/session")
    def create_session():
        if artifacts is None:
            raise HTTPException(status_code=503, detail="artifacts not loaded")
        agent = DialogAgent(
            artifacts.policy, artifacts.bundle, artifacts.graph,
            artifacts.generator, artifacts.scorer,
            mode="argmax", max_turns=artifacts.max_turns,
            decode="beam" if artifacts.beam_size > 1 else "greedy",
            beam_size=artifacts.beam_size,
        )
        session_id = uuid.uuid4().hex
        with registry_lock:
            sessions[session_id] = _Session(agent=agent)
        return {"session_id": session_id}

    @app.post("/api/session/{session_id}/message")
    def post_message(session_id: str, body: MessageIn):
        if artifacts is None:
            raise HTTPException(status_code=503, detail="artifacts not loaded")
        sess = _get_session(session_id)
        with sess.lock:
            sess.last_active = time.time()
            if sess.agent.turn >= artifacts.max_turns:
                raise HTTPException(status_code=409, detail="turn cap reached")
            try:
                record = sess.agent.step(body.text, pin_goal=body.pin_goal)
            except UnmappableContext as e:
                raise HTTPException(status_code=422, detail=str(e))
            except AtlasError as e:
                raise HTTPException(status_code=400, detail=str(e))
            payload = {
                "response": " ".join(record.response),
                "goal_id": record.goal_id,
                "goal_terms": _goal_terms(record.goal_id),
                "vertex_id": record.vertex_id,
                "vertex_phrase": " ".join(record.vertex_phrase),
                "reward_breakdown": record.reward.as_dict(),
                "turn": sess.agent.turn,
            }
            sess.transcript.append(payload)
            return payload

    @app.get("/api/graph/vertex/{vertex_id}")
    def get_vertex(vertex_id: int, kind: str = "utter"):
        if artifacts is None:
            raise HTTPException(status_code=503, detail="artifacts not loaded")
        graph = artifacts.graph
        if kind == "utter" and vertex_id in graph.utter_vertices:
            return {"id": vertex_id, "kind": "utter",
                    "phrase": " ".join(graph.utter_vertices[vertex_id])}
        if kind == "sess" and vertex_id in graph.sess_vertices:
            return {"id": vertex_id, "kind": "sess", "terms": _goal_terms(vertex_id)}
        raise HTTPException(status_code=404, detail="unknown vertex")

    @app.get("/api/graph/neighbors/{vertex_id}")
    def get_neighbors(vertex_id: int, type: str = "uu", limit: int = 20,
                      kind: str = "utter"):
        if artifacts is None:
            raise HTTPException(status_code=503, detail="artifacts not loaded")
        graph = artifacts.graph
        try:
            if type == "su" and kind == "sess":
                neighbors = [(u, graph.su_edges[(vertex_id, u)])
                             for u in graph.children(vertex_id)]
            else:
                neighbors = graph.neighbors(vertex_id, type)
        except GraphError as e:
            raise HTTPException(status_code=404, detail=str(e))
        neighbors = neighbors[: max(0, limit)]
        return {
            "id": vertex_id,
            "type": type,
            "neighbors": [{"id": nid, "weight": w} for nid, w in neighbors],
        }

    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="console")

    return app
