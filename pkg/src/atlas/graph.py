"""Co-occurrence accumulation over mapped sessions and construction of the
final two-layer structure graph."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import SessionStore, Vocab
from .errors import GraphError
from .model import ModelBundle

GRAPH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SessionAssignment:
    session_id: str
    z_ids: tuple[int, ...]
    g_id: int


def map_corpus(bundle: ModelBundle, store: SessionStore) -> list[SessionAssignment]:
    """Deterministic argmax recognition of every session in the store."""
    model, vocab, index = bundle.model, bundle.vocab, bundle.index
    model.eval()
    out = []
    import torch

    with torch.no_grad():
        for sess in store:
            tokens = [u.tokens for u in sess.utterances]
            token_ids = [vocab.encode(t) for t in tokens]
            rec = model.recognize(token_ids, index, tokens, mode="argmax")
            out.append(SessionAssignment(sess.session_id, tuple(rec.z_ids), rec.g_id))
    return out


@dataclass
class CoOccurrenceStats:
    cnt_sess: Counter = field(default_factory=Counter)
    cnt_utter: Counter = field(default_factory=Counter)
    cnt_su: Counter = field(default_factory=Counter)
    cnt_uu: Counter = field(default_factory=Counter)

    def merge(self, other: "CoOccurrenceStats") -> "CoOccurrenceStats":
        merged = CoOccurrenceStats()
        for name in ("cnt_sess", "cnt_utter", "cnt_su", "cnt_uu"):
            c = Counter(getattr(self, name))
            c.update(getattr(other, name))
            setattr(merged, name, c)
        return merged


def accumulate(assignments: Iterable[SessionAssignment]) -> CoOccurrenceStats:
    """Count session/utterance vertex usage, membership pairs, and adjacent
    utterance-vertex transitions."""
    stats = CoOccurrenceStats()
    for a in assignments:
        stats.cnt_sess[a.g_id] += 1
        for z in a.z_ids:
            stats.cnt_utter[z] += 1
            stats.cnt_su[(a.g_id, z)] += 1
        for j, k in zip(a.z_ids, a.z_ids[1:]):
            stats.cnt_uu[(j, k)] += 1
    return stats


@dataclass
class StructureGraph:
    """Two vertex layers and three thresholded edge sets with ratio weights."""

    utter_vertices: dict[int, tuple[str, ...]]
    sess_vertices: set[int]
    uu_edges: dict[tuple[int, int], float]
    su_edges: dict[tuple[int, int], float]  # keyed (sess, utter), bidirectional
    ss_edges: dict[tuple[int, int], float]
    thresholds: dict[str, float]
    meta: dict = field(default_factory=dict)

    # ------------------------------------------------------------- lookups

    def goal_closeness(self, m: int, n: int) -> float:
        return self.su_edges.get((m, n), 0.0)

    def parents(self, utter_id: int) -> list[int]:
        if utter_id not in self.utter_vertices:
            raise GraphError(f"unknown utterance vertex {utter_id}")
        found = [(s, w) for (s, u), w in self.su_edges.items() if u == utter_id]
        return [s for s, _ in sorted(found, key=lambda t: (-t[1], t[0]))]

    def children(self, sess_id: int) -> list[int]:
        if sess_id not in self.sess_vertices:
            raise GraphError(f"unknown session vertex {sess_id}")
        found = [(u, w) for (s, u), w in self.su_edges.items() if s == sess_id]
        return [u for u, _ in sorted(found, key=lambda t: (-t[1], t[0]))]

    def neighbors(self, vertex: int, edge_type: str) -> list[tuple[int, float]]:
        """Weight-descending (then id) neighbor list for one edge type."""
        if edge_type == "uu":
            if vertex not in self.utter_vertices:
                raise GraphError(f"unknown utterance vertex {vertex}")
            found = [(k, w) for (j, k), w in self.uu_edges.items() if j == vertex]
        elif edge_type == "su":
            # ids are ambiguous between layers: utterance side wins, an
            # explicit sess lookup goes through children()
            if vertex in self.utter_vertices:
                found = [(s, w) for (s, u), w in self.su_edges.items() if u == vertex]
            elif vertex in self.sess_vertices:
                found = [(u, w) for (s, u), w in self.su_edges.items() if s == vertex]
            else:
                raise GraphError(f"unknown vertex {vertex}")
        elif edge_type == "ss":
            if vertex not in self.sess_vertices:
                raise GraphError(f"unknown session vertex {vertex}")
            found = [(o, w) for (i, o), w in self.ss_edges.items() if i == vertex]
        else:
            raise GraphError(f"unknown edge type {edge_type!r}")
        return sorted(found, key=lambda t: (-t[1], t[0]))

    def phrase_of(self, utter_id: int) -> tuple[str, ...]:
        if utter_id not in self.utter_vertices:
            raise GraphError(f"unknown utterance vertex {utter_id}")
        return self.utter_vertices[utter_id]

    # -------------------------------------------------------- serialization

    def canonical_lines(self) -> list[str]:
        header = {
            "type": "header",
            "version": GRAPH_FORMAT_VERSION,
            "thresholds": self.thresholds,
            "meta": self.meta,
        }
        lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
        for vid in sorted(self.utter_vertices):
            lines.append(json.dumps(
                {"type": "utter_vertex", "id": vid, "phrase": list(self.utter_vertices[vid])},
                sort_keys=True, ensure_ascii=False))
        for vid in sorted(self.sess_vertices):
            lines.append(json.dumps({"type": "sess_vertex", "id": vid}, sort_keys=True))
        for name, edges in (("uu", self.uu_edges), ("su", self.su_edges), ("ss", self.ss_edges)):
            for (a, b) in sorted(edges):
                lines.append(json.dumps(
                    {"type": f"{name}_edge", "src": a, "dst": b, "weight": edges[(a, b)]},
                    sort_keys=True))
        return lines

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for line in self.canonical_lines():
            h.update(line.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.canonical_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "StructureGraph":
        utter, sess = {}, set()
        uu, su, ss = {}, {}, {}
        header = None
        with Path(path).open(encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                t = rec["type"]
                if t == "header":
                    header = rec
                elif t == "utter_vertex":
                    utter[rec["id"]] = tuple(rec["phrase"])
                elif t == "sess_vertex":
                    sess.add(rec["id"])
                elif t == "uu_edge":
                    uu[(rec["src"], rec["dst"])] = rec["weight"]
                elif t == "su_edge":
                    su[(rec["src"], rec["dst"])] = rec["weight"]
                elif t == "ss_edge":
                    ss[(rec["src"], rec["dst"])] = rec["weight"]
                else:
                    raise GraphError(f"unknown record type {t!r}")
        if header is None:
            raise GraphError("graph file missing header")
        if header["version"] != GRAPH_FORMAT_VERSION:
            raise GraphError(f"unsupported graph version {header['version']}")
        return cls(utter_vertices=utter, sess_vertices=sess, uu_edges=uu,
                   su_edges=su, ss_edges=ss, thresholds=header["thresholds"],
                   meta=header.get("meta", {}))

    def stats_summary(self) -> dict:
        return {
            "utter_vertices": len(self.utter_vertices),
            "sess_vertices": len(self.sess_vertices),
            "uu_edges": len(self.uu_edges),
            "su_edges": len(self.su_edges),
            "ss_edges": len(self.ss_edges),
            "total_edges": len(self.uu_edges) + len(self.su_edges) + len(self.ss_edges),
        }


def build_graph(
    stats: CoOccurrenceStats,
    phrase_tokens: Sequence[Sequence[str]] | dict[int, Sequence[str]],
    alpha_uu: float = 0.05,
    alpha_su: float = 0.05,
    alpha_ss: float = 0.05,
    meta: dict | None = None,
) -> StructureGraph:
    """Threshold the co-occurrence ratios (inclusive >=) into the three edge
    sets. Vertices never mapped to are excluded; zero-count denominators
    produce no edge."""
    if isinstance(phrase_tokens, dict):
        phrase_lookup = {k: tuple(v) for k, v in phrase_tokens.items()}
    else:
        phrase_lookup = {i: tuple(t) for i, t in enumerate(phrase_tokens)}

    utter_vertices = {}
    for n, c in stats.cnt_utter.items():
        if c > 0:
            utter_vertices[n] = phrase_lookup.get(n, ())
    sess_vertices = {m for m, c in stats.cnt_sess.items() if c > 0}

    uu = {}
    for (j, k), c in stats.cnt_uu.items():
        denom = stats.cnt_utter.get(j, 0)
        if denom > 0:
            w = c / denom
            if w >= alpha_uu:
                uu[(j, k)] = w

    su = {}
    for (m, n), c in stats.cnt_su.items():
        denom = stats.cnt_utter.get(n, 0)
        if denom > 0:
            w = c / denom
            if w >= alpha_su:
                su[(m, n)] = w

    children: dict[int, set[int]] = {}
    for (m, n) in su:
        children.setdefault(m, set()).add(n)
    ss = {}
    sess_sorted = sorted(sess_vertices)
    for i in sess_sorted:
        denom = stats.cnt_sess.get(i, 0)
        if denom <= 0 or i not in children:
            continue
        for o in sess_sorted:
            if o == i or o not in children:
                continue
            shared = len(children[i] & children[o])
            if shared == 0:
                continue
            w = shared / denom
            if w >= alpha_ss:
                ss[(i, o)] = w

    return StructureGraph(
        utter_vertices=utter_vertices,
        sess_vertices=sess_vertices,
        uu_edges=uu, su_edges=su, ss_edges=ss,
        thresholds={"alpha_uu": alpha_uu, "alpha_su": alpha_su, "alpha_ss": alpha_ss},
        meta=meta or {},
    )


def save_assignments(assignments: Iterable[SessionAssignment], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for a in assignments:
            f.write(json.dumps({"id": a.session_id, "z": list(a.z_ids), "g": a.g_id}) + "\n")


def load_assignments(path: str | Path) -> list[SessionAssignment]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            out.append(SessionAssignment(rec["id"], tuple(rec["z"]), rec["g"]))
    return out


def goal_top_terms(graph: StructureGraph, goal_id: int, k: int = 5) -> list[str]:
    """TF-IDF-style typical terms of a goal computed over its children's
    phrases."""
    import math

    if goal_id not in graph.sess_vertices:
        raise GraphError(f"unknown session vertex {goal_id}")
    docfreq: Counter = Counter()
    per_goal: dict[int, Counter] = {}
    for m in graph.sess_vertices:
        bag: Counter = Counter()
        for u in graph.children(m):
            bag.update(graph.utter_vertices.get(u, ()))
        per_goal[m] = bag
        docfreq.update(set(bag))
    n_goals = max(1, len(graph.sess_vertices))
    bag = per_goal[goal_id]
    scored = [
        (tok, tf * math.log((n_goals + 1) / (docfreq[tok] + 1)) + 1e-9 * tf)
        for tok, tf in bag.items()
    ]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return [tok for tok, _ in scored[:k]]
