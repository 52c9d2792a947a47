"""User simulators for policy training rollouts."""

from __future__ import annotations

from pathlib import Path
from typing import Protocol

from .bm25 import ShortlistIndex
from .corpus import SessionStore, Utterance
from .phrases import Phrase


class Simulator(Protocol):
    def reset(self) -> str:
        """Start a dialog; returns the opening user utterance."""
        ...

    def respond(self, agent_text: str) -> tuple[str, bool]:
        """User reply to the agent plus a termination flag."""
        ...


class ScriptedSimulator:
    """Replays a fixed list of user lines; terminates when the script runs
    out (or never, if cycling)."""

    def __init__(self, lines: list[str], cycle: bool = False):
        if not lines:
            raise ValueError("scripted simulator needs at least one line")
        self.lines = list(lines)
        self.cycle = cycle
        self._pos = 0

    @classmethod
    def from_file(cls, path: str | Path, cycle: bool = False) -> "ScriptedSimulator":
        lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        return cls(lines, cycle=cycle)

    def reset(self) -> str:
        self._pos = 1
        return self.lines[0]

    def respond(self, agent_text: str) -> tuple[str, bool]:
        if self._pos >= len(self.lines):
            if not self.cycle:
                return "", True
            self._pos = 0
        line = self.lines[self._pos]
        self._pos += 1
        return line, False


class RetrievalSimulator:
    """Replies with the successor of the stored utterance most similar to the
    agent's message (BM25 over corpus utterances)."""

    def __init__(self, store: SessionStore, opening: str | None = None):
        docs: list[Phrase] = []
        self._next_text: list[str] = []
        doc_id = 0
        first = None
        for sess in store:
            for cur, nxt in zip(sess.utterances, sess.utterances[1:]):
                docs.append(Phrase(phrase_id=doc_id, tokens=cur.tokens, frequency=1))
                self._next_text.append(nxt.raw_text)
                doc_id += 1
            if first is None:
                first = sess.utterances[0].raw_text
        if not docs:
            raise ValueError("retrieval simulator needs a store with adjacent pairs")
        self._index = ShortlistIndex(docs)
        self.opening = opening if opening is not None else (first or "hello")

    def reset(self) -> str:
        return self.opening

    def respond(self, agent_text: str) -> tuple[str, bool]:
        tokens = Utterance.from_text(agent_text).tokens
        best = self._index.shortlist(tokens, k=1)
        return self._next_text[best[0]], False
