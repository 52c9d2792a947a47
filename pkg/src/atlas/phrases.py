"""Verb phrase mining over dependency parses, phrase ranking, and the initial
phrase graph built from adjacent-utterance co-extraction."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import DialogSession, SessionStore, Utterance
from .errors import CorpusError

logger = logging.getLogger(__name__)

# small lexicon backing the fallback parser's verb test; adapters bring their
# own POS tags
DEFAULT_VERB_LEXICON = frozenset(
    """go come want need like love hate eat drink see watch play read write
    run walk travel visit buy sell make take give get find think know say
    tell ask meet call wait work study learn teach help try start stop
    celebrate accompany decide arrive leave stay sleep wake cook clean sing
    dance swim climb drive ride fly jump look listen talk speak feel wear
    bring send show open close win lose plan hope wish miss remember forget
    invite join share choose pick""".split()
)


@dataclass(frozen=True)
class ParseTree:
    """Dependency tree over an utterance: heads[i] is the parent token index
    of token i, -1 marks the root (HED)."""

    tokens: tuple[str, ...]
    heads: tuple[int, ...]
    labels: tuple[str, ...]
    root_is_verb: bool

    def __post_init__(self):
        if len(self.tokens) != len(self.heads) or len(self.tokens) != len(self.labels):
            raise CorpusError("parse tree fields must align with tokens")
        roots = [i for i, h in enumerate(self.heads) if h == -1]
        if len(roots) != 1:
            raise CorpusError(f"parse tree must have exactly one root, got {len(roots)}")
        # reject cycles: every node must reach the root
        for i in range(len(self.heads)):
            seen = set()
            j = i
            while j != -1:
                if j in seen:
                    raise CorpusError("parse tree contains a cycle")
                seen.add(j)
                j = self.heads[j]

    @property
    def root(self) -> int:
        return self.heads.index(-1)

    def children(self, i: int) -> list[int]:
        return [j for j, h in enumerate(self.heads) if h == i]

    def leaves(self) -> list[int]:
        have_child = set(self.heads) - {-1}
        return [i for i in range(len(self.tokens)) if i not in have_child]


ParserAdapter = Callable[[Utterance], ParseTree]


def parse(
    utterance: Utterance,
    adapter: ParserAdapter | None = None,
    verb_lexicon: frozenset[str] = DEFAULT_VERB_LEXICON,
) -> ParseTree:
    """Parse via the configured adapter; on no adapter or adapter failure,
    build a flat fallback tree rooted at the first verb-lexicon token."""
    if adapter is not None:
        try:
            return adapter(utterance)
        except Exception:
            logger.warning("parser adapter failed on %r, using fallback", utterance.raw_text)
    tokens = utterance.tokens
    root = None
    for i, tok in enumerate(tokens):
        if tok.lower() in verb_lexicon:
            root = i
            break
    is_verb = root is not None
    if root is None:
        root = 0
    heads = tuple(-1 if i == root else root for i in range(len(tokens)))
    labels = tuple("HED" if i == root else "dep" for i in range(len(tokens)))
    return ParseTree(tokens=tokens, heads=heads, labels=labels, root_is_verb=is_verb)


def extract_phrases(utterance: Utterance, tree: ParseTree) -> list[tuple[str, ...]]:
    """For each leaf, materialize the root-to-leaf path in sentence order;
    keep it only when the root word is a verb. Deduplicated, order preserved."""
    if tree.tokens != utterance.tokens:
        raise CorpusError("parse tree does not cover the utterance tokens")
    if not tree.root_is_verb:
        return []
    phrases: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    for leaf in tree.leaves():
        path = []
        j = leaf
        while j != -1:
            path.append(j)
            j = tree.heads[j]
        phrase = tuple(tree.tokens[i] for i in sorted(path))
        if phrase not in seen:
            seen.add(phrase)
            phrases.append(phrase)
    return phrases


@dataclass(frozen=True)
class Phrase:
    phrase_id: int
    tokens: tuple[str, ...]
    frequency: int

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def _session_phrases(
    session: DialogSession,
    adapter: ParserAdapter | None,
    verb_lexicon: frozenset[str],
) -> list[list[tuple[str, ...]]]:
    return [
        extract_phrases(u, parse(u, adapter, verb_lexicon)) for u in session.utterances
    ]


def rank_and_bind(
    store: SessionStore,
    top_n: int,
    adapter: ParserAdapter | None = None,
    verb_lexicon: frozenset[str] = DEFAULT_VERB_LEXICON,
) -> list[Phrase]:
    """Mine phrases corpus-wide and bind the top_n most frequent (ties
    lexicographic) to vertex ids 0..top_n-1 in rank order."""
    if top_n < 1:
        raise CorpusError("top_n must be >= 1")
    counts: Counter[tuple[str, ...]] = Counter()
    for sess in store:
        for utt_phrases in _session_phrases(sess, adapter, verb_lexicon):
            counts.update(utt_phrases)
    if not counts:
        raise CorpusError("no phrases could be extracted from the corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_n > len(ranked):
        logger.warning("requested %d phrases but only %d distinct were mined", top_n, len(ranked))
    kept = ranked[:top_n]
    return [Phrase(phrase_id=i, tokens=toks, frequency=freq) for i, (toks, freq) in enumerate(kept)]


@dataclass
class PhraseGraph:
    """Directed edges between bound phrases co-extracted from adjacent
    utterances of the same session."""

    num_vertices: int
    edges: dict[tuple[int, int], int]

    def edge_list(self) -> list[tuple[int, int, int]]:
        return sorted((a, b, c) for (a, b), c in self.edges.items())


def build_phrase_graph(
    store: SessionStore,
    phrases: Sequence[Phrase],
    min_count: int = 3,
    adapter: ParserAdapter | None = None,
    verb_lexicon: frozenset[str] = DEFAULT_VERB_LEXICON,
) -> PhraseGraph:
    """Count edge (a -> b) once per adjacent utterance pair where a is bound
    and extracted from the earlier utterance and b from the later one."""
    by_tokens = {p.tokens: p.phrase_id for p in phrases}
    counts: Counter[tuple[int, int]] = Counter()
    for sess in store:
        per_utt = _session_phrases(sess, adapter, verb_lexicon)
        bound = [sorted({by_tokens[t] for t in utt if t in by_tokens}) for utt in per_utt]
        for earlier, later in zip(bound, bound[1:]):
            for a in earlier:
                for b in later:
                    counts[(a, b)] += 1
    kept = {e: c for e, c in counts.items() if c >= min_count}
    return PhraseGraph(num_vertices=len(phrases), edges=kept)


def save_phrases(phrases: Iterable[Phrase], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for p in phrases:
            f.write(json.dumps({"id": p.phrase_id, "tokens": list(p.tokens), "freq": p.frequency},
                               ensure_ascii=False) + "\n")


def load_phrases(path: str | Path) -> list[Phrase]:
    out = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            out.append(Phrase(phrase_id=rec["id"], tokens=tuple(rec["tokens"]), frequency=rec["freq"]))
    out.sort(key=lambda p: p.phrase_id)
    return out


def save_phrase_graph(graph: PhraseGraph, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        f.write(json.dumps({"num_vertices": graph.num_vertices}) + "\n")
        for a, b, c in graph.edge_list():
            f.write(json.dumps({"src": a, "dst": b, "count": c}) + "\n")


def load_phrase_graph(path: str | Path) -> PhraseGraph:
    with Path(path).open(encoding="utf-8") as f:
        header = json.loads(f.readline())
        edges = {}
        for line in f:
            rec = json.loads(line)
            edges[(rec["src"], rec["dst"])] = rec["count"]
    return PhraseGraph(num_vertices=header["num_vertices"], edges=edges)
