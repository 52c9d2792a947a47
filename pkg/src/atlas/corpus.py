"""Corpus ingestion, tokenization, vocabulary and session storage."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .errors import CorpusError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_CJK_RE = re.compile(r"[぀-ヿ㐀-䶿一-鿿豈-﫿]")

Segmenter = Callable[[str], list[str]]


def _split_cjk_run(piece: str) -> list[str]:
    # identity fallback: every CJK character becomes its own token, latin
    # runs inside the piece stay together
    out: list[str] = []
    buf = ""
    for ch in piece:
        if _CJK_RE.match(ch):
            if buf:
                out.append(buf)
                buf = ""
            out.append(ch)
        else:
            buf += ch
    if buf:
        out.append(buf)
    return out


def tokenize(text: str, segmenter: Segmenter | None = None) -> list[str]:
    """Split text into tokens: whitespace/punctuation segmentation, with a
    pluggable segmenter for CJK runs (per-character fallback)."""
    tokens: list[str] = []
    for piece in _TOKEN_RE.findall(text):
        if _CJK_RE.search(piece):
            if segmenter is not None:
                tokens.extend(t for t in segmenter(piece) if t)
            else:
                tokens.extend(_split_cjk_run(piece))
        else:
            tokens.append(piece)
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    raw_text: str

    @classmethod
    def from_text(cls, text: str, segmenter: Segmenter | None = None) -> "Utterance":
        return cls(tokens=tuple(tokenize(text, segmenter)), raw_text=text)


@dataclass(frozen=True)
class DialogSession:
    session_id: str
    utterances: tuple[Utterance, ...]

    def __len__(self) -> int:
        return len(self.utterances)


class SessionStore:
    """Immutable ordered collection of dialog sessions."""

    def __init__(self, sessions: Iterable[DialogSession], dropped: int = 0):
        self.sessions: tuple[DialogSession, ...] = tuple(sessions)
        self.dropped = dropped

    def __iter__(self) -> Iterator[DialogSession]:
        return iter(self.sessions)

    def __len__(self) -> int:
        return len(self.sessions)

    def __getitem__(self, i: int) -> DialogSession:
        return self.sessions[i]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.sessions:
            h.update(s.session_id.encode("utf-8"))
            for u in s.utterances:
                h.update(b"\x00")
                h.update("\x1f".join(u.tokens).encode("utf-8"))
            h.update(b"\x01")
        return h.hexdigest()

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "sessions.jsonl").open("w", encoding="utf-8") as f:
            for s in self.sessions:
                rec = {
                    "id": s.session_id,
                    "utterances": [list(u.tokens) for u in s.utterances],
                    "raw": [u.raw_text for u in s.utterances],
                }
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
        meta = {"sessions": len(self.sessions), "dropped": self.dropped, "hash": self.content_hash()}
        (out / "meta.json").write_text(json.dumps(meta, indent=2))
        return out

    @classmethod
    def load(cls, store_dir: str | Path) -> "SessionStore":
        store_dir = Path(store_dir)
        path = store_dir / "sessions.jsonl"
        if not path.exists():
            raise CorpusError(f"no session store at {store_dir}")
        sessions = []
        with path.open(encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                utts = tuple(
                    Utterance(tokens=tuple(toks), raw_text=raw)
                    for toks, raw in zip(rec["utterances"], rec["raw"])
                )
                sessions.append(DialogSession(session_id=rec["id"], utterances=utts))
        meta_path = store_dir / "meta.json"
        dropped = 0
        if meta_path.exists():
            dropped = json.loads(meta_path.read_text()).get("dropped", 0)
        return cls(sessions, dropped=dropped)


def _parse_jsonl(path: Path) -> Iterator[tuple[int, str, list[str]]]:
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = str(rec["id"])
                utts = rec["utterances"]
                if not isinstance(utts, list) or not all(isinstance(u, str) for u in utts):
                    raise ValueError("utterances must be a list of strings")
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed record: {e}") from e
            yield lineno, sid, utts


def _parse_tsv(path: Path) -> Iterator[tuple[int, str, list[str]]]:
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise CorpusError(f"{path}:{lineno}: malformed record: expected id<TAB>utterance...")
            yield lineno, cols[0], cols[1:]


def ingest_corpus(
    path: str | Path,
    format: str = "jsonl",
    segmenter: Segmenter | None = None,
) -> SessionStore:
    """Read a corpus file (one session per record), tokenize, and drop
    sessions that end up with fewer than two non-empty utterances."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    if format == "jsonl":
        records = _parse_jsonl(path)
    elif format == "tsv":
        records = _parse_tsv(path)
    else:
        raise CorpusError(f"unknown corpus format: {format!r}")

    sessions: list[DialogSession] = []
    dropped = 0
    for _lineno, sid, texts in records:
        utts = [Utterance.from_text(t, segmenter) for t in texts]
        utts = [u for u in utts if u.tokens]
        if len(utts) < 2:
            dropped += 1
            continue
        sessions.append(DialogSession(session_id=sid, utterances=tuple(utts)))
    if not sessions:
        raise CorpusError("empty corpus")
    return SessionStore(sessions, dropped=dropped)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [""] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.id_to_token, ensure_ascii=False).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.id_to_token, ensure_ascii=False)

    @classmethod
    def from_json(cls, payload: str) -> "Vocab":
        id_to_token = json.loads(payload)
        return cls(token_to_id={t: i for i, t in enumerate(id_to_token)}, id_to_token=id_to_token)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(store: SessionStore, max_size: int = 50000) -> Vocab:
    """Keep the most frequent tokens (ties lexicographic) up to max_size
    entries including the special symbols."""
    if len(store) == 0:
        raise CorpusError("cannot build vocab from an empty store")
    if max_size < len(SPECIALS):
        raise CorpusError(f"max_size={max_size} smaller than the {len(SPECIALS)} special symbols")
    counts: Counter[str] = Counter()
    for sess in store:
        for utt in sess.utterances:
            counts.update(utt.tokens)
    budget = max_size - len(SPECIALS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:budget]
    id_to_token = list(SPECIALS) + [tok for tok, _ in ranked]
    return Vocab(token_to_id={t: i for i, t in enumerate(id_to_token)}, id_to_token=id_to_token)
