"""Pluggable response relevance scoring for the reward's coherence factor."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import SessionStore, Vocab

logger = logging.getLogger(__name__)


class RelevanceScorer(Protocol):
    def score(self, context: Sequence[Sequence[str]], response: Sequence[str]) -> float:
        """Coherence of the response to the context, in [0, 1]."""
        ...


class LexicalOverlapScorer:
    """Zero-training fallback: containment of response tokens in the context."""

    def score(self, context, response) -> float:
        resp = set(response)
        if not resp:
            return 0.0
        ctx = set()
        for utt in context:
            ctx.update(utt)
        return len(resp & ctx) / len(resp)


@dataclass
class DualEncoderConfig:
    vocab_size: int
    emb_dim: int = 64
    hidden_dim: int = 64
    pad_id: int = 0
    max_len: int = 30


class DualEncoderScorer(nn.Module):
    """Light dual-encoder: sigmoid of the dot product between pooled context
    and response encodings, trained on next-utterance pairs with in-batch
    random negatives."""

    def __init__(self, config: DualEncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.word_emb = nn.Embedding(c.vocab_size, c.emb_dim, padding_idx=c.pad_id)
        self.ctx_gru = nn.GRU(c.emb_dim, c.hidden_dim, batch_first=True)
        self.resp_gru = nn.GRU(c.emb_dim, c.hidden_dim, batch_first=True)
        self._vocab: Vocab | None = None

    def bind_vocab(self, vocab: Vocab) -> "DualEncoderScorer":
        self._vocab = vocab
        return self

    def _encode(self, gru: nn.GRU, batch_ids: list[list[int]]) -> torch.Tensor:
        c = self.config
        ids = [t[: c.max_len] or [c.pad_id] for t in batch_ids]
        max_len = max(len(t) for t in ids)
        x = torch.full((len(ids), max_len), c.pad_id, dtype=torch.long)
        for i, t in enumerate(ids):
            x[i, : len(t)] = torch.tensor(t)
        _, h = gru(self.word_emb(x))
        return h[0]

    def logits(self, ctx_ids: list[list[int]], resp_ids: list[list[int]]) -> torch.Tensor:
        ctx = self._encode(self.ctx_gru, ctx_ids)
        resp = self._encode(self.resp_gru, resp_ids)
        return (ctx * resp).sum(dim=-1)

    @torch.no_grad()
    def score(self, context, response) -> float:
        assert self._vocab is not None, "call bind_vocab() before scoring"
        self.eval()
        ctx_tokens: list[str] = []
        for utt in context:
            ctx_tokens.extend(utt)
        ctx_ids = self._vocab.encode(ctx_tokens)
        resp_ids = self._vocab.encode(response)
        if not ctx_ids or not resp_ids:
            return 0.0
        return float(torch.sigmoid(self.logits([ctx_ids], [resp_ids])[0]))


def train_relevance_scorer(
    scorer: DualEncoderScorer,
    store: SessionStore,
    vocab: Vocab,
    epochs: int = 3,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Binary cross-entropy on (context, next utterance) positives against
    shuffled-response negatives."""
    torch.manual_seed(seed)
    rng = random.Random(seed)
    pairs = []
    for sess in store:
        for prev, nxt in zip(sess.utterances, sess.utterances[1:]):
            pairs.append((vocab.encode(prev.tokens), vocab.encode(nxt.tokens)))
    losses = []
    optimizer = torch.optim.Adam(scorer.parameters(), lr=lr)
    for epoch in range(epochs):
        scorer.train()
        rng.shuffle(pairs)
        total, count = 0.0, 0
        for start in range(0, len(pairs), batch_size):
            batch = pairs[start : start + batch_size]
            if len(batch) < 2:
                continue
            ctx = [c for c, _ in batch]
            resp = [r for _, r in batch]
            neg = resp[1:] + resp[:1]  # derangement-ish negatives
            pos_logits = scorer.logits(ctx, resp)
            neg_logits = scorer.logits(ctx, neg)
            logits = torch.cat([pos_logits, neg_logits])
            labels = torch.cat([torch.ones_like(pos_logits), torch.zeros_like(neg_logits)])
            loss = F.binary_cross_entropy_with_logits(logits, labels)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        losses.append(total / max(1, count))
        logger.info("relevance epoch %d: loss %.4f", epoch + 1, losses[-1])
    scorer.eval()
    return losses


class ConstantScorer:
    """Fixed-score stub, handy for tests and reward shaping experiments."""

    def __init__(self, value: float = 0.5):
        self.value = value

    def score(self, context, response) -> float:
        return self.value
