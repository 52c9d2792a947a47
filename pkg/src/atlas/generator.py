"""Attention-equipped encoder-decoder response generator, pre-trained on
(previous utterance + reply phrase) -> reply pairs and frozen afterwards."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import SessionStore, Vocab
from .errors import ConfigError, TrainingDiverged
from .phrases import Phrase, extract_phrases, parse

logger = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    vocab_size: int
    emb_dim: int = 200
    hidden_dim: int = 512
    dropout: float = 0.3
    max_len: int = 30
    pad_id: int = 0
    bos_id: int = 2
    eos_id: int = 3


@dataclass(frozen=True)
class GeneratorInput:
    last_user_utterance: tuple[str, ...]
    phrase: tuple[str, ...]


class Seq2SeqGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config
        self.word_emb = nn.Embedding(c.vocab_size, c.emb_dim, padding_idx=c.pad_id)
        nn.init.normal_(self.word_emb.weight, std=0.1)
        with torch.no_grad():
            self.word_emb.weight[c.pad_id].zero_()
        self.encoder = nn.GRU(c.emb_dim, c.hidden_dim, batch_first=True, bidirectional=True)
        self.enc_proj = nn.Linear(2 * c.hidden_dim, c.hidden_dim)
        self.decoder = nn.GRU(c.emb_dim, c.hidden_dim, batch_first=True)
        self.attn_out = nn.Linear(2 * c.hidden_dim, c.emb_dim)
        self.dropout = nn.Dropout(c.dropout)

    def _encode(self, src: torch.Tensor, lengths: torch.Tensor):
        emb = self.dropout(self.word_emb(src))
        packed = nn.utils.rnn.pack_padded_sequence(
            emb, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        outputs, h_n = self.encoder(packed)
        outputs, _ = nn.utils.rnn.pad_packed_sequence(outputs, batch_first=True)
        outputs = self.enc_proj(outputs)
        h0 = torch.tanh(self.enc_proj(torch.cat([h_n[0], h_n[1]], dim=-1))).unsqueeze(0)
        return outputs, h0

    def _step_logits(self, dec_out: torch.Tensor, enc_outs: torch.Tensor,
                     enc_mask: torch.Tensor) -> torch.Tensor:
        # dot attention over encoder states
        scores = torch.bmm(dec_out, enc_outs.transpose(1, 2))
        scores = scores.masked_fill(~enc_mask.unsqueeze(1), float("-inf"))
        attn = F.softmax(scores, dim=-1)
        ctx = torch.bmm(attn, enc_outs)
        feat = torch.tanh(self.attn_out(torch.cat([dec_out, ctx], dim=-1)))
        return feat @ self.word_emb.weight.t()

    def nll(self, src: torch.Tensor, src_lengths: torch.Tensor,
            tgt_in: torch.Tensor, tgt_out: torch.Tensor) -> torch.Tensor:
        """Teacher-forced token-sum NLL per pair."""
        c = self.config
        enc_outs, h0 = self._encode(src, src_lengths)
        enc_mask = src != c.pad_id
        emb = self.dropout(self.word_emb(tgt_in))
        dec_out, _ = self.decoder(emb, h0)
        logits = self._step_logits(dec_out, enc_outs, enc_mask)
        logp = F.log_softmax(logits, dim=-1)
        token_nll = -logp.gather(-1, tgt_out.unsqueeze(-1)).squeeze(-1)
        mask = (tgt_out != c.pad_id).to(token_nll.dtype)
        return (token_nll * mask).sum(dim=-1)

    # ------------------------------------------------------------- decoding

    def _build_src(self, inp: GeneratorInput, vocab: Vocab) -> torch.Tensor:
        # conditioning: utterance tokens, separator, phrase tokens
        ids = vocab.encode(inp.last_user_utterance) + [self.config.eos_id] + vocab.encode(inp.phrase)
        ids = ids[: 2 * self.config.max_len + 1]
        return torch.tensor([ids], dtype=torch.long)

    @torch.no_grad()
    def generate(self, inp: GeneratorInput, vocab: Vocab,
                 decode: str = "greedy", beam_size: int = 1) -> list[str]:
        """Deterministic greedy or beam decode, bounded by config.max_len."""
        self.eval()
        if decode == "greedy":
            beam_size = 1
        elif decode != "beam":
            raise ConfigError(f"unknown decode mode {decode!r}")
        if beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        c = self.config
        src = self._build_src(inp, vocab)
        lengths = torch.tensor([src.shape[1]])
        enc_outs, h0 = self._encode(src, lengths)
        enc_mask = src != c.pad_id

        # each hypothesis: (neg score, ids, finished, hidden)
        beams = [(0.0, [c.bos_id], False, h0)]
        for _ in range(c.max_len):
            if all(b[2] for b in beams):
                break
            candidates = []
            for score, ids, finished, h in beams:
                if finished:
                    candidates.append((score, ids, True, h))
                    continue
                tok = torch.tensor([[ids[-1]]])
                emb = self.word_emb(tok)
                dec_out, h_next = self.decoder(emb, h)
                logp = F.log_softmax(self._step_logits(dec_out, enc_outs, enc_mask)[0, -1], dim=-1)
                top = torch.topk(logp, min(beam_size, logp.shape[-1]))
                for lp, wid in zip(top.values.tolist(), top.indices.tolist()):
                    new_ids = ids + [wid]
                    candidates.append((score + lp, new_ids, wid == c.eos_id, h_next))
            candidates.sort(key=lambda b: (-b[0], b[1]))
            beams = candidates[:beam_size]
        best = max(beams, key=lambda b: b[0])
        out_ids = [i for i in best[1][1:] if i != c.eos_id]
        return vocab.decode(out_ids)


# ---------------------------------------------------------------- pretraining


def build_training_pairs(
    store: SessionStore,
    phrases: Sequence[Phrase],
    parser_adapter=None,
    verb_lexicon=None,
) -> list[tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]]:
    """(previous utterance, reply phrase, reply) triples; replies without an
    extractable bound phrase carry an empty phrase."""
    from .phrases import DEFAULT_VERB_LEXICON

    lex = verb_lexicon or DEFAULT_VERB_LEXICON
    by_tokens = {p.tokens: p.phrase_id for p in phrases}
    pairs = []
    for sess in store:
        for prev, reply in zip(sess.utterances, sess.utterances[1:]):
            tree = parse(reply, parser_adapter, lex)
            extracted = [t for t in extract_phrases(reply, tree) if t in by_tokens]
            best = min(extracted, key=lambda t: by_tokens[t]) if extracted else ()
            pairs.append((prev.tokens, tuple(best), reply.tokens))
    return pairs


@dataclass
class GenTrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    grad_clip: float = 5.0


def pretrain_generator(
    model: Seq2SeqGenerator,
    store: SessionStore,
    vocab: Vocab,
    phrases: Sequence[Phrase],
    config: GenTrainConfig,
    parser_adapter=None,
) -> list[float]:
    """Teacher-forced pre-training; returns mean per-pair NLL per epoch."""
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    pairs = build_training_pairs(store, phrases, parser_adapter)
    c = model.config
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    epoch_nll: list[float] = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        rng.shuffle(pairs)
        total = 0.0
        for start in range(0, len(pairs), config.batch_size):
            batch = pairs[start : start + config.batch_size]
            src_ids = [
                (vocab.encode(prev) + [c.eos_id] + vocab.encode(ph))[: 2 * c.max_len + 1]
                for prev, ph, _ in batch
            ]
            tgt_ids = [vocab.encode(reply)[: c.max_len] for _, _, reply in batch]
            src_max = max(len(s) for s in src_ids)
            tgt_max = max(len(t) for t in tgt_ids) + 1
            src = torch.full((len(batch), src_max), c.pad_id, dtype=torch.long)
            lengths = torch.empty(len(batch), dtype=torch.long)
            tgt_in = torch.full((len(batch), tgt_max), c.pad_id, dtype=torch.long)
            tgt_out = torch.full((len(batch), tgt_max), c.pad_id, dtype=torch.long)
            for i, (s, t) in enumerate(zip(src_ids, tgt_ids)):
                src[i, : len(s)] = torch.tensor(s)
                lengths[i] = len(s)
                tgt_in[i, 0] = c.bos_id
                tgt_in[i, 1 : len(t) + 1] = torch.tensor(t)
                tgt_out[i, : len(t)] = torch.tensor(t)
                tgt_out[i, len(t)] = c.eos_id
            optimizer.zero_grad()
            loss = model.nll(src, lengths, tgt_in, tgt_out).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite generator loss at epoch {epoch}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            total += float(loss.detach()) * len(batch)
        epoch_nll.append(total / len(pairs))
        logger.info("generator epoch %d: nll/pair %.4f", epoch, epoch_nll[-1])
    model.eval()
    return epoch_nll


def save_generator(model: Seq2SeqGenerator, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict()},
               out / "generator.pt")
    return out


def load_generator(gen_dir: str | Path) -> Seq2SeqGenerator:
    payload = torch.load(Path(gen_dir) / "generator.pt", map_location="cpu", weights_only=False)
    model = Seq2SeqGenerator(GeneratorConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def generator_hash(gen_dir: str | Path) -> str:
    return hashlib.sha256((Path(gen_dir) / "generator.pt").read_bytes()).hexdigest()
