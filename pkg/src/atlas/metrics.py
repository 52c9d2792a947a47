"""Automatic evaluation: reconstruction NLL, BLEU-1/2, Dist-1/2 and the
high-quality dialog length heuristic."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

DEFAULT_DULL_RESPONSES = (
    "i don t know",
    "i don ' t know",
    "i dont know",
    "ok",
    "yes",
    "no",
    "haha",
    "me too",
    "what",
    "good",
)


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_n(
    reference: Sequence[str],
    hypothesis: Sequence[str],
    n: int = 1,
    smooth_eps: float = 1e-9,
) -> float:
    """BLEU-n: brevity penalty times the geometric mean of modified k-gram
    precisions for k = 1..n; zero counts smoothed by smooth_eps (0 disables)."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    if not hypothesis:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        hyp = Counter(_ngrams(hypothesis, k))
        ref = Counter(_ngrams(reference, k))
        total = sum(hyp.values())
        if total == 0:
            return 0.0
        clipped = sum(min(c, ref[g]) for g, c in hyp.items())
        p = clipped / total
        if p == 0.0:
            if smooth_eps <= 0.0:
                return 0.0
            p = smooth_eps
        log_p += math.log(p) / n
    bp = 1.0 if len(hypothesis) >= len(reference) else math.exp(1 - len(reference) / len(hypothesis))
    return bp * math.exp(log_p)


def corpus_bleu_n(
    references: Sequence[Sequence[str]],
    hypotheses: Sequence[Sequence[str]],
    n: int = 1,
    smooth_eps: float = 1e-9,
) -> float:
    """Corpus-level BLEU-n: pooled n-gram counts with a pooled brevity
    penalty."""
    if len(references) != len(hypotheses):
        raise ValueError("reference/hypothesis count mismatch")
    log_p = 0.0
    for k in range(1, n + 1):
        clipped = total = 0
        for ref, hyp in zip(references, hypotheses):
            hyp_c = Counter(_ngrams(hyp, k))
            ref_c = Counter(_ngrams(ref, k))
            total += sum(hyp_c.values())
            clipped += sum(min(c, ref_c[g]) for g, c in hyp_c.items())
        if total == 0:
            return 0.0
        p = clipped / total
        if p == 0.0:
            if smooth_eps <= 0.0:
                return 0.0
            p = smooth_eps
        log_p += math.log(p) / n
    hyp_len = sum(len(h) for h in hypotheses)
    ref_len = sum(len(r) for r in references)
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def distinct_n(utterances: Sequence[Sequence[str]], n: int = 1) -> float:
    """Distinct n-grams over total n-grams across all utterances."""
    grams: list[tuple[str, ...]] = []
    for utt in utterances:
        grams.extend(_ngrams(utt, n))
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def _overlap(a: Sequence[str], b: Sequence[str]) -> float:
    sa, sb = set(a), set(b)
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / min(len(sa), len(sb))


def hq_dialog_length(
    dialog: Sequence[Sequence[str]],
    dull_list: Sequence[str] = DEFAULT_DULL_RESPONSES,
    overlap_threshold: float = 0.8,
) -> int:
    """1-based index of the first dull turn or the first consecutive pair
    with token overlap above the threshold; the full length otherwise."""
    dull = {d.strip().lower() for d in dull_list}
    for i, utt in enumerate(dialog):
        text = " ".join(utt).strip().lower()
        if text in dull:
            return i + 1
        if i > 0 and _overlap(dialog[i - 1], utt) > overlap_threshold:
            return i + 1
    return len(dialog)


@dataclass
class EvalReport:
    nll: float
    bleu1: float
    bleu2: float
    dist1: float
    dist2: float
    hq_length: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def reconstruction_eval(bundle, store) -> EvalReport:
    """Argmax-map every session, greedy-decode each utterance from its
    assigned vertices, and score reconstruction quality."""
    import torch

    model, vocab, index = bundle.model, bundle.vocab, bundle.index
    model.eval()
    references, hypotheses = [], []
    nll_total, n_utts = 0.0, 0
    with torch.no_grad():
        for sess in store:
            tokens = [u.tokens for u in sess.utterances]
            token_ids = [vocab.encode(t) for t in tokens]
            rec = model.recognize(token_ids, index, tokens, mode="argmax")
            for ids, toks, z in zip(token_ids, tokens, rec.z_ids):
                nll_total += float(model.reconstruct_nll(ids, z, rec.g_id))
                out_ids = model.greedy_reconstruct(z, rec.g_id)
                references.append(list(toks))
                hypotheses.append(vocab.decode(out_ids))
                n_utts += 1
    return EvalReport(
        nll=nll_total / max(1, n_utts),
        bleu1=corpus_bleu_n(references, hypotheses, 1),
        bleu2=corpus_bleu_n(references, hypotheses, 2),
        dist1=distinct_n(hypotheses, 1),
        dist2=distinct_n(hypotheses, 2),
    )
