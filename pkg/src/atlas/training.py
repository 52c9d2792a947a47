"""Optimization loop for the structure model."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .bm25 import ShortlistIndex
from .corpus import SessionStore, Vocab
from .errors import TrainingDiverged
from .model import StructureModel, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-3
    seed: int = 0
    grad_clip: float = 5.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    # deterministic-annealing schedule on the KL coefficient; both default to
    # the plain variational bound
    kl_start: float = 1.0
    kl_end: float = 1.0
    # rebuild the propagation edges from argmax assignments after each epoch
    rebuild_edges_per_epoch: bool = False
    rebuild_min_count: int = 3


@dataclass
class EpochMetrics:
    epoch: int
    nll_per_utterance: float
    kl_utter_per_utterance: float
    kl_goal_per_session: float
    tau: float

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class PreparedCorpus:
    """Token ids and BM25 shortlists, fixed before optimization starts."""

    token_ids: list[list[list[int]]]
    shortlists: list[list[list[int]]]
    num_utterances: int = field(init=False)

    def __post_init__(self):
        self.num_utterances = sum(len(s) for s in self.token_ids)


def prepare_corpus(store: SessionStore, vocab: Vocab, index: ShortlistIndex,
                   shortlist_k: int) -> PreparedCorpus:
    token_ids, shortlists = [], []
    for sess in store:
        token_ids.append([vocab.encode(u.tokens) for u in sess.utterances])
        shortlists.append([index.shortlist(u.tokens, shortlist_k) for u in sess.utterances])
    return PreparedCorpus(token_ids=token_ids, shortlists=shortlists)


def train_model(
    model: StructureModel,
    store: SessionStore,
    vocab: Vocab,
    index: ShortlistIndex,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    phrases=None,
) -> list[EpochMetrics]:
    """Minimize the mean per-session negative ELBO with Adam; anneals the
    gumbel temperature linearly over all steps and checkpoints each epoch."""
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    generator = torch.Generator().manual_seed(config.seed + 1)

    prepared = prepare_corpus(store, vocab, index, model.config.shortlist_k)
    n_sessions = len(prepared.token_ids)
    steps_per_epoch = max(1, math.ceil(n_sessions / config.batch_size))
    total_steps = config.epochs * steps_per_epoch

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    metrics: list[EpochMetrics] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = list(range(n_sessions))
        rng.shuffle(order)
        epoch_nll = epoch_klu = epoch_klg = 0.0
        for start in range(0, n_sessions, config.batch_size):
            batch = order[start : start + config.batch_size]
            frac = step / max(1, total_steps - 1)
            tau = config.tau_start + (config.tau_end - config.tau_start) * frac
            kl_w = config.kl_start + (config.kl_end - config.kl_start) * frac
            optimizer.zero_grad()
            out = model.batch_elbo(
                [prepared.token_ids[si] for si in batch],
                [prepared.shortlists[si] for si in batch],
                tau=tau, sample_mode="st", generator=generator,
            )
            epoch_nll += float(out["recon"].detach())
            epoch_klu += float(out["kl_utter"].detach())
            epoch_klg += float(out["kl_goal"].detach())
            loss = (out["recon"] + kl_w * (out["kl_utter"] + out["kl_goal"])) / len(batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {float(loss.detach())}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            step += 1
        m = EpochMetrics(
            epoch=epoch,
            nll_per_utterance=epoch_nll / prepared.num_utterances,
            kl_utter_per_utterance=epoch_klu / prepared.num_utterances,
            kl_goal_per_session=epoch_klg / n_sessions,
            tau=tau,
        )
        metrics.append(m)
        logger.info("epoch %d: nll/utt %.4f kl_u/utt %.4f kl_g/sess %.4f tau %.3f",
                    m.epoch, m.nll_per_utterance, m.kl_utter_per_utterance,
                    m.kl_goal_per_session, m.tau)
        if config.rebuild_edges_per_epoch:
            model.edges = _rebuild_edges(model, prepared, config.rebuild_min_count)
        if out_dir is not None and phrases is not None:
            save_checkpoint(out_dir, model, vocab, phrases,
                            extra={"epoch": epoch, "metrics": [x.as_dict() for x in metrics]})
    model.eval()
    return metrics


def _rebuild_edges(model: StructureModel, prepared: PreparedCorpus,
                   min_count: int) -> tuple[tuple[int, int], ...]:
    """Re-derive propagation edges from the current argmax assignments:
    adjacent-utterance vertex pairs seen at least min_count times."""
    from collections import Counter

    model.eval()
    counts: Counter = Counter()
    with torch.no_grad():
        tables = model.recognition_tables()
        for token_ids, shortlists in zip(prepared.token_ids, prepared.shortlists):
            z_ids = []
            lam_x = tables[0]
            e_x = model.encode_utterances(token_ids)
            for i, sl in enumerate(shortlists):
                rows = torch.tensor(list(sl), dtype=torch.long, device=lam_x.device)
                logits = lam_x[rows] @ e_x[i]
                z_ids.append(sl[int(logits.argmax())])
            for a, b in zip(z_ids, z_ids[1:]):
                counts[(a, b)] += 1
    model.train()
    return tuple(sorted(e for e, c in counts.items() if c >= min_count))
