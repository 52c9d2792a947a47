"""Two-level discrete structure model.

Utterance vertices couple a mined phrase encoding with a learnable latent
vector; recognition maps utterances to vertices over a BM25 shortlist and
whole sessions to goal vertices through a graph-convolution-refined vertex
sequence; a conditioned decoder reconstructs every utterance, trained on the
variational bound with uniform categorical priors.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bm25 import ShortlistIndex
from .corpus import Vocab
from .errors import AtlasError, ConfigError
from .phrases import Phrase, PhraseGraph

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    num_goals: int
    num_vertices: int
    emb_dim: int = 200
    hidden_dim: int = 512
    latent_dim: int = 200
    dropout: float = 0.3
    gcn_layers: int = 3
    gcn_transform: bool = False
    gcn_backprop: bool = False
    shortlist_k: int = 50
    prior_over_all: bool = False
    max_len: int = 30
    emb_init_std: float = 0.1
    freeze_phrase_encoder: bool = False
    pad_id: int = 0
    bos_id: int = 2
    eos_id: int = 3

    def __post_init__(self):
        if self.num_goals < 1 or self.num_vertices < 1:
            raise ConfigError("num_goals and num_vertices must be >= 1")


class _StraightThrough(torch.autograd.Function):
    """Forward the hard one-hot bit-exactly; route gradients to the soft
    relaxation."""

    @staticmethod
    def forward(ctx, y_soft, y_hard):
        return y_hard

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def gumbel_softmax_sample(
    logits: torch.Tensor,
    tau: float,
    generator: torch.Generator | None = None,
    hard: bool = True,
) -> torch.Tensor:
    """Sample from a categorical via gumbel-softmax. hard=True returns a
    straight-through one-hot (exact one-hot forward, soft gradient)."""
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype, device=logits.device)
    neg_log_u = (-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20)
    noise = -torch.log(neg_log_u)
    y_soft = F.softmax((logits + noise) / tau, dim=-1)
    if not hard:
        return y_soft
    index = y_soft.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y_soft).scatter_(-1, index, 1.0)
    return _StraightThrough.apply(y_soft, y_hard)


def gcn_propagate(
    embeddings: torch.Tensor,
    edges: Sequence[tuple[int, int]],
    layers: int = 3,
    transforms: Sequence[nn.Module] | None = None,
) -> torch.Tensor:
    """Layer-wise sigmoid(sum of neighbor states) message passing.

    Every directed edge carries messages both ways, so a vertex joined to a
    neighbor by two opposite edges receives that neighbor twice per layer.
    Vertices without incident edges evolve as sigmoid(0).
    """
    n = embeddings.shape[0]
    h = embeddings
    if edges:
        src = torch.tensor([a for a, _ in edges], dtype=torch.long, device=embeddings.device)
        dst = torch.tensor([b for _, b in edges], dtype=torch.long, device=embeddings.device)
        if src.numel() and (src.max() >= n or dst.max() >= n or src.min() < 0 or dst.min() < 0):
            raise AtlasError("edge endpoint out of range")
    else:
        src = dst = None
    for j in range(layers):
        agg = torch.zeros_like(h)
        if src is not None:
            agg.index_add_(0, src, h[dst])
            agg.index_add_(0, dst, h[src])
        if transforms is not None:
            agg = transforms[j](agg)
        h = torch.sigmoid(agg)
    return h


def categorical_kl_to_uniform(probs: torch.Tensor, prior_size: int | None = None) -> torch.Tensor:
    """KL(q || uniform over prior_size) for a categorical q; defaults to a
    uniform prior over q's own support."""
    k = probs.shape[-1] if prior_size is None else prior_size
    p = probs.clamp_min(1e-20)
    entropy = -(p * p.log()).sum(dim=-1)
    return math.log(k) - entropy


def decomposed_kl(
    utter_posteriors: Sequence[torch.Tensor],
    goal_posterior: torch.Tensor,
    utter_prior_sizes: Sequence[int] | None = None,
    goal_prior_size: int | None = None,
) -> torch.Tensor:
    """KL between the factored joint posterior and the factored uniform prior:
    the sum of per-utterance terms plus the goal term."""
    sizes = utter_prior_sizes or [None] * len(utter_posteriors)
    total = categorical_kl_to_uniform(goal_posterior, goal_prior_size)
    for q, k in zip(utter_posteriors, sizes):
        total = total + categorical_kl_to_uniform(q, k)
    return total


def _masked_input_mean(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    mask = torch.arange(x.shape[1], device=x.device)[None, :] < lengths[:, None]
    mask = mask.unsqueeze(-1).to(x.dtype)
    return (x * mask).sum(dim=1) / lengths[:, None].to(x.dtype)


class _SeqEncoder(nn.Module):
    """Bidirectional GRU with an input-mean residual shortcut.

    The recurrent branch's projection starts near zero, so an untrained
    encoder outputs roughly the mean of its input vectors; recognition logits
    then begin as lexical similarity in the shared embedding space (the role
    pretrained embeddings play at corpus scale) and the GRU learns
    corrections on top.
    """

    def __init__(self, input_dim: int, hidden_dim: int, out_dim: int | None,
                 residual_mean: bool = False):
        super().__init__()
        self.gru = nn.GRU(input_dim, hidden_dim, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden_dim, out_dim) if out_dim else None
        self.residual_mean = residual_mean and out_dim == input_dim
        if self.proj is not None and self.residual_mean:
            nn.init.normal_(self.proj.weight, std=0.01)
            nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor):
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        outputs, h_n = self.gru(packed)
        outputs, _ = nn.utils.rnn.pad_packed_sequence(outputs, batch_first=True)
        final = torch.cat([h_n[0], h_n[1]], dim=-1)
        if self.proj is not None:
            final = self.proj(final)
            if self.residual_mean:
                final = final + _masked_input_mean(x, lengths)
        return outputs, final

    def mean_pool(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        outputs, _ = self.forward(x, lengths)
        mask = torch.arange(outputs.shape[1], device=x.device)[None, :] < lengths[:, None]
        mask = mask.unsqueeze(-1).to(outputs.dtype)
        return (outputs * mask).sum(dim=1) / lengths[:, None].to(outputs.dtype)


@dataclass
class RecognitionResult:
    z_posteriors: list[torch.Tensor]
    z_ids: list[int]
    g_posterior: torch.Tensor
    g_id: int
    shortlists: list[list[int]]


class StructureModel(nn.Module):
    def __init__(self, config: ModelConfig, phrase_token_ids: Sequence[Sequence[int]],
                 edges: Sequence[tuple[int, int]] = ()):
        super().__init__()
        if len(phrase_token_ids) != config.num_vertices:
            raise ConfigError(
                f"expected {config.num_vertices} phrases, got {len(phrase_token_ids)}"
            )
        self.config = config
        self.edges: tuple[tuple[int, int], ...] = tuple((int(a), int(b)) for a, b in edges)

        c = config
        self.word_emb = nn.Embedding(c.vocab_size, c.emb_dim, padding_idx=c.pad_id)
        self.v_table = nn.Embedding(c.num_vertices, c.latent_dim)
        self.goal_table = nn.Parameter(torch.empty(c.num_goals, c.emb_dim))
        # small init keeps initial decoder logits near uniform and lets the
        # phrase encoding dominate the coupled vertex embedding early on;
        # larger emb_init_std strengthens the lexical anchor instead
        nn.init.normal_(self.word_emb.weight, std=c.emb_init_std)
        with torch.no_grad():
            self.word_emb.weight[c.pad_id].zero_()
        nn.init.normal_(self.v_table.weight, std=0.1)
        nn.init.normal_(self.goal_table, std=0.1)

        self.phrase_encoder = _SeqEncoder(c.emb_dim, c.hidden_dim, out_dim=None)
        self.utter_encoder = _SeqEncoder(c.emb_dim, c.hidden_dim, out_dim=c.emb_dim,
                                         residual_mean=True)
        self.vertex_seq_encoder = _SeqEncoder(c.emb_dim, c.hidden_dim, out_dim=c.emb_dim,
                                              residual_mean=True)
        self.vertex_proj = nn.Linear(2 * c.hidden_dim + c.latent_dim, c.emb_dim)
        # small-init projection: the coupled embedding starts at the phrase's
        # mean word embedding, the learned branch grows from there
        nn.init.normal_(self.vertex_proj.weight, std=0.01)
        nn.init.zeros_(self.vertex_proj.bias)

        self.decoder_init = nn.Linear(2 * c.emb_dim, c.hidden_dim)
        self.decoder_gru = nn.GRU(c.emb_dim, c.hidden_dim, batch_first=True)
        # output layer tied to the shared word embedding table
        self.decoder_out = nn.Linear(c.hidden_dim, c.emb_dim)
        self.dropout = nn.Dropout(c.dropout)

        max_phrase_len = max(len(p) for p in phrase_token_ids)
        tok = torch.full((c.num_vertices, max_phrase_len), c.pad_id, dtype=torch.long)
        lengths = torch.empty(c.num_vertices, dtype=torch.long)
        for i, ids in enumerate(phrase_token_ids):
            if not ids:
                raise ConfigError(f"phrase {i} has no tokens")
            tok[i, : len(ids)] = torch.tensor(ids, dtype=torch.long)
            lengths[i] = len(ids)
        self.register_buffer("phrase_tokens", tok)
        self.register_buffer("phrase_lengths", lengths)

        if c.gcn_transform:
            self.gcn_transforms = nn.ModuleList(
                [nn.Linear(c.emb_dim, c.emb_dim) for _ in range(c.gcn_layers)]
            )
        else:
            self.gcn_transforms = None

        if c.freeze_phrase_encoder:
            for p in self.phrase_encoder.parameters():
                p.requires_grad_(False)

    # ---------------------------------------------------------------- tables

    def vertex_embeddings(self) -> torch.Tensor:
        """Coupled embedding of every utterance vertex: a projection of the
        mean-pooled phrase encoding concatenated with its latent vector, plus
        the phrase's mean word embedding as a lexical anchor."""
        emb = self.dropout(self.word_emb(self.phrase_tokens))
        phrase_repr = self.phrase_encoder.mean_pool(emb, self.phrase_lengths)
        anchor = _masked_input_mean(emb, self.phrase_lengths)
        return self.vertex_proj(torch.cat([phrase_repr, self.v_table.weight], dim=-1)) + anchor

    def utter_vertex_embedding(self, n: int) -> torch.Tensor:
        if not 0 <= n < self.config.num_vertices:
            raise AtlasError(f"unknown utterance vertex {n}")
        return self.vertex_embeddings()[n]

    def structure_embeddings(self, vertex_emb: torch.Tensor | None = None) -> torch.Tensor:
        """Graph-refined vertex states: propagation over the phrase-graph
        edges. Detached from the vertex table by default so only shortlisted
        latent rows receive gradients."""
        h0 = self.vertex_embeddings() if vertex_emb is None else vertex_emb
        if not self.config.gcn_backprop:
            h0 = h0.detach()
        return gcn_propagate(h0, self.edges, self.config.gcn_layers, self.gcn_transforms)

    # ------------------------------------------------------------- encoders

    def encode_utterances(self, token_ids: Sequence[Sequence[int]]) -> torch.Tensor:
        """Encode a batch of token-id sequences into recognition vectors."""
        c = self.config
        ids = [list(t[: c.max_len]) for t in token_ids]
        if any(not t for t in ids):
            raise AtlasError("cannot encode an empty utterance")
        max_len = max(len(t) for t in ids)
        batch = torch.full((len(ids), max_len), c.pad_id, dtype=torch.long)
        lengths = torch.empty(len(ids), dtype=torch.long)
        for i, t in enumerate(ids):
            batch[i, : len(t)] = torch.tensor(t, dtype=torch.long)
            lengths[i] = len(t)
        device = self.goal_table.device
        emb = self.dropout(self.word_emb(batch.to(device)))
        _, final = self.utter_encoder(emb, lengths.to(device))
        return final

    # ---------------------------------------------------------- recognition

    def utterance_logits(
        self, token_ids: Sequence[int], shortlist: Sequence[int],
        vertex_emb: torch.Tensor | None = None,
    ) -> torch.Tensor:
        if not shortlist:
            raise AtlasError("empty shortlist")
        lam_x = self.vertex_embeddings() if vertex_emb is None else vertex_emb
        e_x = self.encode_utterances([token_ids])[0]
        rows = lam_x[torch.tensor(list(shortlist), dtype=torch.long, device=e_x.device)]
        return rows @ e_x

    def recognize_utterance(
        self,
        token_ids: Sequence[int],
        shortlist: Sequence[int],
        mode: str = "argmax",
        tau: float = 1.0,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, int]:
        """Posterior over the shortlist plus the selected vertex id."""
        logits = self.utterance_logits(token_ids, shortlist)
        posterior = F.softmax(logits, dim=-1).detach()
        if mode == "sample":
            y = gumbel_softmax_sample(logits, tau, generator=generator, hard=True)
            idx = int(y.argmax())
        elif mode == "argmax":
            idx = int(logits.argmax())
        else:
            raise ConfigError(f"unknown recognition mode {mode!r}")
        return posterior, shortlist[idx]

    def recognize_session(
        self,
        z_ids: Sequence[int],
        mode: str = "argmax",
        tau: float = 1.0,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, int]:
        """Goal posterior from the graph-refined embeddings of an utterance
        vertex sequence."""
        if not z_ids:
            raise AtlasError("empty vertex sequence")
        h3 = self.structure_embeddings()
        seq = h3[torch.tensor(list(z_ids), dtype=torch.long, device=h3.device)]
        e_z = self._encode_vertex_sequence(seq)
        logits = self.goal_table @ e_z
        posterior = F.softmax(logits, dim=-1).detach()
        if mode == "sample":
            y = gumbel_softmax_sample(logits, tau, generator=generator, hard=True)
            g = int(y.argmax())
        elif mode == "argmax":
            g = int(logits.argmax())
        else:
            raise ConfigError(f"unknown recognition mode {mode!r}")
        return posterior, g

    def _encode_vertex_sequence(self, seq: torch.Tensor) -> torch.Tensor:
        lengths = torch.tensor([seq.shape[0]], device=seq.device)
        _, final = self.vertex_seq_encoder(seq.unsqueeze(0), lengths)
        return final[0]

    def recognize(self, session_token_ids: Sequence[Sequence[int]],
                  index: ShortlistIndex, session_tokens: Sequence[Sequence[str]],
                  mode: str = "argmax") -> RecognitionResult:
        """Full two-level argmax/sample recognition of one session."""
        shortlists = [index.shortlist(toks, self.config.shortlist_k) for toks in session_tokens]
        z_posteriors, z_ids = [], []
        for ids, sl in zip(session_token_ids, shortlists):
            q, z = self.recognize_utterance(ids, sl, mode=mode)
            z_posteriors.append(q)
            z_ids.append(z)
        g_posterior, g_id = self.recognize_session(z_ids, mode=mode)
        return RecognitionResult(z_posteriors, z_ids, g_posterior, int(g_id), shortlists)

    # -------------------------------------------------------- reconstruction

    def _decoder_nll(self, token_ids: Sequence[Sequence[int]],
                     z_emb: torch.Tensor, g_emb: torch.Tensor) -> torch.Tensor:
        """Teacher-forced NLL (token sum) of each utterance; z_emb is one
        vertex vector per utterance, g_emb a shared goal vector or one row
        per utterance."""
        c = self.config
        if g_emb.dim() == 1:
            g_emb = g_emb.unsqueeze(0)
        g_emb = g_emb.expand(z_emb.shape[0], -1)
        ids = [list(t[: c.max_len]) for t in token_ids]
        max_len = max(len(t) for t in ids) + 1
        device = z_emb.device
        inputs = torch.full((len(ids), max_len), c.pad_id, dtype=torch.long, device=device)
        targets = torch.full((len(ids), max_len), c.pad_id, dtype=torch.long, device=device)
        for i, t in enumerate(ids):
            inputs[i, 0] = c.bos_id
            inputs[i, 1 : len(t) + 1] = torch.tensor(t, device=device)
            targets[i, : len(t)] = torch.tensor(t, device=device)
            targets[i, len(t)] = c.eos_id
        mask = targets != c.pad_id

        h0 = torch.tanh(self.decoder_init(torch.cat([z_emb, g_emb], dim=-1)))
        emb = self.dropout(self.word_emb(inputs))
        out, _ = self.decoder_gru(emb, h0.unsqueeze(0))
        logits = self.decoder_out(out) @ self.word_emb.weight.t()
        logp = F.log_softmax(logits, dim=-1)
        token_nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        return (token_nll * mask.to(token_nll.dtype)).sum(dim=-1)

    def reconstruct_nll(self, token_ids: Sequence[int], z: int, g: int) -> torch.Tensor:
        """NLL of one utterance reconstructed from hard vertex assignments."""
        if not 0 <= z < self.config.num_vertices or not 0 <= g < self.config.num_goals:
            raise AtlasError(f"invalid vertex ids z={z}, g={g}")
        lam_x = self.vertex_embeddings()
        return self._decoder_nll([token_ids], lam_x[z : z + 1], self.goal_table[g])[0]

    @torch.no_grad()
    def greedy_reconstruct(self, z: int, g: int, max_len: int | None = None) -> list[int]:
        """Greedy decode of an utterance from hard vertex assignments."""
        c = self.config
        max_len = max_len or c.max_len
        lam_x = self.vertex_embeddings()
        h = torch.tanh(
            self.decoder_init(torch.cat([lam_x[z], self.goal_table[g]], dim=-1))
        ).view(1, 1, -1)
        tok = torch.tensor([[c.bos_id]], device=h.device)
        out_ids: list[int] = []
        for _ in range(max_len):
            emb = self.word_emb(tok)
            out, h = self.decoder_gru(emb, h)
            logits = self.decoder_out(out[:, -1]) @ self.word_emb.weight.t()
            nxt = int(logits.argmax(dim=-1))
            if nxt == c.eos_id:
                break
            out_ids.append(nxt)
            tok = torch.tensor([[nxt]], device=h.device)
        return out_ids

    # ----------------------------------------------------------------- ELBO

    def recognition_tables(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(vertex embeddings, graph-refined states) pair; compute once per
        optimization step and share across the batch."""
        c = self.config
        lam_x = self.vertex_embeddings()
        h3 = gcn_propagate(
            lam_x if c.gcn_backprop else lam_x.detach(),
            self.edges, c.gcn_layers, self.gcn_transforms,
        )
        return lam_x, h3

    def elbo_loss(
        self,
        session_token_ids: Sequence[Sequence[int]],
        shortlists: Sequence[Sequence[int]],
        tau: float = 1.0,
        sample_mode: str = "st",
        generator: torch.Generator | None = None,
        tables: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> dict[str, torch.Tensor]:
        """Single-sample negative ELBO of one session.

        sample_mode "st" draws straight-through one-hots (training), "soft"
        keeps the relaxed samples (fully differentiable, used by gradient
        checks), "argmax" is deterministic.
        """
        if not session_token_ids:
            raise AtlasError("empty session")
        c = self.config
        lam_x, h3 = tables if tables is not None else self.recognition_tables()
        e_x = self.encode_utterances(session_token_ids)

        kl_utter = lam_x.new_zeros(())
        z_embs, h3_sel = [], []
        for i, sl in enumerate(shortlists):
            if not sl:
                raise AtlasError("empty shortlist")
            rows = torch.tensor(list(sl), dtype=torch.long, device=lam_x.device)
            logits = lam_x[rows] @ e_x[i]
            q = F.softmax(logits, dim=-1)
            prior_k = c.num_vertices if c.prior_over_all else None
            kl_utter = kl_utter + categorical_kl_to_uniform(q, prior_k)
            y = self._select(logits, tau, sample_mode, generator)
            z_embs.append(y @ lam_x[rows])
            h3_sel.append(y @ h3[rows])

        e_z = self._encode_vertex_sequence(torch.stack(h3_sel))
        logits_g = self.goal_table @ e_z
        q_g = F.softmax(logits_g, dim=-1)
        kl_goal = categorical_kl_to_uniform(q_g)
        y_g = self._select(logits_g, tau, sample_mode, generator)
        g_emb = y_g @ self.goal_table

        recon = self._decoder_nll(session_token_ids, torch.stack(z_embs), g_emb).sum()
        total = recon + kl_utter + kl_goal
        return {"total": total, "recon": recon, "kl_utter": kl_utter, "kl_goal": kl_goal}

    @staticmethod
    def _select(logits: torch.Tensor, tau: float, sample_mode: str,
                generator: torch.Generator | None) -> torch.Tensor:
        if sample_mode == "st":
            return gumbel_softmax_sample(logits, tau, generator=generator, hard=True)
        if sample_mode == "soft":
            return gumbel_softmax_sample(logits, tau, generator=generator, hard=False)
        if sample_mode == "argmax":
            return F.one_hot(logits.argmax(dim=-1), logits.shape[-1]).to(logits.dtype)
        raise ConfigError(f"unknown sample mode {sample_mode!r}")

    def batch_elbo(
        self,
        batch_token_ids: Sequence[Sequence[Sequence[int]]],
        batch_shortlists: Sequence[Sequence[Sequence[int]]],
        tau: float = 1.0,
        sample_mode: str = "st",
        generator: torch.Generator | None = None,
        tables: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> dict[str, torch.Tensor]:
        """Vectorized negative ELBO summed over a batch of sessions; same
        objective as elbo_loss, one packed pass per sub-network."""
        if not batch_token_ids:
            raise AtlasError("empty batch")
        c = self.config
        lam_x, h3 = tables if tables is not None else self.recognition_tables()
        device = lam_x.device
        flat_ids = [u for sess in batch_token_ids for u in sess]
        flat_sls = [list(sl) for sess in batch_shortlists for sl in sess]
        if len(flat_ids) != len(flat_sls):
            raise AtlasError("token/shortlist shape mismatch")
        n_utts = len(flat_ids)
        e_x = self.encode_utterances(flat_ids)

        width = max(len(sl) for sl in flat_sls)
        sl_mat = torch.zeros((n_utts, width), dtype=torch.long, device=device)
        sl_mask = torch.zeros((n_utts, width), dtype=torch.bool, device=device)
        for i, sl in enumerate(flat_sls):
            if not sl:
                raise AtlasError("empty shortlist")
            sl_mat[i, : len(sl)] = torch.tensor(sl, device=device)
            sl_mask[i, : len(sl)] = True
        rows = lam_x[sl_mat]
        logits = torch.einsum("ukd,ud->uk", rows, e_x)
        logits = logits.masked_fill(~sl_mask, float("-inf"))
        q = F.softmax(logits, dim=-1)
        support = sl_mask.sum(dim=-1).to(q.dtype)
        plogp = torch.where(sl_mask, q * q.clamp_min(1e-20).log(), torch.zeros_like(q))
        prior_k = torch.full_like(support, c.num_vertices) if c.prior_over_all else support
        kl_utter = (prior_k.log() + plogp.sum(dim=-1)).sum()

        y = self._select(logits, tau, sample_mode, generator)
        z_emb = torch.einsum("uk,ukd->ud", y, rows)
        h3_sel = torch.einsum("uk,ukd->ud", y, h3[sl_mat])

        lengths = torch.tensor([len(s) for s in batch_token_ids], device=device)
        c_max = int(lengths.max())
        seq = torch.zeros((len(batch_token_ids), c_max, h3_sel.shape[-1]),
                          dtype=h3_sel.dtype, device=device)
        offset = 0
        for b, n in enumerate(lengths.tolist()):
            seq[b, :n] = h3_sel[offset : offset + n]
            offset += n
        _, e_z = self.vertex_seq_encoder(seq, lengths)
        logits_g = e_z @ self.goal_table.t()
        q_g = F.softmax(logits_g, dim=-1)
        kl_goal = (math.log(c.num_goals) +
                   (q_g * q_g.clamp_min(1e-20).log()).sum(dim=-1)).sum()
        y_g = self._select(logits_g, tau, sample_mode, generator)
        g_emb = y_g @ self.goal_table
        g_per_utt = torch.repeat_interleave(g_emb, lengths, dim=0)

        recon = self._decoder_nll(flat_ids, z_emb, g_per_utt).sum()
        total = recon + kl_utter + kl_goal
        return {"total": total, "recon": recon, "kl_utter": kl_utter,
                "kl_goal": kl_goal, "n_utterances": torch.tensor(float(n_utts)),
                "n_sessions": torch.tensor(float(len(batch_token_ids)))}


# ------------------------------------------------------------- checkpointing


def save_checkpoint(
    out_dir: str | Path,
    model: StructureModel,
    vocab: Vocab,
    phrases: Sequence[Phrase],
    extra: dict | None = None,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "state_dict": model.state_dict(),
        "config": asdict(model.config),
        "edges": list(model.edges),
        "phrase_token_ids": [vocab.encode(p.tokens) for p in phrases],
        "vocab_hash": vocab.content_hash(),
        "extra": extra or {},
    }
    torch.save(payload, out / "model.pt")
    vocab.save(out / "vocab.json")
    from .phrases import save_phrases

    save_phrases(phrases, out / "phrases.jsonl")
    (out / "config.json").write_text(json.dumps(asdict(model.config), indent=2))
    return out


@dataclass
class ModelBundle:
    model: StructureModel
    vocab: Vocab
    phrases: list[Phrase]
    index: ShortlistIndex = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.index is None:
            self.index = ShortlistIndex(self.phrases)


def load_checkpoint(ckpt_dir: str | Path, expected_vocab: Vocab | None = None) -> ModelBundle:
    ckpt_dir = Path(ckpt_dir)
    payload = torch.load(ckpt_dir / "model.pt", map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    vocab = Vocab.load(ckpt_dir / "vocab.json")
    if payload["vocab_hash"] != vocab.content_hash():
        raise ConfigError("checkpoint/vocab mismatch")
    if expected_vocab is not None and expected_vocab.content_hash() != payload["vocab_hash"]:
        raise ConfigError("checkpoint/vocab mismatch")
    from .phrases import load_phrases

    phrases = load_phrases(ckpt_dir / "phrases.jsonl")
    config = ModelConfig(**payload["config"])
    model = StructureModel(config, payload["phrase_token_ids"],
                           edges=[tuple(e) for e in payload["edges"]])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return ModelBundle(model=model, vocab=vocab, phrases=phrases)


def checkpoint_hash(ckpt_dir: str | Path) -> str:
    data = (Path(ckpt_dir) / "model.pt").read_bytes()
    return hashlib.sha256(data).hexdigest()


def edges_from_phrase_graph(graph: PhraseGraph) -> list[tuple[int, int]]:
    return [e for e, _ in sorted(graph.edges.items())]
