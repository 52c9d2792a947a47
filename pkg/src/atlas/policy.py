"""Graph grounded conversational policy: context understanding, two-level
vertex selection, three-factor rewards, episode rollouts, and A2C training."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Utterance
from .errors import AtlasError, ConfigError, UnmappableContext
from .generator import GeneratorInput, Seq2SeqGenerator
from .graph import StructureGraph
from .model import ModelBundle, gumbel_softmax_sample
from .relevance import RelevanceScorer
from .simulators import Simulator

logger = logging.getLogger(__name__)

DEFAULT_REWARD_WEIGHTS = (60.0, 0.5, -0.5)
MAX_TURNS = 8


@dataclass(frozen=True)
class RlState:
    context: tuple[tuple[str, ...], ...]  # last two utterances, oldest first
    goal_history: tuple[int, ...]
    utter_history: tuple[int, ...]
    turn_index: int


@dataclass(frozen=True)
class CandidateSet:
    level: str  # "session" | "utterance"
    ids: tuple[int, ...]

    def __post_init__(self):
        if self.level not in ("session", "utterance"):
            raise ConfigError(f"bad candidate level {self.level!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    relevance: float
    closeness: float
    repetition: int
    weighted_total: float
    scorer_failed: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TurnRecord:
    state: RlState
    hit_vertex: int
    hit_fallback: bool
    goal_id: int
    vertex_id: int
    vertex_phrase: tuple[str, ...]
    response: tuple[str, ...]
    user_text: str
    reward: RewardBreakdown
    # tensors kept only for on-policy updates
    goal_logprob: torch.Tensor | None = None
    utter_logprob: torch.Tensor | None = None
    goal_value: torch.Tensor | None = None
    utter_value: torch.Tensor | None = None
    goal_entropy: float = 0.0
    utter_entropy: float = 0.0


@dataclass
class Trajectory:
    turns: list[TurnRecord] = field(default_factory=list)
    terminal: bool = False
    error: str | None = None

    def __len__(self) -> int:
        return len(self.turns)


# ------------------------------------------------------------------ rewards


def repetition_flag(phrase: Sequence[str], context: Sequence[Sequence[str]],
                    threshold: float = 0.6) -> int:
    """1 iff the phrase shares strictly more than `threshold` of its tokens
    (multiset) with any single contextual utterance."""
    if not phrase:
        return 0
    phrase_counts = Counter(phrase)
    total = len(phrase)
    for utt in context:
        overlap = sum((phrase_counts & Counter(utt)).values())
        if overlap / total > threshold:
            return 1
    return 0


def compute_reward(
    context: Sequence[Sequence[str]],
    response: Sequence[str],
    goal: int,
    chosen: int,
    graph: StructureGraph,
    scorer: RelevanceScorer,
    weights: tuple[float, float, float] = DEFAULT_REWARD_WEIGHTS,
    repetition_on_response: bool = False,
) -> RewardBreakdown:
    """Weighted sum of relevance, utter-goal closeness, and the repetition
    penalty flag."""
    failed = False
    try:
        relevance = float(scorer.score(context, response))
    except Exception:
        logger.warning("relevance scorer failed, treating relevance as 0")
        relevance, failed = 0.0, True
    relevance = min(1.0, max(0.0, relevance))
    closeness = graph.goal_closeness(goal, chosen)
    target = tuple(response) if repetition_on_response else graph.phrase_of(chosen)
    rep = repetition_flag(target, context)
    w1, w2, w3 = weights
    total = w1 * relevance + w2 * closeness + w3 * rep
    return RewardBreakdown(relevance=relevance, closeness=closeness, repetition=rep,
                           weighted_total=total, scorer_failed=failed)


def goal_segments(goal_ids: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of equal consecutive goals, in order."""
    segments = []
    start = 0
    for i in range(1, len(goal_ids) + 1):
        if i == len(goal_ids) or goal_ids[i] != goal_ids[start]:
            segments.append((start, i))
            start = i
    return segments


def assign_goal_reward(goal_ids: Sequence[int], rewards: Sequence[float]) -> list[float]:
    """Per-turn goal-level reward: the mean utterance reward of the turn's
    goal segment."""
    if len(goal_ids) != len(rewards):
        raise AtlasError("goal/reward length mismatch")
    out = [0.0] * len(goal_ids)
    for start, end in goal_segments(goal_ids):
        seg_mean = sum(rewards[start:end]) / (end - start)
        for i in range(start, end):
            out[i] = seg_mean
    return out


# ---------------------------------------------------------------- policy net


@dataclass
class PolicyConfig:
    vocab_size: int
    vertex_dim: int  # must match the structure model's embedding dim
    emb_dim: int = 64
    hidden_dim: int = 64
    pad_id: int = 0
    sep_id: int = 3


class PolicyNet(nn.Module):
    """Three independent recurrent encoders (context tokens, goal sequence,
    vertex sequence) concatenated into the state vector, plus one value head
    per sub-policy."""

    def __init__(self, config: PolicyConfig):
        super().__init__()
        self.config = config
        c = config
        self.word_emb = nn.Embedding(c.vocab_size, c.emb_dim, padding_idx=c.pad_id)
        self.context_gru = nn.GRU(c.emb_dim, c.hidden_dim, batch_first=True)
        self.goal_gru = nn.GRU(c.vertex_dim, c.hidden_dim, batch_first=True)
        self.utter_gru = nn.GRU(c.vertex_dim, c.hidden_dim, batch_first=True)
        self.state_proj = nn.Linear(3 * c.hidden_dim, c.vertex_dim)
        self.goal_value = nn.Linear(3 * c.hidden_dim, 1)
        self.utter_value = nn.Linear(3 * c.hidden_dim, 1)

    def encode_state(self, state: RlState, lam_g: torch.Tensor,
                     lam_x: torch.Tensor, vocab) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (state vector for action scoring, raw feature for values).
        Empty histories contribute zero blocks."""
        c = self.config
        parts = []
        ctx_ids: list[int] = []
        for i, utt in enumerate(state.context):
            if i:
                ctx_ids.append(c.sep_id)
            ctx_ids.extend(vocab.encode(utt))
        if ctx_ids:
            x = torch.tensor([ctx_ids], dtype=torch.long)
            _, h = self.context_gru(self.word_emb(x))
            parts.append(h[0, 0])
        else:
            parts.append(torch.zeros(c.hidden_dim))
        for history, gru, table in (
            (state.goal_history, self.goal_gru, lam_g),
            (state.utter_history, self.utter_gru, lam_x),
        ):
            if history:
                seq = table[torch.tensor(list(history), dtype=torch.long)].detach()
                _, h = gru(seq.unsqueeze(0))
                parts.append(h[0, 0])
            else:
                parts.append(torch.zeros(c.hidden_dim))
        raw = torch.cat(parts, dim=-1)
        return self.state_proj(raw), raw

    @staticmethod
    def action_distribution(e_s: torch.Tensor, table: torch.Tensor,
                            candidates: CandidateSet) -> torch.Tensor:
        if not candidates.ids:
            raise AtlasError(f"empty {candidates.level} candidate set")
        rows = table[torch.tensor(list(candidates.ids), dtype=torch.long)].detach()
        logits = rows @ e_s
        return logits

    def select(self, logits: torch.Tensor, mode: str, tau: float = 1.0,
               generator: torch.Generator | None = None) -> tuple[torch.Tensor, int]:
        probs = F.softmax(logits, dim=-1)
        if mode == "sample":
            y = gumbel_softmax_sample(logits, tau, generator=generator, hard=True)
            return probs, int(y.argmax())
        if mode == "argmax":
            return probs, int(logits.argmax())
        raise ConfigError(f"unknown policy mode {mode!r}")


def session_policy(policy: PolicyNet, e_s: torch.Tensor, lam_g: torch.Tensor,
                   candidates: CandidateSet, mode: str = "argmax", tau: float = 1.0,
                   generator: torch.Generator | None = None):
    """Distribution over candidate goals and the chosen goal id."""
    if candidates.level != "session":
        raise ConfigError("session_policy requires session-level candidates")
    logits = policy.action_distribution(e_s, lam_g, candidates)
    probs, idx = policy.select(logits, mode, tau, generator)
    return probs, candidates.ids[idx], idx


def utterance_policy(policy: PolicyNet, e_s: torch.Tensor, lam_x: torch.Tensor,
                     candidates: CandidateSet, mode: str = "argmax", tau: float = 1.0,
                     generator: torch.Generator | None = None):
    """Distribution over candidate utterance vertices and the chosen id."""
    if candidates.level != "utterance":
        raise ConfigError("utterance_policy requires utterance-level candidates")
    logits = policy.action_distribution(e_s, lam_x, candidates)
    probs, idx = policy.select(logits, mode, tau, generator)
    return probs, candidates.ids[idx], idx


# ------------------------------------------------------------ understanding


def understand_context(
    context: Sequence[Sequence[str]],
    bundle: ModelBundle,
    graph: StructureGraph,
) -> tuple[int, bool]:
    """Map the last context utterance to an utterance vertex present in the
    graph. Returns (vertex id, fallback flag)."""
    if not context:
        raise UnmappableContext("empty context")
    last = list(context[-1])
    model = bundle.model
    scores = bundle.index.scores(last)
    shortlist = bundle.index.shortlist(last, model.config.shortlist_k)
    in_graph = [v for v in shortlist if v in graph.utter_vertices]
    if in_graph:
        ids = bundle.vocab.encode(last)
        with torch.no_grad():
            _, z = model.recognize_utterance(ids, in_graph, mode="argmax")
        no_signal = all(scores[v] == 0.0 for v in in_graph)
        return int(z), no_signal
    graph_vs = sorted(graph.utter_vertices)
    if not graph_vs:
        raise UnmappableContext("graph has no utterance vertices")
    best = min(graph_vs, key=lambda v: (-scores[v], v))
    return best, True


# -------------------------------------------------------------------- agent


class DialogAgent:
    """Stateful per-dialog decision loop shared by rollouts, the REPL, and
    the HTTP service."""

    def __init__(
        self,
        policy: PolicyNet,
        bundle: ModelBundle,
        graph: StructureGraph,
        generator: Seq2SeqGenerator,
        scorer: RelevanceScorer,
        mode: str = "argmax",
        tau: float = 1.0,
        reward_weights: tuple[float, float, float] = DEFAULT_REWARD_WEIGHTS,
        max_turns: int = MAX_TURNS,
        rng: torch.Generator | None = None,
        keep_tensors: bool = False,
        decode: str = "greedy",
        beam_size: int = 1,
    ):
        self.policy = policy
        self.bundle = bundle
        self.graph = graph
        self.generator = generator
        self.scorer = scorer
        self.mode = mode
        self.tau = tau
        self.reward_weights = reward_weights
        self.max_turns = max_turns
        self.rng = rng
        self.keep_tensors = keep_tensors
        self.decode = decode
        self.beam_size = beam_size
        with torch.no_grad():
            self.lam_x = bundle.model.vertex_embeddings().detach()
        self.lam_g = bundle.model.goal_table.detach()
        self.reset()

    def reset(self) -> None:
        self._context: list[tuple[str, ...]] = []
        self._goal_history: list[int] = []
        self._utter_history: list[int] = []
        self._turn = 0

    @property
    def turn(self) -> int:
        return self._turn

    @property
    def current_goal(self) -> int | None:
        return self._goal_history[-1] if self._goal_history else None

    def _push_context(self, tokens: tuple[str, ...]) -> None:
        self._context.append(tokens)
        if len(self._context) > 2:
            self._context.pop(0)

    def state(self) -> RlState:
        return RlState(
            context=tuple(self._context),
            goal_history=tuple(self._goal_history),
            utter_history=tuple(self._utter_history),
            turn_index=self._turn,
        )

    def _goal_candidates(self, hit: int) -> CandidateSet:
        parents = self.graph.parents(hit)
        if parents:
            return CandidateSet(level="session", ids=tuple(parents))
        if self._goal_history:
            return CandidateSet(level="session", ids=(self._goal_history[-1],))
        # first turn with an orphan hit: closest goal wins, ties by id
        goals = sorted(self.graph.sess_vertices)
        if not goals:
            raise UnmappableContext("graph has no session vertices")
        best = min(goals, key=lambda m: (-self.graph.goal_closeness(m, hit), m))
        return CandidateSet(level="session", ids=(best,))

    def step(self, user_text: str, pin_goal: int | None = None) -> TurnRecord:
        """One agent turn: understand, pick goal and vertex, generate, score."""
        if self._turn >= self.max_turns:
            raise AtlasError("turn cap reached")
        user_tokens = Utterance.from_text(user_text).tokens
        if not user_tokens:
            raise UnmappableContext("empty user utterance")
        self._push_context(user_tokens)
        state = self.state()

        hit, fallback = understand_context(self._context, self.bundle, self.graph)
        goal_cands = self._goal_candidates(hit)
        if pin_goal is not None:
            if pin_goal not in goal_cands.ids:
                raise AtlasError(
                    f"pinned goal {pin_goal} not among candidates {list(goal_cands.ids)}"
                )
            goal_cands = CandidateSet(level="session", ids=(pin_goal,))

        e_s, raw = self.policy.encode_state(state, self.lam_g, self.lam_x, self.bundle.vocab)
        g_probs, goal, g_idx = session_policy(
            self.policy, e_s, self.lam_g, goal_cands, self.mode, self.tau, self.rng
        )
        children = self.graph.children(goal)
        utter_cands = CandidateSet(level="utterance", ids=tuple(children) or (hit,))
        u_probs, vertex, u_idx = utterance_policy(
            self.policy, e_s, self.lam_x, utter_cands, self.mode, self.tau, self.rng
        )

        phrase = self.graph.phrase_of(vertex)
        response = tuple(
            self.generator.generate(
                GeneratorInput(last_user_utterance=user_tokens, phrase=phrase),
                self.bundle.vocab, decode=self.decode, beam_size=self.beam_size,
            )
        )
        reward = compute_reward(
            self._context, response, goal, vertex, self.graph, self.scorer,
            weights=self.reward_weights,
        )

        record = TurnRecord(
            state=state, hit_vertex=hit, hit_fallback=fallback,
            goal_id=goal, vertex_id=vertex, vertex_phrase=phrase,
            response=response, user_text=user_text, reward=reward,
        )
        if self.keep_tensors:
            record.goal_logprob = torch.log(g_probs[g_idx].clamp_min(1e-20))
            record.utter_logprob = torch.log(u_probs[u_idx].clamp_min(1e-20))
            record.goal_value = self.policy.goal_value(raw)[0]
            record.utter_value = self.policy.utter_value(raw)[0]
            with torch.no_grad():
                record.goal_entropy = float(-(g_probs * g_probs.clamp_min(1e-20).log()).sum())
                record.utter_entropy = float(-(u_probs * u_probs.clamp_min(1e-20).log()).sum())

        self._goal_history.append(goal)
        self._utter_history.append(vertex)
        self._push_context(response)
        self._turn += 1
        return record


def run_episode(
    policy: PolicyNet,
    simulator: Simulator,
    bundle: ModelBundle,
    graph: StructureGraph,
    generator: Seq2SeqGenerator,
    scorer: RelevanceScorer,
    max_turns: int = MAX_TURNS,
    mode: str = "argmax",
    tau: float = 1.0,
    rng: torch.Generator | None = None,
    keep_tensors: bool = False,
    reward_weights: tuple[float, float, float] = DEFAULT_REWARD_WEIGHTS,
) -> Trajectory:
    """Alternating agent/simulator rollout, capped at max_turns agent turns."""
    agent = DialogAgent(policy, bundle, graph, generator, scorer, mode=mode, tau=tau,
                        reward_weights=reward_weights, max_turns=max_turns,
                        rng=rng, keep_tensors=keep_tensors)
    trajectory = Trajectory()
    user_text = simulator.reset()
    for _ in range(max_turns):
        try:
            record = agent.step(user_text)
        except AtlasError as e:
            trajectory.error = str(e)
            trajectory.terminal = True
            break
        trajectory.turns.append(record)
        user_text, done = simulator.respond(" ".join(record.response))
        if done:
            trajectory.terminal = True
            break
    return trajectory


# ---------------------------------------------------------------------- A2C


@dataclass
class A2CConfig:
    episodes: int = 2000
    gamma: float = 0.95
    lr: float = 5e-3
    seed: int = 0
    tau: float = 1.0
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    grad_clip: float = 5.0
    max_turns: int = MAX_TURNS
    reward_weights: tuple[float, float, float] = DEFAULT_REWARD_WEIGHTS
    log_every: int = 100


@dataclass
class EpisodeLog:
    episode: int
    mean_reward: float
    goal_entropy: float
    utter_entropy: float
    length: int


def a2c_train(
    policy: PolicyNet,
    simulator: Simulator,
    bundle: ModelBundle,
    graph: StructureGraph,
    generator: Seq2SeqGenerator,
    scorer: RelevanceScorer,
    config: A2CConfig,
) -> list[EpisodeLog]:
    """One-step TD advantage actor-critic over both sub-policies; the
    structure model and generator stay frozen."""
    torch.manual_seed(config.seed)
    rng = torch.Generator().manual_seed(config.seed + 1)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.lr)
    curves: list[EpisodeLog] = []

    for episode in range(1, config.episodes + 1):
        policy.train()
        trajectory = run_episode(
            policy, simulator, bundle, graph, generator, scorer,
            max_turns=config.max_turns, mode="sample", tau=config.tau,
            rng=rng, keep_tensors=True, reward_weights=config.reward_weights,
        )
        if not trajectory.turns:
            continue
        turns = trajectory.turns
        r_u = [t.reward.weighted_total for t in turns]
        r_g = assign_goal_reward([t.goal_id for t in turns], r_u)

        policy_loss = torch.zeros(())
        value_loss = torch.zeros(())
        entropy = torch.zeros(())
        n = len(turns)
        for i, t in enumerate(turns):
            next_vu = turns[i + 1].utter_value.detach() if i + 1 < n else torch.zeros(())
            next_vg = turns[i + 1].goal_value.detach() if i + 1 < n else torch.zeros(())
            td_u = r_u[i] + config.gamma * next_vu - t.utter_value
            td_g = r_g[i] + config.gamma * next_vg - t.goal_value
            policy_loss = policy_loss - t.utter_logprob * td_u.detach() \
                                      - t.goal_logprob * td_g.detach()
            value_loss = value_loss + td_u.pow(2) + td_g.pow(2)
            entropy = entropy + t.goal_entropy + t.utter_entropy
        loss = (policy_loss + config.value_coef * value_loss) / n \
            - config.entropy_coef * entropy / n
        loss = loss.sum()
        if not torch.isfinite(loss):
            raise AtlasError(f"non-finite policy loss at episode {episode}")
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(policy.parameters(), config.grad_clip)
        optimizer.step()

        curves.append(EpisodeLog(
            episode=episode,
            mean_reward=sum(r_u) / n,
            goal_entropy=sum(t.goal_entropy for t in turns) / n,
            utter_entropy=sum(t.utter_entropy for t in turns) / n,
            length=n,
        ))
        if episode % config.log_every == 0:
            logger.info("episode %d: reward %.3f entropy(g/u) %.3f/%.3f",
                        episode, curves[-1].mean_reward,
                        curves[-1].goal_entropy, curves[-1].utter_entropy)
    policy.eval()
    return curves


def save_policy(policy: PolicyNet, out_dir: str | Path, curves: list[EpisodeLog] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(policy.config), "state_dict": policy.state_dict()},
               out / "policy.pt")
    if curves is not None:
        import json

        (out / "curves.json").write_text(json.dumps([asdict(c) for c in curves]))
    return out


def load_policy(policy_dir: str | Path) -> PolicyNet:
    payload = torch.load(Path(policy_dir) / "policy.pt", map_location="cpu", weights_only=False)
    policy = PolicyNet(PolicyConfig(**payload["config"]))
    policy.load_state_dict(payload["state_dict"])
    policy.eval()
    return policy
