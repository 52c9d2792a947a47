import pytest
import torch

from atlas.bm25 import ShortlistIndex
from atlas.corpus import DialogSession, SessionStore, Utterance, build_vocab
from atlas.generator import GeneratorConfig, Seq2SeqGenerator
from atlas.graph import SessionAssignment, accumulate, build_graph
from atlas.model import ModelBundle, ModelConfig, StructureModel, edges_from_phrase_graph
from atlas.phrases import build_phrase_graph, rank_and_bind
from atlas.policy import PolicyConfig, PolicyNet


def make_session(sid, texts):
    return DialogSession(sid, tuple(Utterance.from_text(t) for t in texts))


TOY_DIALOGS = [
    ["I like tea", "go to Huangshan", "want a boyfriend"],
    ["go to Huangshan", "I like tea", "want a boyfriend"],
    ["want a boyfriend", "go to Huangshan", "I like tea"],
    ["I like tea", "want a boyfriend", "go to Huangshan"],
]


@pytest.fixture(scope="session")
def toy_store():
    sessions = []
    for rep in range(3):
        for i, texts in enumerate(TOY_DIALOGS):
            sessions.append(make_session(f"s{rep}_{i}", texts))
    return SessionStore(sessions)


@pytest.fixture(scope="session")
def toy_vocab(toy_store):
    return build_vocab(toy_store, 200)


@pytest.fixture(scope="session")
def toy_phrases(toy_store):
    return rank_and_bind(toy_store, 6)


@pytest.fixture(scope="session")
def toy_bundle(toy_store, toy_vocab, toy_phrases):
    """Small untrained model bundle: recognition and decoding both work and
    are deterministic, which is all most integration tests need."""
    torch.manual_seed(11)
    pg = build_phrase_graph(toy_store, toy_phrases, min_count=1)
    config = ModelConfig(
        vocab_size=len(toy_vocab), num_goals=3, num_vertices=len(toy_phrases),
        emb_dim=24, hidden_dim=24, latent_dim=12, dropout=0.0, shortlist_k=6, max_len=12,
    )
    model = StructureModel(config, [toy_vocab.encode(p.tokens) for p in toy_phrases],
                           edges=edges_from_phrase_graph(pg))
    model.eval()
    return ModelBundle(model=model, vocab=toy_vocab, phrases=list(toy_phrases),
                       index=ShortlistIndex(toy_phrases))


@pytest.fixture(scope="session")
def toy_graph(toy_phrases):
    """Structure graph from hand-written assignments over the toy phrases."""
    assignments = [
        SessionAssignment("a", (0, 1, 2), 0),
        SessionAssignment("b", (0, 1, 3), 0),
        SessionAssignment("c", (1, 2, 0), 1),
        SessionAssignment("d", (2, 0, 1), 1),
        SessionAssignment("e", (3, 1, 0), 0),
        SessionAssignment("f", (0, 1, 2), 0),
    ]
    stats = accumulate(assignments)
    return build_graph(stats, {p.phrase_id: p.tokens for p in toy_phrases},
                       alpha_uu=0.05, alpha_su=0.05, alpha_ss=0.05)


@pytest.fixture(scope="session")
def toy_generator(toy_vocab):
    torch.manual_seed(5)
    gen = Seq2SeqGenerator(GeneratorConfig(vocab_size=len(toy_vocab), emb_dim=16,
                                           hidden_dim=16, dropout=0.0, max_len=8))
    gen.eval()
    return gen


@pytest.fixture()
def toy_policy(toy_bundle):
    torch.manual_seed(3)
    policy = PolicyNet(PolicyConfig(vocab_size=len(toy_bundle.vocab),
                                    vertex_dim=toy_bundle.model.config.emb_dim,
                                    emb_dim=16, hidden_dim=16))
    policy.eval()
    return policy


def bandit_world(seed: int):
    """One-goal / three-children bandit: the repetition factor pays exactly 1
    for the arm whose phrase matches the scripted user line, 0 otherwise."""
    from atlas.corpus import Vocab
    from atlas.generator import GeneratorConfig as GenConfig
    from atlas.generator import Seq2SeqGenerator as Gen
    from atlas.graph import StructureGraph
    from atlas.phrases import Phrase
    from atlas.relevance import ConstantScorer
    from atlas.simulators import ScriptedSimulator

    tokens = ["<pad>", "<unk>", "<bos>", "<eos>", "pick", "one", "two", "three", "please"]
    vocab = Vocab(token_to_id={t: i for i, t in enumerate(tokens)})
    phrases = [Phrase(0, ("pick", "one"), 3), Phrase(1, ("pick", "two"), 2),
               Phrase(2, ("pick", "three"), 1)]
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=len(vocab), num_goals=1, num_vertices=3,
                      emb_dim=16, hidden_dim=16, latent_dim=8, dropout=0.0,
                      shortlist_k=3, max_len=6)
    model = StructureModel(cfg, [vocab.encode(p.tokens) for p in phrases])
    model.eval()
    bundle = ModelBundle(model=model, vocab=vocab, phrases=phrases,
                         index=ShortlistIndex(phrases))
    graph = StructureGraph(
        utter_vertices={0: ("pick", "one"), 1: ("pick", "two"), 2: ("pick", "three")},
        sess_vertices={0},
        uu_edges={}, su_edges={(0, 0): 0.5, (0, 1): 0.5, (0, 2): 0.5}, ss_edges={},
        thresholds={"alpha_uu": 0.05, "alpha_su": 0.05, "alpha_ss": 0.05},
    )
    generator = Gen(GenConfig(vocab_size=len(vocab), emb_dim=12, hidden_dim=12,
                              dropout=0.0, max_len=4))
    generator.eval()
    simulator = ScriptedSimulator(["pick one please"], cycle=True)
    policy = PolicyNet(PolicyConfig(vocab_size=len(vocab), vertex_dim=cfg.emb_dim,
                                    emb_dim=12, hidden_dim=12))
    return bundle, graph, generator, simulator, ConstantScorer(0.0), policy
