"""Command line pipeline: ingest -> phrases -> train-dvae -> build-graph ->
pretrain-gen -> train-policy, plus eval, chat, serve, and graph-stats."""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import asdict
from pathlib import Path

import click

from .bm25 import ShortlistIndex
from .config import PipelineConfig, data_dir_default, seed_override
from .corpus import SessionStore, build_vocab, ingest_corpus
from .errors import AtlasError, ConfigError, UnmappableContext
from .generator import (GenTrainConfig, GeneratorConfig, Seq2SeqGenerator,
                        load_generator, pretrain_generator, save_generator)
from .graph import StructureGraph, accumulate, build_graph, map_corpus, save_assignments
from .metrics import reconstruction_eval
from .model import (ModelConfig, StructureModel, checkpoint_hash,
                    edges_from_phrase_graph, load_checkpoint, save_checkpoint)
from .phrases import (build_phrase_graph, load_phrase_graph, load_phrases,
                      rank_and_bind, save_phrase_graph, save_phrases)
from .policy import (A2CConfig, DialogAgent, PolicyConfig, PolicyNet, a2c_train,
                     load_policy, save_policy)
from .relevance import DualEncoderConfig, DualEncoderScorer, LexicalOverlapScorer, \
    train_relevance_scorer
from .simulators import RetrievalSimulator, ScriptedSimulator
from .training import TrainConfig, train_model

EXIT_CONFIG = 2
EXIT_STAGE = 3


def stage_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(EXIT_CONFIG)
        except AtlasError as e:
            click.echo(f"stage failure: {e}", err=True)
            sys.exit(EXIT_STAGE)

    return wrapper


@click.group()
def main():
    """Dialog structure atlas."""


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--format", "corpus_format", default="jsonl", type=click.Choice(["jsonl", "tsv"]))
@click.option("--out", "out_dir", default=None, type=click.Path())
@stage_errors
def ingest(input_path, corpus_format, out_dir):
    """Read a raw corpus into a session store."""
    out_dir = out_dir or str(Path(data_dir_default()) / "store")
    store = ingest_corpus(input_path, corpus_format)
    store.save(out_dir)
    click.echo(f"ingested {len(store)} sessions ({store.dropped} dropped) -> {out_dir}")


def _load_parser_adapter(spec: str):
    """'fallback' -> built-in flat-tree parser; 'module:callable' loads an
    external dependency-parser adapter."""
    if spec == "fallback":
        return None
    if ":" not in spec:
        raise ConfigError(f"--parser expects 'fallback' or 'module:callable', got {spec!r}")
    module_name, attr = spec.split(":", 1)
    try:
        import importlib

        adapter = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load parser adapter {spec!r}: {e}")
    if not callable(adapter):
        raise ConfigError(f"parser adapter {spec!r} is not callable")
    return adapter


@main.command("phrases")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--top-n", default=1000, type=int)
@click.option("--min-edge-count", default=3, type=int)
@click.option("--parser", default="fallback",
              help="'fallback' or a 'module:callable' adapter returning parse trees")
@click.option("--out", "out_dir", default=None, type=click.Path())
@stage_errors
def phrases_cmd(store_dir, top_n, min_edge_count, parser, out_dir):
    """Mine and bind verb phrases; build the initial phrase graph."""
    out_dir = Path(out_dir or data_dir_default())
    out_dir.mkdir(parents=True, exist_ok=True)
    adapter = _load_parser_adapter(parser)
    store = SessionStore.load(store_dir)
    phrases = rank_and_bind(store, top_n, adapter=adapter)
    graph = build_phrase_graph(store, phrases, min_count=min_edge_count, adapter=adapter)
    save_phrases(phrases, out_dir / "phrases.jsonl")
    save_phrase_graph(graph, out_dir / "phrase_graph.jsonl")
    click.echo(f"bound {len(phrases)} phrases, {len(graph.edges)} initial edges -> {out_dir}")


@main.command("train-dvae")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--phrases", "phrases_path", required=True, type=click.Path(exists=True))
@click.option("--phrase-graph", "pg_path", required=True, type=click.Path(exists=True))
@click.option("--num-goals", default=16, type=int)
@click.option("--vocab-size", default=50000, type=int)
@click.option("--emb-dim", default=200, type=int)
@click.option("--hidden-dim", default=512, type=int)
@click.option("--latent-dim", default=200, type=int)
@click.option("--dropout", default=0.3, type=float)
@click.option("--shortlist-k", default=50, type=int)
@click.option("--epochs", default=10, type=int)
@click.option("--batch-size", default=32, type=int)
@click.option("--lr", default=2e-3, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--rebuild-edges-per-epoch", is_flag=True, default=False,
              help="re-derive propagation edges from argmax assignments each epoch")
@click.option("--out", "out_dir", required=True, type=click.Path())
@stage_errors
def train_dvae(store_dir, phrases_path, pg_path, num_goals, vocab_size, emb_dim,
               hidden_dim, latent_dim, dropout, shortlist_k, epochs, batch_size,
               lr, seed, rebuild_edges_per_epoch, out_dir):
    """Train the structure model on the variational bound."""
    seed = seed_override(seed)
    store = SessionStore.load(store_dir)
    phrases = load_phrases(phrases_path)
    pgraph = load_phrase_graph(pg_path)
    vocab = build_vocab(store, vocab_size)
    config = ModelConfig(
        vocab_size=len(vocab), num_goals=num_goals, num_vertices=len(phrases),
        emb_dim=emb_dim, hidden_dim=hidden_dim, latent_dim=latent_dim,
        dropout=dropout, shortlist_k=shortlist_k,
    )
    import torch

    torch.manual_seed(seed)
    model = StructureModel(config, [vocab.encode(p.tokens) for p in phrases],
                           edges=edges_from_phrase_graph(pgraph))
    index = ShortlistIndex(phrases)
    metrics = train_model(model, store, vocab, index,
                          TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr,
                                      seed=seed,
                                      rebuild_edges_per_epoch=rebuild_edges_per_epoch),
                          out_dir=out_dir, phrases=phrases)
    save_checkpoint(out_dir, model, vocab, phrases,
                    extra={"metrics": [m.as_dict() for m in metrics]})
    click.echo(f"trained {epochs} epochs, final nll/utt "
               f"{metrics[-1].nll_per_utterance:.4f} -> {out_dir}")


@main.command("build-graph")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--alpha-uu", default=0.05, type=float)
@click.option("--alpha-su", default=0.05, type=float)
@click.option("--alpha-ss", default=0.05, type=float)
@click.option("--out", "out_path", required=True, type=click.Path())
@stage_errors
def build_graph_cmd(ckpt_dir, store_dir, alpha_uu, alpha_su, alpha_ss, out_path):
    """Map the corpus and emit the thresholded structure graph."""
    bundle = load_checkpoint(ckpt_dir)
    store = SessionStore.load(store_dir)
    assignments = map_corpus(bundle, store)
    save_assignments(assignments, Path(out_path).with_suffix(".assignments.jsonl"))
    stats = accumulate(assignments)
    graph = build_graph(
        stats, {p.phrase_id: p.tokens for p in bundle.phrases},
        alpha_uu=alpha_uu, alpha_su=alpha_su, alpha_ss=alpha_ss,
        meta={"source_checkpoint": checkpoint_hash(ckpt_dir)},
    )
    graph.save(out_path)
    click.echo(json.dumps(graph.stats_summary()))


@main.command("graph-stats")
@click.argument("graph_path", type=click.Path(exists=True))
@stage_errors
def graph_stats(graph_path):
    """Print vertex and edge counts of a structure graph."""
    graph = StructureGraph.load(graph_path)
    click.echo(json.dumps(graph.stats_summary(), indent=2))


@main.command("pretrain-gen")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True),
              help="structure checkpoint supplying vocab and phrases")
@click.option("--epochs", default=5, type=int)
@click.option("--emb-dim", default=200, type=int)
@click.option("--hidden-dim", default=512, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@stage_errors
def pretrain_gen(store_dir, ckpt_dir, epochs, emb_dim, hidden_dim, seed, out_dir):
    """Pre-train the response generator on (context + reply phrase) pairs."""
    seed = seed_override(seed)
    store = SessionStore.load(store_dir)
    bundle = load_checkpoint(ckpt_dir)
    gen = Seq2SeqGenerator(GeneratorConfig(vocab_size=len(bundle.vocab),
                                           emb_dim=emb_dim, hidden_dim=hidden_dim))
    nlls = pretrain_generator(gen, store, bundle.vocab, bundle.phrases,
                              GenTrainConfig(epochs=epochs, seed=seed))
    save_generator(gen, out_dir)
    (Path(out_dir) / "pretrain_nll.json").write_text(json.dumps(nlls))
    click.echo(f"generator nll/pair per epoch: {['%.3f' % x for x in nlls]} -> {out_dir}")


def _make_simulator(spec: str, store: SessionStore | None):
    if spec == "retrieval":
        if store is None:
            raise ConfigError("retrieval simulator needs --store")
        return RetrievalSimulator(store)
    if spec.startswith("scripted:"):
        return ScriptedSimulator.from_file(spec.split(":", 1)[1], cycle=True)
    raise ConfigError(f"unknown simulator {spec!r}")


@main.command("train-policy")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--gen", "gen_dir", required=True, type=click.Path(exists=True))
@click.option("--store", "store_dir", default=None, type=click.Path(exists=True))
@click.option("--simulator", default="retrieval")
@click.option("--relevance", default="dual", type=click.Choice(["dual", "overlap"]))
@click.option("--episodes", default=500, type=int)
@click.option("--gamma", default=0.95, type=float)
@click.option("--reward-weights", default="60,0.5,-0.5")
@click.option("--lr", default=5e-3, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@stage_errors
def train_policy(graph_path, ckpt_dir, gen_dir, store_dir, simulator, relevance,
                 episodes, gamma, reward_weights, lr, seed, out_dir):
    """A2C training of the two sub-policies against a user simulator."""
    seed = seed_override(seed)
    try:
        weights = tuple(float(x) for x in reward_weights.split(","))
        if len(weights) != 3:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--reward-weights must be three comma numbers, got {reward_weights!r}")
    bundle = load_checkpoint(ckpt_dir)
    graph = StructureGraph.load(graph_path)
    generator = load_generator(gen_dir)
    store = SessionStore.load(store_dir) if store_dir else None
    sim = _make_simulator(simulator, store)

    if relevance == "dual":
        if store is None:
            raise ConfigError("--relevance dual needs --store")
        scorer = DualEncoderScorer(DualEncoderConfig(vocab_size=len(bundle.vocab)))
        train_relevance_scorer(scorer, store, bundle.vocab, seed=seed)
        scorer.bind_vocab(bundle.vocab)
    else:
        scorer = LexicalOverlapScorer()

    policy = PolicyNet(PolicyConfig(vocab_size=len(bundle.vocab),
                                    vertex_dim=bundle.model.config.emb_dim))
    curves = a2c_train(policy, sim, bundle, graph, generator, scorer,
                       A2CConfig(episodes=episodes, gamma=gamma, lr=lr, seed=seed,
                                 reward_weights=weights))
    save_policy(policy, out_dir, curves)
    if relevance == "dual":
        import torch

        torch.save({"config": asdict(scorer.config), "state_dict": scorer.state_dict()},
                   Path(out_dir) / "relevance.pt")
    mean_tail = sum(c.mean_reward for c in curves[-50:]) / max(1, len(curves[-50:]))
    click.echo(f"trained {len(curves)} episodes, tail mean reward {mean_tail:.3f} -> {out_dir}")


def _load_scorer(policy_dir: str | None, vocab):
    if policy_dir:
        rel_path = Path(policy_dir) / "relevance.pt"
        if rel_path.exists():
            import torch

            payload = torch.load(rel_path, map_location="cpu", weights_only=False)
            scorer = DualEncoderScorer(DualEncoderConfig(**payload["config"]))
            scorer.load_state_dict(payload["state_dict"])
            scorer.eval()
            return scorer.bind_vocab(vocab)
    return LexicalOverlapScorer()


def _load_agent(ckpt_dir, graph_path, gen_dir, policy_dir):
    bundle = load_checkpoint(ckpt_dir)
    graph = StructureGraph.load(graph_path)
    generator = load_generator(gen_dir)
    policy = load_policy(policy_dir) if policy_dir else PolicyNet(
        PolicyConfig(vocab_size=len(bundle.vocab), vertex_dim=bundle.model.config.emb_dim)
    )
    scorer = _load_scorer(policy_dir, bundle.vocab)
    return DialogAgent(policy, bundle, graph, generator, scorer, mode="argmax")


@main.command("eval")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--report", "report_path", default=None, type=click.Path())
@stage_errors
def eval_cmd(ckpt_dir, store_dir, report_path):
    """Reconstruction NLL / BLEU / distinct metrics on a test store."""
    bundle = load_checkpoint(ckpt_dir)
    store = SessionStore.load(store_dir)
    report = reconstruction_eval(bundle, store)
    payload = json.dumps(report.as_dict(), indent=2)
    if report_path:
        Path(report_path).write_text(payload)
    click.echo(payload)


@main.command("chat")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--gen", "gen_dir", required=True, type=click.Path(exists=True))
@click.option("--policy", "policy_dir", default=None, type=click.Path(exists=True))
@click.option("--script", "script_path", default=None, type=click.Path(exists=True),
              help="read user turns from a file instead of stdin")
@stage_errors
def chat(ckpt_dir, graph_path, gen_dir, policy_dir, script_path):
    """Interactive terminal chat with per-turn decision traces."""
    agent = _load_agent(ckpt_dir, graph_path, gen_dir, policy_dir)
    if script_path:
        lines = iter(Path(script_path).read_text(encoding="utf-8").splitlines())
        read = lambda: next(lines, None)
    else:
        read = lambda: click.prompt("you", default="", show_default=False) or None
    click.echo("atlas chat (8 turns max, /goal shows the current goal, empty line quits)")
    while agent.turn < agent.max_turns:
        line = read()
        if line is None or not line.strip():
            break
        if line.strip() == "/goal":
            click.echo(f"goal: {agent.current_goal}")
            continue
        try:
            record = agent.step(line)
        except UnmappableContext:
            click.echo("bot: sorry, I did not follow that - could you rephrase?")
            continue
        click.echo(f"[goal {record.goal_id} | vertex {record.vertex_id} "
                   f"'{' '.join(record.vertex_phrase)}']")
        click.echo(f"bot: {' '.join(record.response)}")
    click.echo(f"session over after {agent.turn} turns "
               f"(goals visited: {list(dict.fromkeys(agent.state().goal_history))})")


@main.command("serve")
@click.option("--port", default=8000, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--ckpt", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--gen", "gen_dir", required=True, type=click.Path(exists=True))
@click.option("--policy", "policy_dir", default=None, type=click.Path(exists=True))
@click.option("--static", "static_dir", default=None, type=click.Path())
@stage_errors
def serve(port, host, ckpt_dir, graph_path, gen_dir, policy_dir, static_dir):
    """Serve the chat / graph HTTP API (and the console bundle if present)."""
    from .service import ServiceArtifacts, create_app

    bundle = load_checkpoint(ckpt_dir)
    graph = StructureGraph.load(graph_path)
    generator = load_generator(gen_dir)
    policy = load_policy(policy_dir) if policy_dir else PolicyNet(
        PolicyConfig(vocab_size=len(bundle.vocab), vertex_dim=bundle.model.config.emb_dim)
    )
    scorer = _load_scorer(policy_dir, bundle.vocab)
    app = create_app(ServiceArtifacts(bundle=bundle, graph=graph, generator=generator,
                                      policy=policy, scorer=scorer), static_dir=static_dir)
    import uvicorn

    uvicorn.run(app, host=host, port=port)


@main.command("pipeline")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_root", default=None, type=click.Path())
@click.option("--num-goals", default=16, type=int)
@click.option("--top-n", default=1000, type=int)
@click.option("--epochs", default=10, type=int)
@click.option("--gen-epochs", default=5, type=int)
@click.option("--episodes", default=200, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--force", is_flag=True, default=False)
@click.pass_context
@stage_errors
def pipeline(ctx, input_path, out_root, num_goals, top_n, epochs, gen_epochs,
             episodes, seed, force):
    """Run every stage in order; completed stages resume on config-hash match."""
    out_root = Path(out_root or data_dir_default())
    out_root.mkdir(parents=True, exist_ok=True)
    config = PipelineConfig(input_path=str(input_path), out_root=str(out_root),
                            num_goals=num_goals, top_n_phrases=top_n, epochs=epochs,
                            gen_epochs=gen_epochs, episodes=episodes, seed=seed)
    marker = out_root / "pipeline_config.json"
    if marker.exists() and not force:
        if not config.check_matches(marker):
            raise ConfigError(
                "pipeline config differs from the one recorded in "
                f"{marker}; rerun with --force or a fresh --out"
            )
    config.save(marker)

    def stage(name: str, done: Path, runner):
        if done.exists() and not force:
            click.echo(f"[{name}] up to date, skipping")
            return
        click.echo(f"[{name}] running")
        runner()

    store_dir = out_root / "store"
    stage("ingest", store_dir / "sessions.jsonl",
          lambda: ctx.invoke(ingest, input_path=input_path, corpus_format="jsonl",
                             out_dir=str(store_dir)))
    stage("phrases", out_root / "phrases.jsonl",
          lambda: ctx.invoke(phrases_cmd, store_dir=str(store_dir), top_n=top_n,
                             min_edge_count=3, parser="fallback", out_dir=str(out_root)))
    ckpt_dir = out_root / "ckpt"
    stage("train-dvae", ckpt_dir / "model.pt",
          lambda: ctx.invoke(train_dvae, store_dir=str(store_dir),
                             phrases_path=str(out_root / "phrases.jsonl"),
                             pg_path=str(out_root / "phrase_graph.jsonl"),
                             num_goals=num_goals, vocab_size=config.vocab_size,
                             emb_dim=64, hidden_dim=64, latent_dim=64, dropout=0.1,
                             shortlist_k=config.shortlist_k, epochs=epochs,
                             batch_size=config.batch_size, lr=config.lr, seed=seed,
                             rebuild_edges_per_epoch=False, out_dir=str(ckpt_dir)))
    graph_path = out_root / "graph.atlas"
    stage("build-graph", graph_path,
          lambda: ctx.invoke(build_graph_cmd, ckpt_dir=str(ckpt_dir),
                             store_dir=str(store_dir), alpha_uu=config.alpha_uu,
                             alpha_su=config.alpha_su, alpha_ss=config.alpha_ss,
                             out_path=str(graph_path)))
    gen_dir = out_root / "gen"
    stage("pretrain-gen", gen_dir / "generator.pt",
          lambda: ctx.invoke(pretrain_gen, store_dir=str(store_dir),
                             ckpt_dir=str(ckpt_dir), epochs=gen_epochs,
                             emb_dim=64, hidden_dim=64, seed=seed, out_dir=str(gen_dir)))
    policy_dir = out_root / "policy"
    stage("train-policy", policy_dir / "policy.pt",
          lambda: ctx.invoke(train_policy, graph_path=str(graph_path),
                             ckpt_dir=str(ckpt_dir), gen_dir=str(gen_dir),
                             store_dir=str(store_dir), simulator="retrieval",
                             relevance="overlap", episodes=episodes,
                             gamma=config.gamma, reward_weights="60,0.5,-0.5",
                             lr=5e-3, seed=seed, out_dir=str(policy_dir)))
    click.echo("pipeline complete")


if __name__ == "__main__":
    main()
