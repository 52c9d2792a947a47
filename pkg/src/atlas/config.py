"""Pipeline configuration shared across stages, with content hashing for
resume checks."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError


def data_dir_default() -> str:
    return os.environ.get("ATLAS_DATA_DIR", ".")


def seed_override(seed: int) -> int:
    env = os.environ.get("ATLAS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"ATLAS_SEED must be an integer, got {env!r}") from e
    return seed


@dataclass
class PipelineConfig:
    input_path: str
    corpus_format: str = "jsonl"
    out_root: str = field(default_factory=data_dir_default)
    vocab_size: int = 50000
    top_n_phrases: int = 1000
    min_edge_count: int = 3
    num_goals: int = 16
    emb_dim: int = 200
    hidden_dim: int = 512
    latent_dim: int = 200
    dropout: float = 0.3
    shortlist_k: int = 50
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-3
    tau_start: float = 1.0
    tau_end: float = 0.1
    alpha_uu: float = 0.05
    alpha_su: float = 0.05
    alpha_ss: float = 0.05
    gen_epochs: int = 5
    episodes: int = 500
    gamma: float = 0.95
    reward_weights: tuple[float, float, float] = (60.0, 0.5, -0.5)
    simulator: str = "retrieval"
    seed: int = 0

    def __post_init__(self):
        self.seed = seed_override(self.seed)
        self.reward_weights = tuple(self.reward_weights)  # type: ignore[assignment]

    def content_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        data = asdict(self)
        data["config_hash"] = self.content_hash()
        Path(path).write_text(json.dumps(data, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        data.pop("config_hash", None)
        return cls(**data)

    def check_matches(self, path: str | Path) -> bool:
        """True when the config recorded at `path` hashes identically."""
        stored = json.loads(Path(path).read_text())
        return stored.get("config_hash") == self.content_hash()
