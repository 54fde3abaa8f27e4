"""Merged run configuration for every component.

One flat, JSON-serializable record drives corpus generation, the
stream, the codebook, the trainer, serving defaults, and run cadences.
Unknown keys are rejected on load so a config file can never silently
misspell a knob, and every run directory receives the exact config it
ran with.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .simulator import CorpusConfig, DriftSpec


@dataclass
class RunConfig:
    seed: int = 0

    # corpus (production scale is billions of items and K around 16k
    # single-task / 32k multi-task; these defaults keep oracles fast)
    n_items: int = 100_000
    n_users: int = 1_000
    n_groups: int = 50
    dim: int = 16
    zipf_exponent: float = 1.0
    group_noise: float = 0.15
    mix_spread: float = 0.3

    # stream; n_events counts impressions, candidates are interleaved extra
    n_events: int = 1_000_000
    candidate_ratio: float = 0.25
    candidate_stream: bool = True
    tasks: list[str] = field(default_factory=lambda: ["finish"])
    drift_at: int | None = None
    drift_fraction: float = 0.5
    drift_magnitude: float = 2.0

    # codebook
    K: int = 256
    alpha: float = 0.99
    beta: float = 0.5
    s: float = 5.0
    eta: dict[str, float] = field(default_factory=dict)
    disturbance: bool = True
    ema: bool = True
    first_delta: float = 1000.0

    # trainer
    lr: float = 0.05
    batch_size: int = 256
    loss_weights: dict[str, float] = field(
        default_factory=lambda: {"aux": 1.0, "ind": 1.0, "sim": 1.0}
    )
    logq: bool = False
    ablation_lsim: bool = False
    hidden_layer: bool = False

    # serving defaults
    probe: int = 64
    chunk: int = 8
    target_size: int = 100
    rescore: bool = False

    # run mechanics
    snapshot_cadence: int = 50_000
    eval_every: int = 0
    eval_queries: int = 32
    eval_topn: int = 100
    events_path: str | None = None
    corpus_dir: str | None = None

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("at least one task is required")
        for t in self.tasks:
            self.eta.setdefault(t, 1.0)
        for k in ("aux", "ind", "sim"):
            self.loss_weights.setdefault(k, 1.0)

    # -- derived views -----------------------------------------------------

    @property
    def multi_task(self) -> bool:
        return len(self.tasks) > 1

    def corpus_config(self) -> CorpusConfig:
        drift = None
        if self.drift_at is not None:
            drift = DriftSpec(
                at_event=self.drift_at,
                group_fraction=self.drift_fraction,
                magnitude=self.drift_magnitude,
            )
        return CorpusConfig(
            n_items=self.n_items,
            n_users=self.n_users,
            n_groups=self.n_groups,
            dim=self.dim,
            zipf_exponent=self.zipf_exponent,
            group_noise=self.group_noise,
            mix_spread=self.mix_spread,
            drift=drift,
        )

    def eta_array(self) -> list[float]:
        return [self.eta[t] for t in self.tasks]

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")
