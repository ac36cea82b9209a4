"""Run configuration: dimensions, thresholds, optimizer and ablation flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

INPUTS = ("r+q", "v+q", "v+r+q")
ATTENTIONS = ("mutual", "self", "msa")
RELATION_SOURCES = ("parsed-semantic", "parsed-visual", "oracle")
DETECTORS = ("learned", "simulated")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dimensions
    d_v: int = 16
    d_q: int = 32
    d: int = 32
    heads: int = 4
    d_h: int = 8
    layers: int = 2
    d_f: int = 64
    mlp_hidden: int = 32
    vocab_size: int = 4096
    positional: bool = True
    train_encoder: bool = False
    # relation parsing
    alpha: float = 0.8
    beta: float = 0.5
    min_keep: int = 3
    detector: str = "learned"
    detector_epochs: int = 30
    sigma: float = 0.1
    confusion: float = 0.0
    dropout: float = 0.0
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    epochs: int = 10
    batch: int = 64
    # ablation
    inputs: str = "v+r+q"
    attention: str = "msa"
    relation_source: str = "parsed-semantic"
    seed: int = 0
    # data split
    holdout: float = 0.2
    n_scenes: int = 200
    extra: dict = field(default_factory=dict)

    @property
    def d_r(self):
        return self.d_q

    def validate(self):
        if self.alpha < self.beta:
            raise ConfigError(f"alpha ({self.alpha}) must be >= beta ({self.beta})")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.d % self.heads:
            raise ConfigError(f"d ({self.d}) not divisible by heads ({self.heads})")
        if self.d_h != self.d // self.heads:
            raise ConfigError(f"d_h ({self.d_h}) must equal d / heads ({self.d // self.heads})")
        if self.d_q % self.heads:
            raise ConfigError(f"d_q ({self.d_q}) not divisible by heads ({self.heads})")
        for name, allowed in (("inputs", INPUTS), ("attention", ATTENTIONS),
                              ("relation_source", RELATION_SOURCES), ("detector", DETECTORS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.min_keep < 0 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("min_keep/epochs must be >= 0 and batch >= 1")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("holdout must lie in (0, 1)")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


PROFILES = {
    "desk": {},
    "paper-scale": {"d": 512, "heads": 8, "d_h": 64, "d_q": 1024, "d_v": 2048, "d_f": 1024,
                    "mlp_hidden": 512},
}


def load_config(path=None, profile="desk", **overrides):
    base = dict(PROFILES[profile])
    if path:
        with open(path, encoding="utf-8") as fh:
            base.update(json.load(fh))
    cfg = RunConfig.from_dict(base).with_overrides(**overrides)
    return cfg.validate()
