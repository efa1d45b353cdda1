"""Experiment configuration: hyperparameters, protocol grid, validation.

The config is a flat YAML mapping. Every hyperparameter has a sanctioned
range; values outside it are rejected unless explicitly allowed, so a stray
edit cannot silently change the protocol.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import yaml

ALL_REGIMES = ("source-only", "target-only", "source-ftd", "source-ftf",
               "cpc-ftd", "cpc-ftf")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    window: int = 48
    layers: int = 1
    hidden_dim: int = 64
    feat_dim: int = 32  # width of the per-timestep feature representation
    dropout: float = 0.1
    bidirectional: bool = False
    k_steps: int = 4
    n_pos_anchors: int = 8
    n_neg_per_pos: int = 8
    beta: float = 2.0
    guided: bool = True
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    loss: str = "focal"
    focal_alpha: float = 0.75
    focal_gamma: int = 2
    knn_k: int = 5
    knn_max_donors: int = 2000
    regimes: list[str] = field(default_factory=lambda: list(ALL_REGIMES))
    fractions: list[float] = field(default_factory=lambda: [1.0, 0.3, 0.05])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    n_source: int = 1883
    n_target: int = 1932
    synth_seed: int = 20130101

    def validate(self, allow_out_of_range: bool = False) -> list[str]:
        """Returns range violations; raises unless they are allowed."""
        problems = []

        def check(cond, msg):
            if not cond:
                problems.append(msg)

        check(1 <= self.window <= 48, f"window {self.window} outside [1, 48]")
        check(self.layers in (1, 2, 3), f"layers {self.layers} not in {{1,2,3}}")
        check(self.hidden_dim in (32, 64, 128), f"hidden_dim {self.hidden_dim} not in {{32,64,128}}")
        check(0.1 <= self.dropout <= 0.5, f"dropout {self.dropout} outside [0.1, 0.5]")
        check(self.k_steps == 4, f"k_steps {self.k_steps} != 4")
        check(self.n_pos_anchors in (2, 4, 8), f"n_pos_anchors {self.n_pos_anchors} not in {{2,4,8}}")
        check(self.n_neg_per_pos in (4, 8), f"n_neg_per_pos {self.n_neg_per_pos} not in {{4,8}}")
        check(1.0 <= self.beta <= 5.0, f"beta {self.beta} outside [1.0, 5.0]")
        check(1e-4 <= self.lr <= 1e-3, f"lr {self.lr} outside [1e-4, 1e-3]")
        check(1e-5 <= self.weight_decay <= 1e-4, f"weight_decay {self.weight_decay} outside [1e-5, 1e-4]")
        check(self.batch_size == 128, f"batch_size {self.batch_size} != 128")
        check(self.max_epochs == 100, f"max_epochs {self.max_epochs} != 100")
        check(self.patience in (5, 10), f"patience {self.patience} not in {{5,10}}")
        check(0.5 <= self.focal_alpha <= 1.0, f"focal_alpha {self.focal_alpha} outside [0.5, 1.0]")
        check(self.focal_gamma in (2, 3, 4), f"focal_gamma {self.focal_gamma} not in {{2,3,4}}")
        if self.loss not in ("focal", "cross-entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        for r in self.regimes:
            if r not in ALL_REGIMES:
                raise ConfigError(f"unknown regime {r!r}")
        for f_ in self.fractions:
            if not 0.0 < f_ <= 1.0:
                raise ConfigError(f"fraction {f_} outside (0, 1]")
        if problems and not allow_out_of_range:
            raise ConfigError(
                "config values outside sanctioned ranges (pass --allow-out-of-range "
                "to override): " + "; ".join(problems)
            )
        return problems

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def emit(config: ExperimentConfig) -> str:
    return yaml.safe_dump(asdict(config), sort_keys=True)


def parse(text: str) -> ExperimentConfig:
    doc = yaml.safe_load(text) or {}
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**doc)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse(fh.read())


def save(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(emit(config))
