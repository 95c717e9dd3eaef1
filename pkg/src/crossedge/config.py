"""Flat run configuration shared by the command-line tools."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import AugmentationConfig
from .evaluate import EvalConfig
from .optim import OptimizerConfig
from .train import LossConfig, TrainConfig

DATA_ROOT_ENV = "CROSSEDGE_DATA"


class ConfigKeyError(KeyError):
    """An unknown or malformed configuration key."""

    def __init__(self, key: str, message: str = "unknown configuration key"):
        super().__init__(key)
        self.key = key
        self.message = message

    def __str__(self) -> str:
        return f"{self.message}: {self.key}"


@dataclass(frozen=True)
class RunConfig:
    # data
    data_root: str | None = None
    val_fraction: float = 0.3
    split_seed: int = 0
    consensus_threshold: float = 0.2
    # networks and ensemble
    nr_size: str = "tiny"
    r_size: str = "tiny"
    r_steps: int = 5
    S: int = 3
    mu: float = 0.5
    dropout_rate: float = 0.01
    prune_prob: float = 0.5
    pool_fraction: float = 0.3
    weight_tol: float = 1e-6
    # losses
    lam: float = 1.1
    eta_final: float = 0.8
    epochs: int = 30
    weighting: str = "label"
    # optimisation
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-3
    peak_lr: float = 1e-3
    warmup_epochs: int = 4
    batch_size: int = 16
    micro_batch: int = 16
    agc_lambda: float = 0.01
    augment: bool = True
    jitter_low: float = 0.5
    jitter_high: float = 1.5
    gray_prob: float = 0.2
    # evaluation
    eval_thresholds: int = 99
    eval_max_dist: float = 0.0075
    eval_thinning: bool = False
    eval_scales: tuple[float, ...] = (1.0,)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        for k in d:
            if k not in cls.keys():
                raise ConfigKeyError(k)
        d = dict(d)
        if "eval_scales" in d:
            d["eval_scales"] = tuple(float(s) for s in d["eval_scales"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        with open(path) as fh:
            payload = json.load(fh)
        if not isinstance(payload, dict):
            raise ConfigKeyError(str(path), "configuration file must hold a JSON object")
        return cls.from_dict(payload)

    def with_overrides(self, pairs: list[str]) -> RunConfig:
        """Apply ``key=value`` strings; values are parsed as JSON when possible."""
        updates = {}
        types = {f.name: f.type for f in fields(self)}
        for item in pairs:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigKeyError(item, "override must look like key=value")
            if key not in types:
                raise ConfigKeyError(key)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if key == "eval_scales":
                value = tuple(float(v) for v in (value if isinstance(value, list) else [value]))
            updates[key] = value
        return replace(self, **updates)

    def resolved_data_root(self) -> Path | None:
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        return Path(root) if root else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_scales"] = list(self.eval_scales)
        return d

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            nr_size=self.nr_size, r_size=self.r_size, r_steps=self.r_steps, S=self.S, mu=self.mu,
            dropout_rate=self.dropout_rate, prune_prob=self.prune_prob, pool_fraction=self.pool_fraction,
            seed=self.seed, consensus_threshold=self.consensus_threshold, augment=self.augment,
            augmentation=AugmentationConfig(self.jitter_low, self.jitter_high, self.gray_prob),
            micro_batch=self.micro_batch, weight_tol=self.weight_tol,
            loss=LossConfig(lam=self.lam, eta_final=self.eta_final, epochs=self.epochs, weighting=self.weighting),
            optim=OptimizerConfig(momentum=self.momentum, weight_decay=self.weight_decay, peak_lr=self.peak_lr,
                                  warmup_epochs=self.warmup_epochs, batch_size=self.batch_size,
                                  agc_lambda=self.agc_lambda))

    def eval_config(self) -> EvalConfig:
        return EvalConfig(thresholds=self.eval_thresholds, max_dist=self.eval_max_dist,
                          apply_thinning=self.eval_thinning)


# short CPU runs on the synthetic corpus
TOY_PRESET = {"epochs": 20, "peak_lr": 0.1, "agc_lambda": 0.1, "batch_size": 4, "micro_batch": 4}
