"""Collaborative training of a recurrent and a non-recurrent edge detector.

Every epoch both back-propagation networks are fitted to targets softened by
the previous epoch's ensemble; afterwards each momentum network absorbs its
back-propagation twin, ``S`` parameter samples are drawn from it and their
pixel-wise mixing weights are solved on the validation split. The result of a
run is the non-recurrent samples collapsed into a single parameter vector.

All randomness flows from ``TrainConfig.seed`` through independent streams
keyed by (epoch, purpose), so a run resumed from any checkpoint replays the
uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import AugmentationConfig, DatasetSplit, augment, consensus_binarize, to_tensor_batch
from .ensemble import (EnsembleWeights, MomentumState, SampleSet, collapse_params, combine, confidence_fuse,
                       draw_samples, init_momentum, momentum_update, solve_weights)
from .losses import NumericError, alpha_beta, eta_schedule, label_weight_map, soft_target, total_losses
from .nets import ConfigError, NetConfig, forward, init_params, net_config
from .optim import OptimizerConfig, agc_clip, lr_at, make_sgd
from .params import ParameterVector, save_parameters

log = logging.getLogger(__name__)

# purposes for the per-epoch random streams
_AUG, _SAMPLE_R, _SAMPLE_NR, _INIT = 1, 2, 3, 4


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.1
    eta_final: float = 0.8
    epochs: int = 30
    # "label": edge pixels (by hard label) are weighted by the non-edge share beta and
    # non-edge pixels by alpha, each with a plain BCE against the soft target;
    # "balanced": the same swap applied to the two terms of the soft-target loss;
    # "literal": alpha multiplies the edge term
    weighting: str = "label"

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if not 0.0 <= self.eta_final <= 1.0:
            raise ConfigError("eta_final must lie in [0, 1]")
        if self.epochs < 1:
            raise ConfigError("need at least one epoch")
        if self.weighting not in ("label", "balanced", "literal"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the data itself.

    The variant switches reproduce the ablation family: ``use_recurrent``
    (cross-architecture fusion), ``mu`` (1.0 keeps only the latest epoch),
    ``sampling`` ("dropout", "pruning" or "none") and ``soft_targets``.
    """

    nr_size: str = "tiny"
    r_size: str = "tiny"
    r_steps: int = 5
    S: int = 3
    mu: float = 0.5
    dropout_rate: float = 0.01
    prune_prob: float = 0.5
    pool_fraction: float = 0.3
    seed: int = 0
    consensus_threshold: float = 0.2
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    micro_batch: int = 16
    weight_tol: float = 1e-6
    use_recurrent: bool = True
    sampling: str = "dropout"
    soft_targets: bool = True
    fuse_confidence: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError("S must be >= 1")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("mu must lie in [0, 1]")
        if self.sampling not in ("dropout", "pruning", "none"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.micro_batch < 1:
            raise ConfigError("micro_batch must be >= 1")
        if self.optim.warmup_epochs >= self.loss.epochs and self.loss.epochs > 1:
            raise ConfigError("warmup must end before the last epoch")

    @property
    def epochs(self) -> int:
        return self.loss.epochs

    @property
    def n_samples(self) -> int:
        return 1 if self.sampling == "none" else self.S

    def net_configs(self) -> dict[str, NetConfig]:
        cfgs = {"nr": net_config("nonrecurrent", self.nr_size, dropout_rate=self.dropout_rate)}
        if self.use_recurrent:
            cfgs["r"] = net_config("recurrent", self.r_size, steps=self.r_steps, dropout_rate=self.dropout_rate)
        return cfgs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["augmentation"] = AugmentationConfig(**d.get("augmentation", {}))
        d["loss"] = LossConfig(**d.get("loss", {}))
        d["optim"] = OptimizerConfig(**d.get("optim", {}))
        return cls(**d)


def toy_config(seed: int = 0, epochs: int = 20, **overrides) -> TrainConfig:
    """Settings for short single-CPU runs on small synthetic corpora.

    With a few hundred images the default batch of 16 gives too few steps per
    epoch, so batches are 4 images with a larger peak rate and a looser
    clipping ratio. ``overrides`` replace top-level ``TrainConfig`` fields.
    """
    base = TrainConfig(seed=seed, micro_batch=4, loss=LossConfig(epochs=epochs),
                       optim=OptimizerConfig(peak_lr=0.1, agc_lambda=0.1, batch_size=4,
                                             warmup_epochs=min(4, max(epochs - 1, 0))))
    return replace(base, **overrides)


def efficient_config(cfg: TrainConfig) -> TrainConfig:
    """The single-network variant: pruning samples, no recurrent partner, no confidence fusion."""
    return replace(cfg, use_recurrent=False, sampling="pruning", fuse_confidence=False)


# -- state -----------------------------------------------------------------------


@dataclass
class NetState:
    cfg: NetConfig
    theta: ParameterVector
    optimizer: torch.optim.SGD
    momentum: MomentumState | None = None
    samples: SampleSet | None = None
    weights: EnsembleWeights | None = None


@dataclass
class TrainState:
    epoch: int  # number of completed epochs
    nets: dict[str, NetState]
    history: list[dict] = field(default_factory=list)


@dataclass
class TrainResult:
    theta: ParameterVector
    cfg: NetConfig
    state: TrainState
    run_dir: Path | None = None

    @property
    def history(self) -> list[dict]:
        return self.state.history


def _rng(seed: int, epoch: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, purpose]))


def _init_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, 0, _INIT, tag]).generate_state(1)[0])


def init_state(cfg: TrainConfig) -> TrainState:
    nets = {}
    for tag, (name, ncfg) in enumerate(sorted(cfg.net_configs().items())):
        theta = init_params(ncfg, _init_seed(cfg.seed, tag)).requires_grad_()
        nets[name] = NetState(ncfg, theta, make_sgd(theta, cfg.optim))
    return TrainState(0, nets)


# -- pieces of an epoch -------------------------------------------------------


def loss_weights(y: torch.Tensor, y_soft: torch.Tensor, loss_cfg: LossConfig):
    """Per-image (edge-term, non-edge-term) coefficients."""
    alpha, beta = alpha_beta(y[:, 0], y_soft[:, 0], loss_cfg.lam)
    if loss_cfg.weighting == "literal":
        return alpha, beta
    return beta, alpha


def batch_loss(res, y: torch.Tensor, y_soft: torch.Tensor, loss_cfg: LossConfig) -> torch.Tensor:
    """Per-image training loss under the configured weighting."""
    w_pos, w_neg = loss_weights(y, y_soft, loss_cfg)
    if loss_cfg.weighting == "label":
        return total_losses(res, y_soft, weight_map=label_weight_map(y, w_pos, w_neg))
    return total_losses(res, y_soft, w_pos, w_neg)


def fused_predictions(x: torch.Tensor, theta: ParameterVector, cfg: NetConfig, chunk: int = 32) -> torch.Tensor:
    """Sigmoid fused output ``(N, 1, H, W)`` computed without gradients in chunks."""
    with torch.no_grad():
        return torch.cat([forward(x[i:i + chunk], theta, cfg, mode="eval").fused for i in range(0, len(x), chunk)])


def ensemble_map(x: torch.Tensor, ns: NetState) -> torch.Tensor:
    preds = torch.stack([fused_predictions(x, th, ns.cfg) for th in ns.samples.samples])
    return combine(preds, torch.as_tensor(ns.weights.W, dtype=preds.dtype))


def teacher_map(x: torch.Tensor, state: TrainState, cfg: TrainConfig) -> torch.Tensor:
    """The ensemble prediction ``M`` used to soften the training targets."""
    m_nr = ensemble_map(x, state.nets["nr"])
    if "r" not in state.nets:
        return m_nr
    m_r = ensemble_map(x, state.nets["r"])
    if cfg.fuse_confidence:
        return confidence_fuse(m_r, m_nr)
    return 0.5 * (m_r + m_nr)


def accumulate_step(ns: NetState, x: torch.Tensor, y: torch.Tensor, y_soft: torch.Tensor, cfg: TrainConfig,
                    lr: float) -> float:
    """One optimizer step on a batch, with gradients accumulated over micro-batches.

    Per-image losses are averaged over the whole batch. Returns that average.
    """
    n = len(x)
    grads = {k: torch.zeros_like(v) for k, v in ns.theta.items()}
    total = 0.0
    for i in range(0, n, cfg.micro_batch):
        sl = slice(i, i + cfg.micro_batch)
        res = forward(x[sl], ns.theta, ns.cfg, mode="train")
        per_image = batch_loss(res, y[sl], y_soft[sl], cfg.loss)
        loss = per_image.sum() / n
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {loss.item()}")
        g = torch.autograd.grad(loss, list(ns.theta.values()))
        for k, gk in zip(ns.theta.keys(), g):
            grads[k] += gk
        total += loss.item()
    clipped = agc_clip(grads, ns.theta, cfg.optim.agc_lambda)
    for k, v in ns.theta.items():
        v.grad = clipped[k]
    for group in ns.optimizer.param_groups:
        group["lr"] = lr
    ns.optimizer.step()
    return total


def refresh_ensemble(ns: NetState, j: int, cfg: TrainConfig, x_val: torch.Tensor, y_val: torch.Tensor, purpose: int):
    """Momentum update (copy at epoch 0), fresh samples, and their validation-optimal weights."""
    if ns.momentum is None or j == 0:
        ns.momentum = init_momentum(ns.theta, cfg.mu)
    else:
        ns.momentum = momentum_update(ns.theta, ns.momentum)
    seed = int(_rng(cfg.seed, j, purpose).integers(2**63 - 1))
    rate = cfg.prune_prob if cfg.sampling == "pruning" else cfg.dropout_rate
    ns.samples = draw_samples(ns.momentum.theta_m, cfg.n_samples, cfg.sampling, rate, seed, cfg.pool_fraction)
    ns.weights = solve_weights(ns.samples, lambda x, th: fused_predictions(x, th, ns.cfg), x_val, y_val,
                               refine_tol=cfg.weight_tol)


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path: Path, state: TrainState, cfg: TrainConfig) -> None:
    nets = {}
    for name, ns in state.nets.items():
        nets[name] = {
            "theta": {k: v.detach().clone() for k, v in ns.theta.items()},
            "optimizer": ns.optimizer.state_dict(),
            "theta_m": dict(ns.momentum.theta_m.entries),
            "momentum_epoch": ns.momentum.epoch,
            "samples": [dict(s.entries) for s in ns.samples.samples],
            "sample_seeds": ns.samples.seeds,
            "provenance": ns.samples.provenance,
            "W": torch.from_numpy(ns.weights.W),
            "weights_info": json.dumps(ns.weights.info),
            "weights_converged": ns.weights.converged,
        }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({"epoch": state.epoch, "config": cfg.to_dict(), "nets": nets, "history": state.history}, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[TrainState, TrainConfig]:
    blob = torch.load(path, weights_only=False)
    cfg = TrainConfig.from_dict(blob["config"])
    state = init_state(cfg)
    for name, ns in state.nets.items():
        saved = blob["nets"][name]
        with torch.no_grad():
            for k, v in ns.theta.items():
                v.copy_(saved["theta"][k])
        ns.optimizer.load_state_dict(saved["optimizer"])
        ns.momentum = MomentumState(ParameterVector(saved["theta_m"]), cfg.mu, saved["momentum_epoch"])
        ns.samples = SampleSet([ParameterVector(s) for s in saved["samples"]], saved["provenance"],
                               list(saved["sample_seeds"]))
        ns.weights = EnsembleWeights(saved["W"].numpy(), saved["weights_converged"],
                                     info=json.loads(saved["weights_info"]))
    state.epoch = blob["epoch"]
    state.history = list(blob["history"])
    return state, cfg


# -- the loop ---------------------------------------------------------------------------


def _prepare(split: DatasetSplit, cfg: TrainConfig):
    def hard(samples):
        return torch.from_numpy(np.stack([consensus_binarize(s.consensus, cfg.consensus_threshold).values
                                          for s in samples]).astype(np.float32))[:, None]

    return to_tensor_batch(split.train), hard(split.train), to_tensor_batch(split.validation), hard(split.validation)


def train_collaborative(split: DatasetSplit, cfg: TrainConfig = TrainConfig(), run_dir: str | Path | None = None,
                        resume: str | Path | None = None, stop_after: int | None = None) -> TrainResult:
    """Collaborative learning loop; the variant switches in ``cfg`` select the ablation.

    ``run_dir`` receives a checkpoint after every epoch, ``train_log.json`` and
    ``final_params.npz``. ``stop_after`` ends the run early after that many
    completed epochs (used to exercise resumption).
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if resume is not None:
        state, saved_cfg = load_checkpoint(resume)
        if saved_cfg != cfg:
            raise ConfigError("checkpoint was written with a different configuration")
    else:
        state = init_state(cfg)
    x_tr, y_tr, x_val, y_val = _prepare(split, cfg)
    J, bs = cfg.epochs, cfg.optim.batch_size
    n = len(x_tr)
    steps = int(np.ceil(n / bs))
    samples_by_index = list(split.train)

    while state.epoch < J:
        j = state.epoch
        t0 = time.perf_counter()
        eta = eta_schedule(j, cfg.loss.eta_final, J) if cfg.soft_targets else 0.0
        if j > 0 and cfg.soft_targets:
            y_soft_all = soft_target(teacher_map(x_tr, state, cfg).float(), y_tr, eta)
        else:
            y_soft_all = y_tr
        rng = _rng(cfg.seed, j, _AUG)
        order = rng.permutation(n)
        losses = {name: 0.0 for name in state.nets}
        for b in range(steps):
            idx = order[b * bs:(b + 1) * bs]
            if cfg.augment:
                x = to_tensor_batch([augment(samples_by_index[i], cfg.augmentation, rng) for i in idx])
            else:
                x = x_tr[idx]
            lr = lr_at(j + b / steps, cfg.optim, J)
            for name, ns in state.nets.items():
                try:
                    losses[name] += accumulate_step(ns, x, y_tr[idx], y_soft_all[idx], cfg, lr) / steps
                except NumericError as err:
                    dump = {"seed": cfg.seed, "epoch": j, "batch": b, "net": name, "error": str(err)}
                    if run_dir is not None:
                        run_dir.mkdir(parents=True, exist_ok=True)
                        (run_dir / "divergence.json").write_text(json.dumps(dump, indent=2))
                    raise NumericError(f"training diverged: {dump}") from err
        purposes = {"r": _SAMPLE_R, "nr": _SAMPLE_NR}
        for name, ns in state.nets.items():
            refresh_ensemble(ns, j, cfg, x_val, y_val, purposes[name])
        state.epoch = j + 1
        record = {"epoch": j, "eta": eta, "lr_end": lr_at(j + 1, cfg.optim, J),
                  "loss": losses, "val_bce": {k: ns.weights.info.get("bce") for k, ns in state.nets.items()},
                  "weights_converged": {k: ns.weights.converged for k, ns in state.nets.items()},
                  "seconds": time.perf_counter() - t0}
        state.history.append(record)
        log.info("epoch %d: %s", j, record)
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / f"epoch_{j:03d}.pt", state, cfg)
            _write_log(run_dir, cfg, state)
        if stop_after is not None and state.epoch >= stop_after and state.epoch < J:
            return TrainResult(collapse_params(state.nets["nr"].samples, state.nets["nr"].weights),
                               state.nets["nr"].cfg, state, run_dir)

    nr = state.nets["nr"]
    theta = collapse_params(nr.samples, nr.weights)
    if run_dir is not None:
        save_parameters(run_dir / "final_params.npz", theta,
                        {"net_config": nr.cfg.to_dict(), "seed": cfg.seed, "epochs": J})
        _write_log(run_dir, cfg, state)
    return TrainResult(theta, nr.cfg, state, run_dir)


def train_efficient(split: DatasetSplit, cfg: TrainConfig = TrainConfig(), **kwargs) -> TrainResult:
    """Single non-recurrent network with pruning-based samples and no cross-architecture fusion."""
    return train_collaborative(split, efficient_config(cfg), **kwargs)


def _write_log(run_dir: Path, cfg: TrainConfig, state: TrainState) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg.to_dict(), "completed_epochs": state.epoch, "epochs": state.history}
    (run_dir / "train_log.json").write_text(json.dumps(payload, indent=2))
