"""SGD schedule and adaptive gradient clipping for normalization-free training."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .params import ParameterVector


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-3
    peak_lr: float = 1e-3
    warmup_epochs: int = 4
    batch_size: int = 16
    agc_lambda: float = 0.01

    def __post_init__(self):
        if min(self.momentum, self.peak_lr, self.batch_size, self.agc_lambda) <= 0 or self.weight_decay < 0:
            raise ValueError("optimizer settings must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


AGC_EPS = 1e-3


def unitwise_norm(x: torch.Tensor) -> torch.Tensor:
    """Norm per output unit (dim 0) for weight tensors; whole-tensor norm for vectors."""
    if x.dim() <= 1:
        return x.norm()
    return x.flatten(1).norm(dim=1).reshape((-1,) + (1,) * (x.dim() - 1))


def agc_clip(grad, params, agc_lambda: float = 0.01, eps: float = AGC_EPS) -> ParameterVector:
    """Rescale any unit whose ``|g| / max(|w|, eps)`` exceeds ``agc_lambda`` back onto that ratio."""
    out = {}
    for k, g in grad.items():
        w = params[k].detach()
        if w.shape != g.shape:
            raise ValueError(f"gradient/parameter shape mismatch for {k}")
        max_norm = agc_lambda * unitwise_norm(w).clamp_min(eps)
        g_norm = unitwise_norm(g)
        scale = max_norm / g_norm.clamp_min(1e-30)
        out[k] = torch.where(g_norm > max_norm, g * scale, g)
    return ParameterVector(out)


def lr_at(epoch: float, config: OptimizerConfig, total_epochs: int) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then linear decay to 0 at ``total_epochs``.

    ``epoch`` may be fractional so the schedule can be stepped per iteration.
    """
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    warm = min(config.warmup_epochs, total_epochs)
    if warm > 0 and epoch <= warm:
        return config.peak_lr * epoch / warm
    if total_epochs == warm:
        return config.peak_lr
    return config.peak_lr * (total_epochs - epoch) / (total_epochs - warm)


def make_sgd(theta: ParameterVector, config: OptimizerConfig) -> torch.optim.SGD:
    """SGD with momentum; weight decay only on non-bias entries."""
    decay = [v for k, v in theta.items() if not k.endswith("bias")]
    no_decay = [v for k, v in theta.items() if k.endswith("bias")]
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": config.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=0.0, momentum=config.momentum)
