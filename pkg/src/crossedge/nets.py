"""Recurrent and non-recurrent edge networks with bidirectional side-output aggregation.

Both nets are plain ``nn.Module`` skeletons; their weights live outside the
module in a :class:`ParameterVector` and are injected with
``torch.func.functional_call``. That keeps forward passes pure functions of
``(image, parameters, mode, seed)`` so momentum copies, parameter samples and
collapsed ensembles can all share one skeleton.
"""

from __future__ import annotations

import functools
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .params import ParameterVector


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


KINDS = ("recurrent", "nonrecurrent")
SIZE_CLASSES = ("tiny", "small", "normal", "large")

# Non-recurrent (deployed) net: widths grow as resolution shrinks. Tuned so the
# trainable-parameter totals land on 315K / 487K / 716K / 4.3M.
_NR_PRESETS = {
    "tiny": dict(stage_widths=(16, 32, 56, 88), blocks=(1, 1, 1, 1), head_width=8),
    "small": dict(stage_widths=(16, 32, 64, 120), blocks=(1, 1, 1, 1), head_width=8),
    "normal": dict(stage_widths=(16, 40, 80, 144), blocks=(1, 1, 1, 1), head_width=12),
    "large": dict(stage_widths=(32, 64, 136, 280), blocks=(1, 2, 2, 2), head_width=16),
}
# Recurrent net: one shared width, wider than the non-recurrent first stages.
_R_PRESETS = {
    "tiny": dict(stage_widths=(32,), blocks=(1,), head_width=8),
    "small": dict(stage_widths=(40,), blocks=(1,), head_width=8),
    "normal": dict(stage_widths=(48,), blocks=(1,), head_width=12),
    "large": dict(stage_widths=(96,), blocks=(2,), head_width=16),
}


@dataclass(frozen=True)
class NetConfig:
    kind: str = "nonrecurrent"
    steps: int = 4
    stage_widths: tuple[int, ...] = (16, 40, 80, 144)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    head_width: int = 12
    dropout_rate: float = 0.1
    size_class: str = "normal"
    in_channels: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown net kind {self.kind!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if any(w <= 0 for w in self.stage_widths) or self.head_width <= 0:
            raise ConfigError("widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.kind == "nonrecurrent":
            if len(self.stage_widths) != self.steps or len(self.blocks) != self.steps:
                raise ConfigError("non-recurrent nets need one width and block count per scale")
            if any(b > a for a, b in zip(self.stage_widths[1:], self.stage_widths[:-1])):
                raise ConfigError("non-recurrent stage widths must be non-decreasing")
        elif len(self.stage_widths) != 1 or len(self.blocks) != 1:
            raise ConfigError("recurrent nets take a single shared width and block count")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        d = dict(d)
        for k in ("stage_widths", "blocks"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def net_config(kind: str, size_class: str = "normal", **overrides) -> NetConfig:
    """Preset config for ``kind`` at ``size_class``; keyword overrides win."""
    if size_class not in SIZE_CLASSES:
        raise ConfigError(f"unknown size class {size_class!r}")
    if kind == "recurrent":
        base = dict(kind=kind, steps=5, size_class=size_class, **_R_PRESETS[size_class])
    elif kind == "nonrecurrent":
        base = dict(kind=kind, steps=4, size_class=size_class, **_NR_PRESETS[size_class])
    else:
        raise ConfigError(f"unknown net kind {kind!r}")
    base.update(overrides)
    return NetConfig(**base)


@dataclass
class ForwardResult:
    fused: torch.Tensor  # (N, 1, H, W), sigmoid output
    fused_logit: torch.Tensor
    f2c_side: list[torch.Tensor] = field(default_factory=list)  # pre-activation, native scale
    c2f_side: list[torch.Tensor] = field(default_factory=list)


# -- building blocks ----------------------------------------------------------


def down(x: torch.Tensor) -> torch.Tensor:
    return F.max_pool2d(x, kernel_size=2, stride=2, ceil_mode=True)


def up(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def aggregate_f2c(z_seq: Sequence, down_fn: Callable = down) -> list:
    """Fine-to-coarse accumulation: ``F_t = Z_t + Down(F_{t-1})``, ``F_1 = Z_1``."""
    out = []
    for t, z in enumerate(z_seq):
        if t == 0:
            out.append(z)
            continue
        carried = down_fn(out[-1])
        if tuple(carried.shape) != tuple(z.shape):
            raise ShapeError(f"f2c step {t + 1}: {tuple(carried.shape)} vs {tuple(z.shape)}")
        out.append(z + carried)
    return out


def aggregate_c2f(z_seq: Sequence, up_fn: Callable | None = None) -> list:
    """Coarse-to-fine accumulation: ``F_t = Z_t + Up(F_{t+1})``, ``F_T = Z_T``.

    ``up_fn(x, like)`` must return ``x`` resampled to the shape of ``like``.
    """
    if up_fn is None:
        up_fn = lambda x, like: up(x, like.shape[-2:])  # noqa: E731
    out = [None] * len(z_seq)
    for t in range(len(z_seq) - 1, -1, -1):
        z = z_seq[t]
        if t == len(z_seq) - 1:
            out[t] = z
            continue
        carried = up_fn(out[t + 1], z)
        if tuple(carried.shape) != tuple(z.shape):
            raise ShapeError(f"c2f step {t + 1}: {tuple(carried.shape)} vs {tuple(z.shape)}")
        out[t] = z + carried
    return out


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class SideHead(nn.Module):
    """3x3 conv -> ReLU -> 1x1 conv down to a single edge channel."""

    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.conv = nn.Conv2d(width, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)

    def forward(self, x):
        return self.out(F.relu(self.conv(x)))


class Stage(nn.Module):
    def __init__(self, c_in: int, width: int, n_blocks: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, width, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(n_blocks)])

    def forward(self, x):
        return self.blocks(F.relu(self.conv(x)))


class _EdgeNet(nn.Module):
    steps: int

    def features(self, x) -> list[torch.Tensor]:
        raise NotImplementedError

    def side_z(self, feats) -> tuple[list, list]:
        raise NotImplementedError

    def forward(self, x):
        h, w = x.shape[-2:]
        feats = self.features(x)
        z_f2c, z_c2f = self.side_z(feats)
        f2c = aggregate_f2c(z_f2c)
        c2f = aggregate_c2f(z_c2f)
        stacked = []
        for a, b in zip(f2c, c2f):
            stacked.append(a if a.shape[-2:] == (h, w) else up(a, (h, w)))
            stacked.append(b if b.shape[-2:] == (h, w) else up(b, (h, w)))
        logit = self.fuse(torch.cat(stacked, dim=1))
        return logit, f2c, c2f


class RecurrentNet(_EdgeNet):
    """Encoder, then one shared module unrolled ``steps`` times with max-pooling between steps."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        width = cfg.stage_widths[0]
        self.steps = cfg.steps
        self.encoder = Stage(cfg.in_channels, width, 2)
        self.recurrent = nn.Sequential(*[ResidualBlock(width) for _ in range(cfg.blocks[0])])
        self.head_f2c = SideHead(width, cfg.head_width)
        self.head_c2f = SideHead(width, cfg.head_width)
        self.fuse = nn.Conv2d(2 * cfg.steps, 1, 1)

    def features(self, x):
        feats = []
        h = self.encoder(x)
        for t in range(self.steps):
            h = self.recurrent(h if t == 0 else down(h))
            feats.append(h)
        return feats

    def side_z(self, feats):
        return [self.head_f2c(f) for f in feats], [self.head_c2f(f) for f in feats]


class NonRecurrentNet(_EdgeNet):
    """Unshared per-scale stages whose width grows as resolution shrinks."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.steps = cfg.steps
        stages, c_in = [], cfg.in_channels
        for w, b in zip(cfg.stage_widths, cfg.blocks):
            stages.append(Stage(c_in, w, b))
            c_in = w
        self.stages = nn.ModuleList(stages)
        self.heads_f2c = nn.ModuleList(SideHead(w, cfg.head_width) for w in cfg.stage_widths)
        self.heads_c2f = nn.ModuleList(SideHead(w, cfg.head_width) for w in cfg.stage_widths)
        self.fuse = nn.Conv2d(2 * cfg.steps, 1, 1)

    def features(self, x):
        feats = []
        h = x
        for t, stage in enumerate(self.stages):
            h = stage(h if t == 0 else down(h))
            feats.append(h)
        return feats

    def side_z(self, feats):
        return ([hd(f) for hd, f in zip(self.heads_f2c, feats)],
                [hd(f) for hd, f in zip(self.heads_c2f, feats)])


@functools.lru_cache(maxsize=32)
def build_module(cfg: NetConfig) -> _EdgeNet:
    module = RecurrentNet(cfg) if cfg.kind == "recurrent" else NonRecurrentNet(cfg)
    module.requires_grad_(False)
    return module


def param_count(cfg: NetConfig) -> int:
    return sum(p.numel() for p in build_module(cfg).parameters())


def init_params(cfg: NetConfig, seed: int, dtype: torch.dtype = torch.float32) -> ParameterVector:
    """He-normal convs, zero biases; residual branches start damped, fusion starts as an average."""
    gen = torch.Generator().manual_seed(int(seed))
    entries = {}
    for name, p in build_module(cfg).named_parameters():
        if name.endswith("bias"):
            t = torch.zeros(p.shape, dtype=dtype)
        elif name.startswith("fuse."):
            t = torch.full(p.shape, 1.0 / p.shape[1], dtype=dtype)
        else:
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            std = math.sqrt(2.0 / fan_in)
            if ".conv2." in name:
                std *= 0.1
            t = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype) * std
        entries[name] = t
    return ParameterVector(entries)


def zero_params(cfg: NetConfig, dtype: torch.dtype = torch.float32) -> ParameterVector:
    return ParameterVector({n: torch.zeros(p.shape, dtype=dtype) for n, p in build_module(cfg).named_parameters()})


# -- parameter sampling -------------------------------------------------------


def sample_dropout_params(theta: ParameterVector, rate: float, rng: np.random.Generator) -> ParameterVector:
    """Monte-Carlo dropout on the weights themselves: zero each value w.p. ``rate``, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return theta.detach()

    def drop(_, v):
        keep = torch.from_numpy(rng.random(tuple(v.shape)) >= rate)
        return torch.where(keep, v.detach() / (1.0 - rate), torch.zeros_like(v))

    return theta.map(drop)


def prune_params(theta: ParameterVector, prune_prob: float, rng: np.random.Generator,
                 pool_fraction: float = 0.3) -> ParameterVector:
    """Stochastic magnitude pruning.

    Within every layer the ``pool_fraction`` smallest-magnitude values form the
    candidate pool; each candidate is zeroed with probability ``prune_prob``.
    Survivors are not rescaled.
    """
    if not 0.0 <= prune_prob < 1.0:
        raise ConfigError(f"prune probability must lie in [0, 1), got {prune_prob}")
    if not 0.0 <= pool_fraction <= 1.0:
        raise ConfigError("pool_fraction must lie in [0, 1]")

    def prune(_, v):
        v = v.detach()
        flat = v.reshape(-1).numpy() if v.dtype != torch.bfloat16 else v.float().reshape(-1).numpy()
        n_pool = int(round(pool_fraction * flat.size))
        hit = rng.random(flat.size) < prune_prob
        if n_pool == 0 or prune_prob == 0.0:
            return v.clone()
        order = np.argsort(np.abs(flat), kind="stable")
        in_pool = np.zeros(flat.size, dtype=bool)
        in_pool[order[:n_pool]] = True
        mask = torch.from_numpy(~(in_pool & hit)).reshape(v.shape)
        return torch.where(mask, v, torch.zeros_like(v))

    return theta.map(prune)


# -- forward passes ------------------------------------------------------------


def _check_input(x: torch.Tensor, cfg: NetConfig) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
    min_side = 2 ** (cfg.steps - 1)
    if min(x.shape[-2:]) < min_side:
        raise ShapeError(f"input {tuple(x.shape[-2:])} smaller than {min_side} px; pooling would vanish")
    return x


def forward(x: torch.Tensor, theta: ParameterVector, cfg: NetConfig, mode: str = "train",
            rng: np.random.Generator | None = None) -> ForwardResult:
    """Run either architecture with parameters ``theta``.

    ``mode="sample"`` draws a dropout sample of ``theta`` from ``rng`` first.
    """
    x = _check_input(x, cfg)
    if mode == "sample":
        if rng is None:
            raise ConfigError("sample mode needs an rng")
        theta = sample_dropout_params(theta, cfg.dropout_rate, rng)
    elif mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    logit, f2c, c2f = functional_call(build_module(cfg), dict(theta), (x,))
    return ForwardResult(fused=torch.sigmoid(logit), fused_logit=logit, f2c_side=f2c, c2f_side=c2f)


def forward_recurrent(x, theta, cfg: NetConfig, mode="train", rng=None) -> ForwardResult:
    if cfg.kind != "recurrent":
        raise ConfigError("forward_recurrent needs a recurrent config")
    return forward(x, theta, cfg, mode, rng)


def forward_nonrecurrent(x, theta, cfg: NetConfig, mode="train", rng=None) -> ForwardResult:
    if cfg.kind != "nonrecurrent":
        raise ConfigError("forward_nonrecurrent needs a non-recurrent config")
    return forward(x, theta, cfg, mode, rng)


def test_activation(x):
    """Inference-time squashing ``e^(x-.5) / (e^(x-.5) + e^(.5-x))``, i.e. ``sigmoid(2x - 1)``.

    Works on tensors and numpy arrays; written in the form that cannot overflow.
    """
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(2.0 * x - 1.0)
    x = np.asarray(x, dtype=np.float64)
    z = 2.0 * x - 1.0
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


test_activation.__test__ = False  # not a pytest test despite the name


@torch.no_grad()
def predict(x: torch.Tensor, theta: ParameterVector, cfg: NetConfig) -> torch.Tensor:
    """Deployment-time edge map in (0, 1): fused logit through :func:`test_activation`."""
    res = forward(x, theta, cfg, mode="eval")
    return test_activation(res.fused_logit)
