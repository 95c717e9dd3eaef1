"""Momentum averaging, sampled-parameter ensembles and their pixel-wise simplex weights.

The ensemble of one architecture is a set of ``S`` parameter samples drawn
from its momentum network. Each sample's prediction is mixed per pixel by
weights ``W_s`` (non-negative, summing to one at every pixel) that minimise
the cross-entropy of the mixture on the held-out validation split.
"""

from __future__ import annotations

import itertools
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .nets import ConfigError, ShapeError, prune_params, sample_dropout_params
from .params import ParameterVector, StructureError

log = logging.getLogger(__name__)

EPS = 1e-6
PROVENANCES = ("dropout", "pruning", "none")


# -- momentum network ---------------------------------------------------------------


@dataclass
class MomentumState:
    theta_m: ParameterVector
    mu: float = 0.5
    epoch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")


def init_momentum(theta_bp: ParameterVector, mu: float = 0.5) -> MomentumState:
    """Start the momentum network as a detached copy of the back-prop network."""
    return MomentumState(theta_bp.map(lambda _, v: v.detach().clone()), mu=mu, epoch=0)


def momentum_update(theta_bp: ParameterVector, state: MomentumState) -> MomentumState:
    """``theta_m <- mu * theta_bp + (1 - mu) * theta_m``."""
    state.theta_m.check_compatible(theta_bp)
    mu = state.mu
    new = {k: mu * theta_bp[k].detach() + (1.0 - mu) * v for k, v in state.theta_m.items()}
    return MomentumState(ParameterVector(new), mu=mu, epoch=state.epoch + 1)


# -- parameter samples -------------------------------------------------------------


@dataclass
class SampleSet:
    samples: list[ParameterVector]
    provenance: str = "dropout"
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.samples:
            raise ConfigError("a sample set needs at least one member")
        if self.provenance not in PROVENANCES:
            raise ConfigError(f"unknown provenance {self.provenance!r}")
        first = self.samples[0]
        for s in self.samples[1:]:
            first.check_compatible(s)

    @property
    def S(self) -> int:
        return len(self.samples)


def draw_samples(theta: ParameterVector, S: int = 3, provenance: str = "dropout", rate: float = 0.1,
                 seed: int = 0, pool_fraction: float = 0.3) -> SampleSet:
    """Draw ``S`` stochastic copies of ``theta``; sample ``s`` uses its own recorded seed.

    ``rate`` is the dropout rate or the pruning probability; ``pool_fraction`` is the
    share of smallest-magnitude values eligible for pruning. ``provenance="none"``
    returns ``S`` exact copies (no stochastic sampling).
    """
    if S < 1:
        raise ConfigError("S must be >= 1")
    seeds = [int(x) for x in np.random.SeedSequence(seed).generate_state(S)]
    out = []
    for sd in seeds:
        rng = np.random.default_rng(sd)
        if provenance == "dropout":
            out.append(sample_dropout_params(theta, rate, rng))
        elif provenance == "pruning":
            out.append(prune_params(theta, rate, rng, pool_fraction))
        elif provenance == "none":
            out.append(theta.detach())
        else:
            raise ConfigError(f"unknown provenance {provenance!r}")
    return SampleSet(out, provenance, seeds)


# -- weights ----------------------------------------------------------------------------


@dataclass
class EnsembleWeights:
    """``W`` has shape ``(S, H, W)``; it lies on the probability simplex at every pixel."""

    W: np.ndarray
    converged: bool = True
    iterations: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 3:
            raise ShapeError(f"weights must be (S, H, W), got {self.W.shape}")
        if (self.W < 0).any():
            raise ValueError("weights must be non-negative")
        if np.abs(self.W.sum(axis=0) - 1.0).max() > 1e-6:
            raise ValueError("weights must sum to one at every pixel")

    @classmethod
    def uniform(cls, S: int, shape: Sequence[int]) -> EnsembleWeights:
        return cls(np.full((S, *shape), 1.0 / S))

    @property
    def S(self) -> int:
        return self.W.shape[0]

    @property
    def omega(self) -> np.ndarray:
        """Collapse scalars ``omega_s = |W_s|_1 / sum_s' |W_s'|_1``."""
        l1 = self.W.reshape(self.S, -1).sum(axis=1)
        return l1 / l1.sum()


def save_weights(path: str | Path, weights: EnsembleWeights, seeds: Sequence[int] = (), extra: dict | None = None):
    meta = {"seeds": [int(s) for s in seeds], "converged": weights.converged,
            "iterations": weights.iterations, **(extra or {})}
    np.savez(path, W=weights.W, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))


def load_weights(path: str | Path) -> tuple[EnsembleWeights, dict]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        w = EnsembleWeights(z["W"], converged=meta["converged"], iterations=meta["iterations"])
    return w, meta


def combine(preds, W):
    """``sum_s W_s * preds_s``; ``preds`` is ``(S, ..., H, W)``, ``W`` is ``(S, H, W)``."""
    if preds.shape[0] != W.shape[0] or preds.shape[-2:] != W.shape[-2:]:
        raise ShapeError(f"predictions {tuple(preds.shape)} do not fit weights {tuple(W.shape)}")
    Wb = W.reshape(W.shape[0], *([1] * (preds.dim() - 3 if isinstance(preds, torch.Tensor) else preds.ndim - 3)),
                   *W.shape[-2:])
    return (Wb * preds).sum(0)


def ensemble_predict(predict_fn: Callable[[torch.Tensor, ParameterVector], torch.Tensor], x: torch.Tensor,
                     samples: SampleSet, weights: EnsembleWeights) -> torch.Tensor:
    """Pixel-wise weighted mixture of the members' predictions on ``x``."""
    if weights.S != samples.S:
        raise ShapeError(f"{samples.S} samples but {weights.S} weight maps")
    preds = torch.stack([predict_fn(x, th) for th in samples.samples])
    W = torch.as_tensor(weights.W, dtype=preds.dtype)
    return combine(preds, W)


def confidence_fuse(m_r, m_nr):
    """Blend two maps by their distance from 0.5; where both are exactly 0.5 the result is 0.5."""
    if m_r.shape != m_nr.shape:
        raise ShapeError("maps to fuse must share a shape")
    lib = torch if isinstance(m_r, torch.Tensor) else np
    c_r, c_nr = lib.abs(m_r - 0.5), lib.abs(m_nr - 0.5)
    den = c_r + c_nr
    zero = den == 0
    safe = lib.where(zero, lib.ones_like(den), den)
    return lib.where(zero, lib.full_like(den, 0.5), (m_r * c_r + m_nr * c_nr) / safe)


def collapse_params(samples: SampleSet, weights: EnsembleWeights | np.ndarray) -> ParameterVector:
    """``sum_s omega_s * theta_s`` (``weights`` may also be the omega vector itself)."""
    omega = weights.omega if isinstance(weights, EnsembleWeights) else np.asarray(weights, dtype=np.float64)
    if omega.shape != (samples.S,):
        raise StructureError(f"{samples.S} samples but {omega.shape} collapse scalars")
    if (omega < 0).any() or abs(omega.sum() - 1.0) > 1e-9:
        raise ValueError("collapse scalars must lie on the simplex")
    if samples.S == 1:
        return samples.samples[0].detach()
    out = {}
    for k in samples.samples[0]:
        acc = None
        for w, th in zip(omega, samples.samples):
            term = float(w) * th[k].detach()
            acc = term if acc is None else acc + term
        out[k] = acc
    return ParameterVector(out)


# -- weight solving ---------------------------------------------------------------------


def mixture_bce(W: np.ndarray, P: np.ndarray, Y: np.ndarray) -> float:
    """Mean binary cross-entropy of the mixture ``sum_s W_s P_s`` against ``Y``.

    ``P`` is ``(S, N, H, W)`` (already clamped), ``Y`` is ``(N, H, W)``.
    """
    M = np.einsum("shw,snhw->nhw", W, P)
    return float(-(Y * np.log(M) + (1 - Y) * np.log1p(-M)).mean())


def _pixel_objective(W, P, Y):
    """Per-pixel objective (mean over images) and its gradient in W; shapes (H, W) and (S, H, W)."""
    M = np.einsum("shw,snhw->nhw", W, P)
    f = -(Y * np.log(M) + (1 - Y) * np.log1p(-M)).mean(axis=0)
    dM = (M - Y) / (M * (1 - M)) / Y.shape[0]
    g = np.einsum("snhw,nhw->shw", P, dM)
    return f, g


def fixed_point_weights(P: np.ndarray, Y: np.ndarray, damping: float = 0.5, max_iters: int = 50,
                        tol: float = 1e-6) -> tuple[np.ndarray, bool, int]:
    """Damped iteration of the stationarity form ``W_s = C * sum_n P_s * (Y/M - (1-Y)/(1-M))``.

    ``C = N_v / (2 sum_n Y)`` per pixel; pixels with no positive label keep ``1/S``.
    Negative entries are clamped and each pixel renormalised onto the simplex.
    """
    S, N = P.shape[:2]
    W = np.full((S, *P.shape[2:]), 1.0 / S)
    sy = Y.sum(axis=0)
    has_pos = sy > 0
    C = np.where(has_pos, N / (2.0 * np.where(has_pos, sy, 1.0)), 0.0)
    converged, it = False, 0
    for it in range(1, max_iters + 1):
        M = np.einsum("shw,snhw->nhw", W, P)
        r = Y / M - (1 - Y) / (1 - M)
        target = C * np.einsum("snhw,nhw->shw", P, r)
        new = damping * W + (1 - damping) * target
        new = np.where(has_pos, new, 1.0 / S)
        new = _to_simplex(new)
        change = np.abs(new - W).max()
        W = new
        if change < tol:
            converged = True
            break
    return W, converged, it


def _to_simplex(W: np.ndarray) -> np.ndarray:
    W = np.clip(W, 0.0, None)
    s = W.sum(axis=0, keepdims=True)
    return np.where(s > 0, W / np.where(s > 0, s, 1.0), 1.0 / W.shape[0])


def refine_weights(W0: np.ndarray, P: np.ndarray, Y: np.ndarray, tol: float = 1e-8,
                   max_iters: int = 5000) -> tuple[np.ndarray, bool, int, float]:
    """Exponentiated-gradient descent on the per-pixel objective, with per-pixel step adaptation.

    Stops once every pixel's Frank-Wolfe gap ``<g, w> - min_s g_s`` (an upper bound on its
    suboptimality) is below ``tol``. Returns ``(W, converged, iterations, max_gap)``.
    """
    S = W0.shape[0]
    W = 0.999 * W0 + 0.001 / S  # strictly interior start: multiplicative updates cannot revive zeros
    f, g = _pixel_objective(W, P, Y)
    eta = np.ones(W.shape[1:])
    gap = (g * W).sum(0) - g.min(0)
    it = 0
    for it in range(1, max_iters + 1):
        if gap.max() < tol:
            return W, True, it - 1, float(gap.max())
        step = -eta[None] * (g - g.min(0, keepdims=True))
        cand = W * np.exp(step)
        cand /= cand.sum(0, keepdims=True)
        fc, gc = _pixel_objective(cand, P, Y)
        accept = fc <= f
        W = np.where(accept[None], cand, W)
        f = np.where(accept, fc, f)
        g = np.where(accept[None], gc, g)
        eta = np.where(accept, eta * 2.0, eta * 0.25)
        eta = np.clip(eta, 1e-12, 1e12)
        gap = (g * W).sum(0) - g.min(0)
    return W, bool(gap.max() < tol), it, float(gap.max())


def solve_weights_from_predictions(P, Y, damping: float = 0.5, max_iters: int = 50, refine: bool = True,
                                   refine_tol: float = 1e-8) -> EnsembleWeights:
    """Validation-optimal pixel-wise weights for member predictions ``P`` (``S, N, H, W``)."""
    P = np.clip(np.asarray(P, dtype=np.float64), EPS, 1 - EPS)
    Y = np.asarray(Y, dtype=np.float64)
    if P.ndim != 4 or Y.shape != P.shape[1:]:
        raise ShapeError(f"member predictions {P.shape} vs targets {Y.shape}")
    if P.shape[1] < 1:
        raise ValueError("need at least one validation image")
    S = P.shape[0]
    uniform = np.full((S, *P.shape[2:]), 1.0 / S)
    if S == 1:
        return EnsembleWeights(uniform, True, 0, {"bce": mixture_bce(uniform, P, Y)})
    W, fp_conv, fp_iters = fixed_point_weights(P, Y, damping, max_iters)
    info = {"fixed_point_converged": fp_conv, "fixed_point_iters": fp_iters,
            "fixed_point_bce": mixture_bce(W, P, Y), "uniform_bce": mixture_bce(uniform, P, Y)}
    converged, iters = fp_conv, fp_iters
    if refine:
        W, converged, r_iters, gap = refine_weights(W, P, Y, tol=refine_tol)
        iters += r_iters
        info.update(refine_iters=r_iters, max_gap=gap)
    bce = mixture_bce(W, P, Y)
    if bce > info["uniform_bce"]:
        W, bce = uniform, info["uniform_bce"]
    W = W / W.sum(0, keepdims=True)
    info["bce"] = bce
    if not converged:
        log.info("ensemble weights did not fully converge (%s)", info)
    return EnsembleWeights(W, converged, iters, info)


def solve_weights(samples: SampleSet, predict_fn: Callable[[torch.Tensor, ParameterVector], torch.Tensor],
                  x_val: torch.Tensor, y_val, **kwargs) -> EnsembleWeights:
    """Run every member on the validation batch and solve for its pixel-wise weights."""
    with torch.no_grad():
        P = np.stack([predict_fn(x_val, th).double().numpy().reshape(len(x_val), *x_val.shape[-2:])
                      for th in samples.samples])
    y = y_val.numpy() if isinstance(y_val, torch.Tensor) else np.asarray(y_val)
    return solve_weights_from_predictions(P, y.reshape(P.shape[1:]).astype(np.float64), **kwargs)


# -- mutual-information view ---------------------------------------------------------------


def simplex_grid(S: int, resolution: float = 0.05) -> np.ndarray:
    """All weight vectors whose entries are multiples of ``resolution``, in lexicographic order."""
    n = int(round(1.0 / resolution))
    if abs(n * resolution - 1.0) > 1e-12:
        raise ConfigError("1/resolution must be an integer")
    pts = [c for c in itertools.product(range(n + 1), repeat=S - 1) if sum(c) <= n]
    return np.array([(*c, n - sum(c)) for c in pts], dtype=np.float64) / n


def select_grid_point(scores: np.ndarray, grid: np.ndarray, maximize: bool, rel_tol: float = 1e-9) -> int:
    """Index of the best grid point; near-ties go to the point closest to uniform, then lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    best = s.max() if maximize else s.min()
    tie = np.abs(s - best) <= rel_tol * max(1.0, abs(best))
    cand = np.flatnonzero(tie)
    dist = ((grid[cand] - 1.0 / grid.shape[1]) ** 2).sum(1)
    near = cand[np.abs(dist - dist.min()) <= 1e-12]
    return int(near.min())


@dataclass(frozen=True)
class ToyDistribution:
    """Finite-support joint law: input ``i`` occurs with ``pos[i]`` positive and ``neg[i]`` negative labels.

    ``preds[s, i]`` is member ``s``'s predicted edge probability at input ``i``.
    """

    preds: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if self.preds.ndim != 2 or self.pos.shape != (self.preds.shape[1],) or self.neg.shape != self.pos.shape:
            raise ShapeError("toy distribution arrays are inconsistent")
        if ((self.pos + self.neg) <= 0).any():
            raise ValueError("every support point needs positive mass")


def mi_plugin_estimate(grid: np.ndarray, toy: ToyDistribution) -> tuple[int, np.ndarray]:
    """Grid point maximising the plug-in conditional MI between the labels and the weighted ensemble.

    ``I(Y; W | X) ~= H(Y | X) - E[-log q_W(Y | X)]`` evaluated exactly over the
    toy support, where ``q_W(1 | x) = sum_s w_s p_s(x)``. Returns (index, MI values).
    """
    tot = (toy.pos + toy.neg).astype(np.float64)
    px = tot / tot.sum()
    q1 = toy.pos / tot
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(q1 > 0, q1 * np.log(q1), 0.0) + np.where(q1 < 1, (1 - q1) * np.log1p(-q1), 0.0))
    h_y_x = float((px * h).sum())
    m = np.clip(grid @ toy.preds, EPS, 1 - EPS)  # (G, X)
    cross = -(q1 * np.log(m) + (1 - q1) * np.log1p(-m))
    mi = h_y_x - (cross * px).sum(axis=1)
    return select_grid_point(mi, grid, maximize=True), mi
