"""Soft-target schedule and the class-weighted cross-entropy applied to every output of a net."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .nets import ForwardResult, up

EPS = 1e-6


class NumericError(FloatingPointError):
    pass


def eta_schedule(j: int, eta_final: float = 0.8, total_epochs: int = 30) -> float:
    """Weight on the ensemble prediction at epoch ``j``: a linear ramp from 0 to ``eta_final``."""
    if not 0 <= j <= total_epochs:
        raise ValueError(f"epoch {j} outside [0, {total_epochs}]")
    return eta_final * j / total_epochs


def soft_target(m, y, eta: float):
    """Blend the ensemble prediction ``m`` into the hard label ``y``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    return eta * m + (1.0 - eta) * y


def alpha_beta(y, y_soft, lam: float = 1.1):
    """Per-image balancing weights; reduces over the last two (spatial) axes.

    Both share the denominator ``|Y*Ys|_1 + |(1-Y)*(1-Ys)|_1``; an all-zero
    denominator yields ``alpha = beta = 0``.
    """
    pos = (y * y_soft).sum(axis=(-2, -1))
    neg = ((1 - y) * (1 - y_soft)).sum(axis=(-2, -1))
    denom = pos + neg
    if isinstance(denom, torch.Tensor):
        safe = torch.where(denom > 0, denom, torch.ones_like(denom))
        zero = denom == 0
        alpha = torch.where(zero, torch.zeros_like(denom), lam * pos / safe)
        beta = torch.where(zero, torch.zeros_like(denom), neg / safe)
        return alpha, beta
    import numpy as np

    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, lam * pos / safe, 0.0), np.where(denom > 0, neg / safe, 0.0)


def _per_image(w, like: torch.Tensor) -> torch.Tensor:
    w = torch.as_tensor(w, dtype=like.dtype)
    return w.reshape(like.shape) if w.dim() else w


def weighted_bce(pred: torch.Tensor, y_soft: torch.Tensor, alpha, beta) -> torch.Tensor:
    """``-alpha * sum(Ys log p) - beta * sum((1 - Ys) log(1 - p))``.

    Inputs are ``(N, 1, H, W)`` batches (one loss per image) or single ``(H, W)`` maps.
    """
    if torch.isnan(pred).any() or torch.isnan(y_soft).any():
        raise NumericError("NaN reached the loss")
    p = pred.clamp(EPS, 1.0 - EPS)
    red = (-3, -2, -1) if p.dim() == 4 else tuple(range(p.dim()))
    pos = (y_soft * torch.log(p)).sum(dim=red)
    neg = ((1.0 - y_soft) * torch.log1p(-p)).sum(dim=red)
    return -(_per_image(alpha, pos) * pos + _per_image(beta, neg) * neg)


def pixel_weighted_bce(pred: torch.Tensor, y_soft: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """``-sum(w * (Ys log p + (1 - Ys) log(1 - p)))`` with a per-pixel weight map ``w``.

    Same shape conventions as :func:`weighted_bce`. For a fixed pixel the minimiser
    is ``p = Ys`` whatever the weight, which keeps soft targets unbiased.
    """
    if torch.isnan(pred).any() or torch.isnan(y_soft).any():
        raise NumericError("NaN reached the loss")
    p = pred.clamp(EPS, 1.0 - EPS)
    red = (-3, -2, -1) if p.dim() == 4 else tuple(range(p.dim()))
    ll = y_soft * torch.log(p) + (1.0 - y_soft) * torch.log1p(-p)
    return -(weight * ll).sum(dim=red)


def label_weight_map(y: torch.Tensor, w_edge, w_non_edge) -> torch.Tensor:
    """Per-pixel weights chosen by the hard label: ``w_edge`` on edges, ``w_non_edge`` elsewhere."""
    def expand(w):
        w = torch.as_tensor(w, dtype=y.dtype)
        return w.reshape(w.shape + (1,) * (y.dim() - w.dim()))

    return y * expand(w_edge) + (1.0 - y) * expand(w_non_edge)


def total_losses(result: ForwardResult, y_soft: torch.Tensor, alpha=None, beta=None,
                 weight_map: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over every side output (both directions, each through a sigmoid) plus the fused map.

    Side outputs are bilinearly resized to the target resolution first. Either the
    term coefficients ``alpha``/``beta`` of :func:`weighted_bce` or a per-pixel
    ``weight_map`` for :func:`pixel_weighted_bce` must be given.
    """
    if (weight_map is None) == (alpha is None or beta is None):
        raise ValueError("give either alpha and beta, or weight_map")
    if weight_map is None:
        crit = lambda p: weighted_bce(p, y_soft, alpha, beta)  # noqa: E731
    else:
        crit = lambda p: pixel_weighted_bce(p, y_soft, weight_map)  # noqa: E731
    size = y_soft.shape[-2:]
    loss = crit(result.fused)
    for side in (*result.f2c_side, *result.c2f_side):
        if side.shape[-2:] != size:
            side = up(side, size)
        loss = loss + crit(torch.sigmoid(side))
    return loss


def bce_map(pred, y):
    """Plain per-pixel binary cross-entropy, predictions clamped to ``[EPS, 1 - EPS]``."""
    p = pred.clamp(EPS, 1.0 - EPS)
    return F.binary_cross_entropy(p, y.to(p.dtype), reduction="none")
