"""Soft-target schedule, class-balancing coefficients and the weighted cross-entropy losses."""

import math

import numpy as np
import pytest
import torch

from crossedge.losses import (EPS, NumericError, alpha_beta, bce_map, eta_schedule, label_weight_map,
                              pixel_weighted_bce, soft_target, total_losses, weighted_bce)
from crossedge.nets import ForwardResult, up


def central_difference(fn, x: torch.Tensor, h: float = 1e-3) -> torch.Tensor:
    """Numerical gradient of a scalar function, one coordinate at a time."""
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        hi = fn(x).item()
        flat[i] = old - h
        lo = fn(x).item()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * h)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return ((a - b).norm() / max(a.norm().item(), b.norm().item(), 1e-12)).item()


class TestEtaSchedule:
    def test_endpoints(self):
        assert eta_schedule(0, 0.8, 20) == 0.0
        assert eta_schedule(20, 0.8, 20) == pytest.approx(0.8, abs=1e-12)

    def test_linear(self):
        assert eta_schedule(5, 0.8, 20) == pytest.approx(0.2, abs=1e-12)
        steps = [eta_schedule(j, 0.6, 12) for j in range(13)]
        np.testing.assert_allclose(np.diff(steps), 0.05, atol=1e-12)

    def test_range_checked(self):
        with pytest.raises(ValueError):
            eta_schedule(21, 0.8, 20)


class TestSoftTarget:
    def test_eta_zero_keeps_labels(self):
        y, m = torch.rand(4, 4).round(), torch.rand(4, 4)
        assert torch.equal(soft_target(m, y, 0.0), y)

    def test_eta_one_gives_prediction(self):
        y, m = torch.rand(4, 4).round().double(), torch.rand(4, 4).double()
        torch.testing.assert_close(soft_target(m, y, 1.0), m, atol=1e-12, rtol=0)

    def test_convex_combination(self):
        assert soft_target(np.array([0.2]), np.array([1.0]), 0.25)[0] == pytest.approx(0.8, abs=1e-12)

    def test_eta_checked(self):
        with pytest.raises(ValueError):
            soft_target(np.zeros(2), np.zeros(2), 1.5)


class TestAlphaBeta:
    def test_hand_example(self):
        y = np.zeros((10, 10))
        y.flat[:20] = 1
        a, b = alpha_beta(y, y, 1.1)
        assert a == pytest.approx(0.22, abs=1e-12) and b == pytest.approx(0.80, abs=1e-12)

    def test_unit_lambda_sums_to_one(self):
        y = (np.random.default_rng(0).random((8, 8)) < 0.3).astype(float)
        a, b = alpha_beta(y, y, 1.0)
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_sum_for_other_lambda(self):
        y = np.zeros((5, 4))
        y.flat[:3] = 1
        a, b = alpha_beta(y, y, 1.1)
        assert a + b == pytest.approx((1.1 * 3 + 17) / 20, abs=1e-12)

    def test_independent_reduction(self):
        """Per-pixel accumulation with math.fsum against the vectorised version."""
        rng = np.random.default_rng(1)
        for _ in range(5):
            y = (rng.random((7, 9)) < 0.25).astype(float)
            ys = rng.random((7, 9))
            pos = math.fsum(float(a * b) for a, b in zip(y.flat, ys.flat))
            neg = math.fsum(float((1 - a) * (1 - b)) for a, b in zip(y.flat, ys.flat))
            a, b = alpha_beta(y, ys, 1.3)
            assert a == pytest.approx(1.3 * pos / (pos + neg), abs=1e-12)
            assert b == pytest.approx(neg / (pos + neg), abs=1e-12)

    def test_torch_batch_matches_numpy(self):
        y = (torch.rand(3, 6, 6, dtype=torch.float64) < 0.3).double()
        ys = torch.rand(3, 6, 6, dtype=torch.float64)
        a, b = alpha_beta(y, ys)
        for i in range(3):
            an, bn = alpha_beta(y[i].numpy(), ys[i].numpy())
            assert a[i].item() == pytest.approx(float(an), abs=1e-12)
            assert b[i].item() == pytest.approx(float(bn), abs=1e-12)

    def test_empty_denominator(self):
        y, ys = np.ones((3, 3)), np.zeros((3, 3))
        assert alpha_beta(y, ys) == (0.0, 0.0)


class TestWeightedBCE:
    def test_perfect_prediction(self):
        ones = torch.ones(6, 6, dtype=torch.float64)
        assert 0 <= weighted_bce(ones, ones, 0.3, 0.7).item() <= 2e-5 * 36

    def test_half_prediction_closed_form(self):
        y = torch.zeros(10, 10, dtype=torch.float64)
        y.view(-1)[:20] = 1
        a, b = 0.22, 0.8
        loss = weighted_bce(torch.full_like(y, 0.5), y, a, b).item()
        assert loss == pytest.approx((a * 20 + b * 80) * math.log(2), abs=1e-12)

    def test_non_negative(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            p, ys = torch.rand(8, 8, generator=g), torch.rand(8, 8, generator=g)
            assert weighted_bce(p, ys, 0.4, 0.6).item() >= 0

    def test_batch_gives_one_loss_per_image(self):
        p, ys = torch.rand(3, 1, 5, 5), torch.rand(3, 1, 5, 5)
        a, b = torch.tensor([0.1, 0.2, 0.3]), torch.tensor([0.9, 0.8, 0.7])
        out = weighted_bce(p, ys, a, b)
        assert out.shape == (3,)
        torch.testing.assert_close(out[1], weighted_bce(p[1, 0], ys[1, 0], 0.2, 0.8))

    def test_nan_rejected(self):
        p = torch.full((3, 3), float("nan"))
        with pytest.raises(NumericError):
            weighted_bce(p, torch.zeros(3, 3), 0.5, 0.5)

    def test_gradient_finite_difference(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(20):
            p = (0.2 + 0.6 * torch.rand(8, 8, generator=g, dtype=torch.float64)).requires_grad_()
            ys = torch.rand(8, 8, generator=g, dtype=torch.float64)
            a, b = torch.rand(2, generator=g, dtype=torch.float64).tolist()
            fn = lambda q: weighted_bce(q, ys, a, b)  # noqa: E731
            (ana,) = torch.autograd.grad(fn(p), p)
            num = central_difference(fn, p.detach().clone())
            assert relative_error(num, ana) <= 1e-4

    def test_bce_map_agrees(self):
        p, y = torch.rand(4, 4, dtype=torch.float64), torch.rand(4, 4).round().double()
        expected = -(y * torch.log(p) + (1 - y) * torch.log(1 - p))
        torch.testing.assert_close(bce_map(p.clamp(EPS, 1 - EPS), y), expected, atol=1e-9, rtol=1e-9)


class TestPixelWeightedBCE:
    def test_matches_term_weights_on_hard_targets(self):
        """With binary targets, per-label pixel weights equal the two term coefficients."""
        y = (torch.rand(2, 1, 6, 6) < 0.3).double()
        p = torch.rand(2, 1, 6, 6, dtype=torch.float64)
        w_e, w_n = torch.tensor([0.9, 0.7], dtype=torch.float64), torch.tensor([0.1, 0.3], dtype=torch.float64)
        torch.testing.assert_close(pixel_weighted_bce(p, y, label_weight_map(y, w_e, w_n)),
                                   weighted_bce(p, y, w_e, w_n))

    def test_minimiser_is_soft_target(self):
        ys = torch.tensor([[0.1, 0.35, 0.8]], dtype=torch.float64)
        p = ys.clone().requires_grad_()
        (g,) = torch.autograd.grad(pixel_weighted_bce(p, ys, torch.tensor([[3.0, 0.2, 1.0]], dtype=torch.float64)), p)
        assert g.abs().max().item() < 1e-9


def _random_result(T, size, g, fused_range=(0.2, 0.8)):
    lo, hi = fused_range
    fused = lo + (hi - lo) * torch.rand(1, 1, size, size, generator=g, dtype=torch.float64)
    sides = [torch.randn(1, 1, math.ceil(size / 2**t), math.ceil(size / 2**t), generator=g, dtype=torch.float64)
             for t in range(T)]
    sides2 = [torch.randn_like(s) for s in sides]
    return fused, sides, sides2


class TestTotalLosses:
    def test_equals_sum_of_terms(self):
        g = torch.Generator().manual_seed(3)
        fused, f2c, c2f = _random_result(3, 8, g)
        ys = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)
        res = ForwardResult(fused, torch.logit(fused), f2c, c2f)
        manual = weighted_bce(fused, ys, 0.3, 0.6)
        for s in f2c + c2f:
            manual = manual + weighted_bce(torch.sigmoid(up(s, (8, 8)) if s.shape[-1] != 8 else s), ys, 0.3, 0.6)
        torch.testing.assert_close(total_losses(res, ys, 0.3, 0.6), manual)

    def test_requires_exactly_one_weighting(self):
        res = ForwardResult(torch.full((1, 1, 4, 4), 0.5), torch.zeros(1, 1, 4, 4), [], [])
        with pytest.raises(ValueError):
            total_losses(res, torch.zeros(1, 1, 4, 4))
        with pytest.raises(ValueError):
            total_losses(res, torch.zeros(1, 1, 4, 4), 0.5, 0.5, weight_map=torch.ones(1, 1, 4, 4))

    @pytest.mark.parametrize("T", [5, 4], ids=["recurrent", "nonrecurrent"])
    def test_gradient_finite_difference(self, T):
        """Full loss (fused map plus every side output) against central differences."""
        g = torch.Generator().manual_seed(T)
        for _ in range(20):
            fused, f2c, c2f = _random_result(T, 8, g)
            ys = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)
            a, b = torch.rand(2, generator=g, dtype=torch.float64).tolist()
            leaves = [fused, *f2c, *c2f]

            def fn(*ts):
                return total_losses(ForwardResult(ts[0], torch.logit(ts[0]), list(ts[1:1 + T]), list(ts[1 + T:])),
                                    ys, a, b)

            tracked = [t.clone().requires_grad_() for t in leaves]
            ana = torch.autograd.grad(fn(*tracked), tracked)
            for k, leaf in enumerate(leaves):
                def single(v, k=k):
                    args = list(leaves)
                    args[k] = v
                    return fn(*args)

                num = central_difference(single, leaf.clone())
                assert relative_error(num, ana[k]) <= 1e-4
