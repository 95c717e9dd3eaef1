"""Thinning, correspondence matching, ODS/OIS, reports and inference helpers."""

import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossedge.evaluate import (EvalConfig, EvalReport, bench, correspond_match, evaluate_model, greedy_match,
                                multiscale_infer, nms_thin, ods_ois, threshold_counts)
from crossedge.nets import init_params, net_config, predict, zero_params

from oracles import brute_force_ods_ois, optimal_match_count


def random_fixture(rng, size=12, density=0.15):
    gt = rng.random((size, size)) < density
    pred = gt.copy()
    # move, drop and add a few pixels
    for r, c in np.argwhere(gt):
        u = rng.random()
        if u < 0.3:
            pred[r, c] = False
            rr, cc = np.clip([r + rng.integers(-1, 2), c + rng.integers(-1, 2)], 0, size - 1)
            pred[rr, cc] = True
        elif u < 0.4:
            pred[r, c] = False
    pred |= rng.random((size, size)) < 0.03
    return pred, gt


class TestConfig:
    def test_thresholds_inside_unit_interval(self):
        t = EvalConfig().threshold_values()
        assert len(t) == 99 and t[0] > 0 and t[-1] < 1
        np.testing.assert_allclose(np.diff(t), 0.01)

    def test_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(thresholds=0)
        with pytest.raises(ValueError):
            EvalConfig(max_dist=1.5)


class TestNMS:
    def test_thin_line_unchanged(self):
        m = np.zeros((15, 15))
        m[:, 7] = 0.8
        np.testing.assert_array_equal(nms_thin(m), m)

    @pytest.mark.parametrize("profile", [(0.6, 0.6, 0.6), (0.5, 0.9, 0.5)])
    def test_three_wide_ridge(self, profile):
        m = np.zeros((15, 15))
        m[:, 6:9] = profile
        out = nms_thin(m)
        np.testing.assert_array_equal(out[:, 7], m[:, 7])
        assert (out[:, 6] == 0).all() and (out[:, 8] == 0).all()

    def test_cross_section_maxima_survive(self):
        """Brute force over straight ridges with random profiles: every strict maximum of the
        cross-section survives, suppressed pixels are never such maxima, and each row keeps a pixel."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            profile = rng.uniform(0.1, 1.0, 5)
            m = np.zeros((20, 20))
            m[:, 8:13] = profile
            out = nms_thin(m)
            interior = out[4:-4, 8:13]
            padded = np.concatenate([[0.0], profile, [0.0]])
            maxima = [k for k in range(5) if padded[k + 1] > max(padded[k], padded[k + 2])]
            kept = np.flatnonzero(interior[0] > 0)
            assert set(maxima) <= set(kept) and len(kept) >= 1
            assert (interior == interior[0]).all()

    def test_zero_map(self):
        np.testing.assert_array_equal(nms_thin(np.zeros((6, 6))), 0.0)

    def test_non_finite_rejected(self):
        m = np.zeros((4, 4))
        m[1, 1] = np.nan
        with pytest.raises(ValueError):
            nms_thin(m)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_subset_and_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        from scipy.ndimage import gaussian_filter

        m = gaussian_filter(rng.random((16, 16)), 1.0)
        out = nms_thin(m)
        assert ((out == 0) | (out == m)).all() and (out <= m).all()
        np.testing.assert_array_equal(nms_thin(out), out)


class TestMatching:
    def test_identity(self):
        gt = np.eye(8, dtype=bool)
        m = correspond_match(gt, gt[None])
        assert (m.tp_pred, m.fp, m.tp_gt, m.fn) == (8, 0, 8, 0)

    def test_empty_prediction(self):
        gt = np.eye(8, dtype=bool)
        m = correspond_match(np.zeros_like(gt), gt)
        assert (m.tp_pred, m.fp, m.fn) == (0, 0, 8)

    def test_shift_within_tolerance(self):
        gt = np.zeros((12, 12), bool)
        gt[2:10, 5] = True
        pred = np.roll(gt, 1, axis=1)
        max_dist = math.sqrt(2) / math.hypot(12, 12)
        m = correspond_match(pred, gt, max_dist)
        opt = optimal_match_count(np.argwhere(pred), np.argwhere(gt), math.sqrt(2))
        assert m.tp_gt == opt == 8

    def test_greedy_close_to_optimal(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred, gt = random_fixture(rng, int(rng.integers(4, 13)))
            radius = float(rng.choice([1.0, math.sqrt(2), 2.0]))
            pm, gm = greedy_match(np.argwhere(pred), np.argwhere(gt), radius)
            assert pm.sum() == gm.sum()
            assert optimal_match_count(np.argwhere(pred), np.argwhere(gt), radius) - gm.sum() <= 1

    def test_one_to_one_within_radius(self):
        rng = np.random.default_rng(2)
        pred, gt = random_fixture(rng)
        pp, gp = np.argwhere(pred), np.argwhere(gt)
        pm, gm = greedy_match(pp, gp, 1.5)
        # re-derive a witness matching: every matched point has a matched partner within range
        assert pm.sum() == gm.sum() <= min(len(pp), len(gp))

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pred, gt = random_fixture(rng)
            tps = [correspond_match(pred, gt, d).tp_gt for d in (0.01, 0.06, 0.09, 0.13, 0.2)]
            assert tps == sorted(tps)

    def test_multiple_annotators(self):
        a = np.zeros((6, 6), bool)
        a[1, :] = True
        b = np.zeros((6, 6), bool)
        b[4, :] = True
        pred = a | b
        m = correspond_match(pred, np.stack([a, b]))
        assert m.tp_pred == 12 and m.fp == 0  # each pixel matches in some annotation
        assert m.tp_gt == 12 and m.fn == 0

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            correspond_match(np.zeros((4, 4)), np.zeros((1, 4, 5)))


class TestODSOIS:
    def test_perfect_predictions(self):
        rng = np.random.default_rng(0)
        gts = [(rng.random((10, 10)) < 0.2).astype(float)[None] for _ in range(3)]
        rep = ods_ois([g[0] for g in gts], gts)
        assert rep.ods_f == 1.0 and rep.ois_f == 1.0

    def test_single_image(self):
        rng = np.random.default_rng(1)
        gt = (rng.random((10, 10)) < 0.2)[None]
        rep = ods_ois([rng.random((10, 10))], [gt])
        assert rep.ods_f == rep.ois_f

    def test_empty_predictions_score_zero(self):
        gt = np.eye(5)[None]
        assert ods_ois([np.zeros((5, 5))], [gt]).ods_f == 0.0

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            ods_ois([], [])

    def test_brute_force_sweep(self):
        rng = np.random.default_rng(2)
        preds = [rng.random((8, 8)) for _ in range(2)]
        gts = [(rng.random((8, 8)) < 0.25)[None] for _ in range(2)]
        cfg = EvalConfig(thresholds=9, max_dist=1.5 / math.hypot(8, 8))
        counts = []
        for p, g in zip(preds, gts):
            per_t = []
            for tau in [k / 10 for k in range(1, 10)]:
                pb = p >= tau
                n_opt = optimal_match_count(np.argwhere(pb), np.argwhere(g[0]), 1.5)
                per_t.append((n_opt, int(pb.sum()), n_opt, int(g.sum())))
            counts.append(per_t)
        exp_ods, exp_ois = brute_force_ods_ois(counts)
        rep = ods_ois(preds, gts, cfg)
        # greedy may lose at most one match per fixture and threshold
        assert rep.ods_f == pytest.approx(exp_ods, abs=0.03)
        assert rep.ois_f == pytest.approx(exp_ois, abs=0.03)

    def test_hand_counts(self):
        """Known counts per threshold, fed through the reduction."""
        gt = np.zeros((1, 4, 4), bool)
        gt[0, 0, :] = True
        p = np.zeros((4, 4))
        p[0, :2] = 0.8
        p[0, 2:] = 0.3
        p[3, 3] = 0.6
        cfg = EvalConfig(thresholds=3)  # taus 0.25, 0.5, 0.75
        counts = threshold_counts(p, gt, cfg)
        assert counts.tolist() == [[4, 5, 4, 4], [2, 3, 2, 4], [2, 2, 2, 4]]
        rep = ods_ois([p], [gt], cfg)
        assert rep.ods_f == pytest.approx(2 * 0.8 * 1.0 / 1.8)
        assert rep.ods_threshold == 0.25

    def test_report_invariants_and_files(self, tmp_path):
        rng = np.random.default_rng(3)
        rep = ods_ois([rng.random((8, 8))], [(rng.random((8, 8)) < 0.3)[None]], EvalConfig(thresholds=9))
        for _, p, r, f in rep.pr_points:
            assert 0 <= p <= 1 and 0 <= r <= 1
            assert f == pytest.approx(2 * p * r / (p + r) if p + r else 0.0)
        assert rep.ods_f <= max(pt[3] for pt in rep.pr_points)
        js, pr = rep.write(tmp_path, "x")
        payload = json.loads(js.read_text())
        assert payload["ods_f"] == rep.ods_f and "host" in payload and payload["config"]["thresholds"] == 9
        with open(pr) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["threshold", "precision", "recall", "f"] and len(rows) == 10

    def test_ground_truth_never_lowers_ods(self):
        rng = np.random.default_rng(4)
        gts = [(rng.random((8, 8)) < 0.2)[None] for _ in range(3)]
        preds = [rng.random((8, 8)) for _ in range(3)]
        base = ods_ois(preds, gts).ods_f
        improved = ods_ois([gts[0][0].astype(float), *preds[1:]], gts).ods_f
        assert improved >= base


class TestInference:
    def test_single_scale_identity(self):
        cfg = net_config("nonrecurrent", "tiny")
        th = init_params(cfg, 0)
        x = torch.rand(1, 3, 32, 32)
        fn = lambda z: predict(z, th, cfg)  # noqa: E731
        torch.testing.assert_close(multiscale_infer(fn, x, (1.0,)), fn(x))

    def test_constant_output(self):
        fn = lambda z: torch.full((z.shape[0], 1, *z.shape[-2:]), 0.5)  # noqa: E731
        out = multiscale_infer(fn, torch.rand(2, 3, 20, 20))
        torch.testing.assert_close(out, torch.full((2, 1, 20, 20), 0.5))

    def test_matches_external_average(self):
        cfg = net_config("nonrecurrent", "tiny")
        th = init_params(cfg, 1)
        x = torch.rand(1, 3, 32, 32)
        fn = lambda z: predict(z, th, cfg)  # noqa: E731
        scales = (0.5, 1.0, 1.5)
        ext = sum(torch.nn.functional.interpolate(fn(torch.nn.functional.interpolate(
            x, scale_factor=s, mode="bilinear", align_corners=False)), size=(32, 32), mode="bilinear",
            align_corners=False) if s != 1.0 else fn(x) for s in scales) / 3
        torch.testing.assert_close(multiscale_infer(fn, x, scales), ext, atol=1e-6, rtol=0)

    def test_bench(self):
        tiny, large = net_config("nonrecurrent", "tiny"), net_config("nonrecurrent", "large")
        fps_t, n_t = bench(tiny, zero_params(tiny), (1, 3, 64, 64), repeats=10)
        fps_l, n_l = bench(large, zero_params(large), (1, 3, 64, 64), repeats=10)
        assert n_t < n_l and fps_t >= fps_l
        with pytest.raises(ValueError):
            bench(tiny, zero_params(tiny), repeats=3)

    def test_evaluate_model_runs(self):
        from crossedge.data import synth_generate

        cfg = net_config("nonrecurrent", "tiny")
        rep = evaluate_model(init_params(cfg, 0), cfg, synth_generate(2, 32, seed=0))
        assert 0 <= rep.ods_f <= 1 and rep.param_count > 0
