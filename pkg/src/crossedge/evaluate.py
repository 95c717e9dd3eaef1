"""Boundary benchmark: NMS thinning, tolerance matching, ODS/OIS F-measures, speed and size."""

from __future__ import annotations

import csv
import json
import platform
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree

from .nets import NetConfig, param_count, predict
from .params import ParameterVector


@dataclass(frozen=True)
class EvalConfig:
    thresholds: int = 99
    max_dist: float = 0.0075  # fraction of the image diagonal; 0.011 for NYUD
    apply_thinning: bool = False  # set when maps have not been through nms_thin yet

    def __post_init__(self):
        if self.thresholds < 1:
            raise ValueError("need at least one threshold")
        if not 0.0 < self.max_dist < 1.0:
            raise ValueError("max_dist must lie in (0, 1)")

    def threshold_values(self) -> np.ndarray:
        n = self.thresholds
        return np.arange(1, n + 1, dtype=np.float64) / (n + 1)


@dataclass
class EvalReport:
    ods_f: float
    ois_f: float
    ods_threshold: float
    pr_points: list[tuple[float, float, float, float]]
    throughput_fps: float | None = None
    param_count: int | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_points"] = [list(p) for p in self.pr_points]
        return d

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / f"{stem}_report.json"
        payload = self.to_dict()
        payload["host"] = {"machine": platform.machine(), "processor": platform.processor(),
                           "python": platform.python_version(), "torch_threads": torch.get_num_threads()}
        report.write_text(json.dumps(payload, indent=2))
        curve = out_dir / f"{stem}_pr.csv"
        with open(curve, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall", "f"])
            w.writerows(self.pr_points)
        return report, curve


# -- thinning -------------------------------------------------------------------


def conv_tri(img: np.ndarray, r: int) -> np.ndarray:
    """Separable triangle filter of radius ``r`` (``r=1`` is ``[1, 2, 1] / 4``), edges replicated."""
    if r <= 0:
        return img.astype(np.float64, copy=True)
    k = np.concatenate([np.arange(1, r + 2), np.arange(r, 0, -1)]).astype(np.float64)
    k /= k.sum()
    out = ndimage.convolve1d(img.astype(np.float64), k, axis=0, mode="nearest")
    return ndimage.convolve1d(out, k, axis=1, mode="nearest")


def edge_orientation(prob: np.ndarray, r: int = 2) -> np.ndarray:
    """Angle in [0, pi) of the edge normal, from second derivatives of the smoothed map.

    Angle 0 points along +x (columns), pi/2 along +y (rows).
    """
    s = conv_tri(prob, r)
    oy, ox = np.gradient(s)
    oxy, oxx = np.gradient(ox)
    oyy, _ = np.gradient(oy)
    return np.mod(np.arctan(oyy * np.sign(-oxy) / (oxx + 1e-5)), np.pi)


_PRINCIPAL = ((0, 1), (1, 0), (1, 1), (1, -1))


def nms_thin(prob: np.ndarray, radius: int = 1, smooth: int = 1, multiplier: float = 1.01) -> np.ndarray:
    """Suppression pass repeated until nothing changes, so thinning is idempotent.

    Each pass only zeroes pixels, hence the loop terminates.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if not np.all(np.isfinite(prob)):
        raise ValueError("probability map has non-finite values")
    out = _nms_pass(prob, radius, smooth, multiplier)
    while True:
        nxt = _nms_pass(out, radius, smooth, multiplier)
        if np.array_equal(nxt, out):
            return out
        out = nxt


def _nms_pass(prob: np.ndarray, radius: int, smooth: int, multiplier: float) -> np.ndarray:
    """Keep only pixels that are maximal across the local edge direction.

    Maximality is tested against bilinearly interpolated neighbours at
    ``+-1..radius`` pixels along the normal, on a lightly smoothed copy of the
    map (so flat ridges resolve to their centre). A pixel is also kept when it
    is not below its raw neighbours along the normal and is a strict raw
    maximum along one of the four principal directions, so one-pixel-wide
    curves (including staircase corners) pass through unchanged. Survivors keep
    their original value.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if not np.all(np.isfinite(prob)):
        raise ValueError("probability map has non-finite values")
    s = conv_tri(prob, smooth)
    theta = edge_orientation(prob)
    rows, cols = np.nonzero(prob > 0)
    keep = np.zeros(prob.shape, dtype=bool)
    if rows.size == 0:
        return np.zeros_like(prob)
    c, si = np.cos(theta[rows, cols]), np.sin(theta[rows, cols])
    centre = s[rows, cols] * multiplier
    raw = prob[rows, cols]
    ok_smooth = np.ones(rows.size, dtype=bool)
    ok_normal = np.ones(rows.size, dtype=bool)
    for d in range(-radius, radius + 1):
        if d == 0:
            continue
        coords = [rows + d * si, cols + d * c]
        ok_smooth &= centre >= ndimage.map_coordinates(s, coords, order=1, mode="nearest")
        ok_normal &= raw >= ndimage.map_coordinates(prob, coords, order=1, mode="nearest")
    padded = np.pad(prob, 1, mode="edge")
    strict_any = np.zeros(rows.size, dtype=bool)
    for dr, dc in _PRINCIPAL:
        a = padded[rows + 1 + dr, cols + 1 + dc]
        b = padded[rows + 1 - dr, cols + 1 - dc]
        strict_any |= (raw > a) & (raw > b)
    ok = ok_smooth | (ok_normal & strict_any)
    keep[rows[ok], cols[ok]] = True
    return np.where(keep, prob, 0.0)


# -- correspondence ----------------------------------------------------------------


@dataclass(frozen=True)
class MatchCounts:
    """``tp_pred``: predicted edge pixels matched in some annotation; ``tp_gt``: matched annotation pixels."""

    tp_pred: int
    fp: int
    tp_gt: int
    fn: int

    @property
    def n_pred(self) -> int:
        return self.tp_pred + self.fp

    @property
    def n_gt(self) -> int:
        return self.tp_gt + self.fn


def greedy_match(pred_pts: np.ndarray, gt_pts: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """One-to-one matching of pixel coordinates within ``radius`` with the largest number of pairs.

    Returns boolean "matched" flags for the predicted and ground-truth points.
    """
    pm = np.zeros(len(pred_pts), dtype=bool)
    gm = np.zeros(len(gt_pts), dtype=bool)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return pm, gm
    if radius < 1.0:
        # only exact coincidences are in range
        gt_index = {tuple(p): i for i, p in enumerate(gt_pts.tolist())}
        for i, p in enumerate(pred_pts.tolist()):
            j = gt_index.get(tuple(p))
            if j is not None:
                pm[i] = gm[j] = True
        return pm, gm
    pairs = cKDTree(pred_pts).sparse_distance_matrix(cKDTree(gt_pts), radius, output_type="ndarray")
    if len(pairs) == 0:
        return pm, gm
    # maximum-cardinality one-to-one assignment on the "within radius" graph;
    # nearest-first greedy can strand several points on dense fixtures
    # (coincident points have distance 0, so the edge weights are set to 1 explicitly)
    graph = csr_matrix((np.ones(len(pairs)), (pairs["i"], pairs["j"])), shape=(len(pred_pts), len(gt_pts)))
    partner = maximum_bipartite_matching(graph, perm_type="column")
    pm = partner >= 0
    gm[partner[pm]] = True
    return pm, gm


def correspond_match(pred_bin: np.ndarray, gt_maps: np.ndarray, max_dist: float = 0.0075) -> MatchCounts:
    """Match a binary edge map against each annotator map within ``max_dist`` x diagonal pixels."""
    pred_bin = np.asarray(pred_bin).astype(bool)
    gt_maps = np.asarray(gt_maps).astype(bool)
    if gt_maps.ndim == 2:
        gt_maps = gt_maps[None]
    if gt_maps.shape[1:] != pred_bin.shape:
        raise ValueError(f"prediction {pred_bin.shape} vs annotations {gt_maps.shape[1:]}")
    radius = max_dist * float(np.hypot(*pred_bin.shape))
    pred_pts = np.argwhere(pred_bin)
    matched_any = np.zeros(len(pred_pts), dtype=bool)
    tp_gt = n_gt = 0
    for g in gt_maps:
        gt_pts = np.argwhere(g)
        pm, gm = greedy_match(pred_pts, gt_pts, radius)
        matched_any |= pm
        tp_gt += int(gm.sum())
        n_gt += len(gt_pts)
    tp_pred = int(matched_any.sum())
    return MatchCounts(tp_pred, len(pred_pts) - tp_pred, tp_gt, n_gt - tp_gt)


# -- ODS / OIS -------------------------------------------------------------------------


def _prf(cnt_p, sum_p, cnt_r, sum_r):
    cnt_p, sum_p, cnt_r, sum_r = (np.asarray(a, dtype=np.float64) for a in (cnt_p, sum_p, cnt_r, sum_r))
    p = np.divide(cnt_p, sum_p, out=np.zeros_like(cnt_p), where=sum_p > 0)
    r = np.divide(cnt_r, sum_r, out=np.zeros_like(cnt_r), where=sum_r > 0)
    f = np.divide(2 * p * r, p + r, out=np.zeros_like(p), where=(p + r) > 0)
    return p, r, f


def threshold_counts(prob: np.ndarray, gt_maps: np.ndarray, config: EvalConfig) -> np.ndarray:
    """``(thresholds, 4)`` integer array of (tp_pred, n_pred, tp_gt, n_gt) per threshold."""
    prob = np.asarray(prob, dtype=np.float64)
    if config.apply_thinning:
        prob = nms_thin(prob)
    out = np.zeros((config.thresholds, 4), dtype=np.int64)
    for k, tau in enumerate(config.threshold_values()):
        m = correspond_match(prob >= tau, gt_maps, config.max_dist)
        out[k] = (m.tp_pred, m.n_pred, m.tp_gt, m.n_gt)
    return out


def ods_ois(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], config: EvalConfig = EvalConfig()) -> EvalReport:
    """Dataset-optimal and image-optimal F over a uniform threshold sweep.

    ``gts[i]`` is a ``(K, H, W)`` stack of binary annotator maps (or a single map).
    """
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if len(preds) != len(gts):
        raise ValueError("predictions and annotations differ in count")
    counts = np.stack([threshold_counts(p, g, config) for p, g in zip(preds, gts)])  # (n, T, 4)
    total = counts.sum(axis=0)
    p, r, f = _prf(total[:, 0], total[:, 1], total[:, 2], total[:, 3])
    best = int(np.argmax(f))
    _, _, f_img = _prf(counts[..., 0], counts[..., 1], counts[..., 2], counts[..., 3])
    taus = config.threshold_values()
    points = [(float(t), float(a), float(b), float(c)) for t, a, b, c in zip(taus, p, r, f)]
    return EvalReport(ods_f=float(f[best]), ois_f=float(f_img.max(axis=1).mean()),
                      ods_threshold=float(taus[best]), pr_points=points, config=asdict(config))


# -- inference helpers ----------------------------------------------------------------


def multiscale_infer(predict_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                     scales: Sequence[float] = (0.5, 1.0, 1.5)) -> torch.Tensor:
    """Average of ``predict_fn`` run on bilinearly rescaled copies of ``x``, mapped back to full size."""
    if not scales:
        raise ValueError("need at least one scale")
    size = tuple(x.shape[-2:])
    acc = None
    for s in scales:
        if s == 1.0:
            out = predict_fn(x)
        else:
            xs = F.interpolate(x, scale_factor=s, mode="bilinear", align_corners=False)
            out = F.interpolate(predict_fn(xs), size=size, mode="bilinear", align_corners=False)
        acc = out if acc is None else acc + out
    return acc / len(scales)


def bench(cfg: NetConfig, theta: ParameterVector, input_shape=(1, 3, 320, 480),
          repeats: int = 10, warmup: int = 2) -> tuple[float, int]:
    """Median-of-runs throughput (images / s) on this host and the exact parameter count."""
    if repeats < 10:
        raise ValueError("use at least 10 timed repeats")
    x = torch.rand(input_shape, generator=torch.Generator().manual_seed(0))
    for _ in range(warmup):
        predict(x, theta, cfg)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(x, theta, cfg)
        times.append(time.perf_counter() - t0)
    return input_shape[0] / float(np.median(times)), param_count(cfg)


def predict_maps(theta: ParameterVector, cfg: NetConfig, images: Sequence[np.ndarray],
                 scales: Sequence[float] | None = None, chunk: int = 32) -> list[np.ndarray]:
    """Edge probability maps for ``H x W x 3`` images (optionally multi-scale), not yet thinned."""
    out: list[np.ndarray] = []
    by_shape: dict[tuple, list[int]] = {}
    for i, im in enumerate(images):
        by_shape.setdefault(im.shape, []).append(i)
    maps: dict[int, np.ndarray] = {}
    for idx in by_shape.values():
        for k in range(0, len(idx), chunk):
            part = idx[k:k + chunk]
            x = torch.from_numpy(np.stack([images[i] for i in part]).transpose(0, 3, 1, 2).astype(np.float32))
            if scales is None:
                p = predict(x, theta, cfg)
            else:
                p = multiscale_infer(lambda z: predict(z, theta, cfg), x, scales)
            for i, m in zip(part, p[:, 0].double().numpy()):
                maps[i] = m
    out = [maps[i] for i in range(len(images))]
    return out


def evaluate_model(theta: ParameterVector, cfg: NetConfig, dataset, config: EvalConfig = EvalConfig(),
                   scales: Sequence[float] | None = None) -> EvalReport:
    """Predict, thin with :func:`nms_thin`, and score a dataset of annotated images."""
    preds = [nms_thin(p) for p in predict_maps(theta, cfg, [s.image for s in dataset], scales)]
    report = ods_ois(preds, [s.annotations for s in dataset], replace(config, apply_thinning=False))
    report.param_count = param_count(cfg)
    return report
