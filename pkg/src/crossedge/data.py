"""Annotated edge datasets: loading, splitting, photometric augmentation and a synthetic corpus."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import color, draw


class DataIntegrityError(ValueError):
    pass


class LoadError(DataIntegrityError):
    pass


@dataclass
class AnnotatedImage:
    """An RGB image in [0, 1] with ``K`` binary annotator maps of the same size."""

    image: np.ndarray  # (H, W, 3) float64
    annotations: np.ndarray  # (K, H, W) uint8 in {0, 1}
    name: str = ""
    consensus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        ann = np.asarray(self.annotations)
        if ann.ndim == 2:
            ann = ann[None]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataIntegrityError(f"{self.name or 'sample'}: image must be HxWx3, got {self.image.shape}")
        if ann.ndim != 3 or ann.shape[0] < 1:
            raise DataIntegrityError(f"{self.name or 'sample'}: need at least one annotation map")
        if ann.shape[1:] != self.image.shape[:2]:
            raise DataIntegrityError(
                f"{self.name or 'sample'}: annotation size {ann.shape[1:]} != image size {self.image.shape[:2]}")
        if not np.all(np.isfinite(self.image)):
            raise DataIntegrityError(f"{self.name or 'sample'}: non-finite pixel values")
        if not np.isin(ann, (0, 1)).all():
            raise DataIntegrityError(f"{self.name or 'sample'}: annotation values must be 0 or 1")
        self.annotations = ann.astype(np.uint8)
        self.consensus = self.annotations.mean(axis=0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def num_annotators(self) -> int:
        return self.annotations.shape[0]


@dataclass(frozen=True)
class EdgeTarget:
    values: np.ndarray
    hardness: str = "hard"

    def __post_init__(self):
        if self.hardness not in ("hard", "soft"):
            raise ValueError(f"unknown hardness {self.hardness!r}")


@dataclass
class DatasetSplit:
    train: list[AnnotatedImage]
    validation: list[AnnotatedImage]
    seed: int


@dataclass(frozen=True)
class AugmentationConfig:
    jitter_low: float = 0.5
    jitter_high: float = 1.5
    gray_prob: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.jitter_low <= self.jitter_high:
            raise ValueError("need 0 <= jitter_low <= jitter_high")
        if not 0.0 <= self.gray_prob <= 1.0:
            raise ValueError("gray_prob must lie in [0, 1]")


def consensus_binarize(consensus: np.ndarray, threshold: float = 0.2) -> EdgeTarget:
    """Pixels whose annotator agreement reaches ``threshold`` become edges."""
    consensus = np.asarray(consensus, dtype=np.float64)
    if not np.all(np.isfinite(consensus)):
        raise DataIntegrityError("consensus map contains non-finite values")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return EdgeTarget((consensus >= threshold).astype(np.float64), "hard")


def split_train_val(dataset: Sequence[AnnotatedImage], val_fraction: float = 0.3, seed: int = 0) -> DatasetSplit:
    if not dataset:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    n = len(dataset)
    n_val = math.floor(val_fraction * n + 0.5)
    if n_val == 0 or n_val == n:
        raise ValueError(f"val_fraction={val_fraction} leaves an empty side for N={n}")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return DatasetSplit([dataset[i] for i in train_idx], [dataset[i] for i in val_idx], seed)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def augment(sample: AnnotatedImage, config: AugmentationConfig, rng: np.random.Generator) -> AnnotatedImage:
    """Brightness, contrast, saturation and hue jitter plus random grayscale; labels untouched.

    All four factors are drawn from ``U[jitter_low, jitter_high]``. The hue factor
    rotates hue by ``(factor - 1) / 2`` of a turn so that 1.0 is the identity.
    The random draws happen in a fixed order whatever the config, so a seed
    always consumes the same stream.
    """
    fb, fc, fs, fh = rng.uniform(config.jitter_low, config.jitter_high, size=4)
    to_gray = rng.random() < config.gray_prob

    img = np.clip(sample.image * fb, 0.0, 1.0)
    img = np.clip(_gray(img).mean() + fc * (img - _gray(img).mean()), 0.0, 1.0)
    g = _gray(img)[..., None]
    img = np.clip(g + fs * (img - g), 0.0, 1.0)
    if fh != 1.0:
        hsv = color.rgb2hsv(img)
        hsv[..., 0] = np.mod(hsv[..., 0] + (fh - 1.0) / 2.0, 1.0)
        img = np.clip(color.hsv2rgb(hsv), 0.0, 1.0)
    if to_gray:
        img = np.repeat(_gray(img)[..., None], 3, axis=2)
    out = replace(sample, image=np.clip(img, 0.0, 1.0), annotations=sample.annotations.copy())
    return out


def random_crop(sample: AnnotatedImage, size: int, rng: np.random.Generator) -> AnnotatedImage:
    h, w = sample.shape
    if h < size or w < size:
        raise DataIntegrityError(f"{sample.name}: {h}x{w} smaller than crop {size}")
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return replace(sample, image=sample.image[i:i + size, j:j + size].copy(),
                   annotations=sample.annotations[:, i:i + size, j:j + size].copy())


# -- synthetic shapes -----------------------------------------------------------


def inner_boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-neighbour outside it."""
    mask = mask.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return mask & ~eroded


def _smooth_field(rng, size, sigma, amp):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    f /= np.abs(f).max() + 1e-12
    return amp * f


def _shape_mask(rng, size, margin):
    kind = rng.integers(0, 2)
    lo, hi = max(4, size // 10), max(6, size // 4)
    cy, cx = rng.uniform(margin + lo, size - margin - lo, size=2)
    mask = np.zeros((size, size), dtype=bool)
    if kind == 0:
        ry, rx = rng.uniform(lo, hi, size=2)
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=mask.shape, rotation=rng.uniform(0, np.pi))
    else:
        n = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        rad = rng.uniform(lo, hi, size=n)
        rr, cc = draw.polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=mask.shape)
    mask[rr, cc] = True
    return mask


# Backgrounds are grainy and fills are smooth shading, so which side of a
# boundary belongs to the shape is decidable from a small neighbourhood.
BG_NOISE = 0.08
# every fill is brighter than the background it sits on, channel by channel;
# a low contrast floor keeps the toy task from saturating
FILL_LIFT = (0.1, 0.3)


def synth_scene(rng: np.random.Generator, size: int, n_shapes: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Render up to ``n_shapes`` separated shapes; returns the image and each shape's mask."""
    margin = 2
    inner = np.zeros((size, size), dtype=bool)
    inner[margin:-margin, margin:-margin] = True
    masks: list[np.ndarray] = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(200):
        if len(masks) == n_shapes:
            break
        m = ndimage.binary_fill_holes(_shape_mask(rng, size, margin))
        if m.sum() < 30 or (m & ~inner).any():
            continue
        # reject slivers: most of the shape must survive a 2-pixel erosion
        if ndimage.binary_erosion(m, iterations=2).sum() < 0.25 * m.sum():
            continue
        # two-pixel gap keeps neighbouring boundaries from touching
        if (ndimage.binary_dilation(m, iterations=2) & occupied).any():
            continue
        masks.append(m)
        occupied |= m

    bg_color = rng.uniform(0.05, 0.5, size=3)
    img = np.empty((size, size, 3))
    for c in range(3):
        img[..., c] = bg_color[c] + _smooth_field(rng, size, size / 8, 0.12) + BG_NOISE * rng.standard_normal((size, size))
    yy, xx = np.mgrid[0:size, 0:size] / size
    for m in masks:
        fill = np.minimum(bg_color + rng.uniform(FILL_LIFT[0], FILL_LIFT[1], size=3), 0.95)
        gy, gx = rng.uniform(-0.1, 0.1, size=2)
        shade = gy * yy + gx * xx
        for c in range(3):
            img[..., c][m] = (fill[c] + shade)[m]
    return np.clip(img, 0.0, 1.0), masks


def synth_sample(rng: np.random.Generator, size: int, n_shapes: int, name: str = "") -> AnnotatedImage:
    img, masks = synth_scene(rng, size, n_shapes)
    edges = np.zeros((size, size), dtype=np.uint8)
    for m in masks:
        edges |= inner_boundary(m).astype(np.uint8)
    return AnnotatedImage(img, edges[None], name=name)


def synth_generate(count: int, size: int = 64, seed: int = 0,
                   shapes: tuple[int, int] = (1, 4)) -> list[AnnotatedImage]:
    """Filled ellipses and convex polygons on a textured background.

    The single annotation of each sample is the exact inner boundary of every shape.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if size < 16:
        raise ValueError("size must be >= 16")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n_shapes = int(rng.integers(shapes[0], shapes[1] + 1))
        out.append(synth_sample(rng, size, n_shapes, name=f"synth_{seed}_{i:05d}"))
    return out


# -- BSDS-style directory layout ---------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def load_bsds_style(root: str | Path) -> list[AnnotatedImage]:
    """Read ``images/<id>.png`` with annotator maps ``gt/<id>/<annotator>.png`` (nonzero = edge)."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        return []
    out = []
    for img_path in sorted(img_dir.glob("*.png")):
        sid = img_path.stem
        rgb = _read_png(img_path)
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[..., None], 3, axis=2)
        rgb = rgb[..., :3].astype(np.float64) / 255.0
        gt_paths = sorted((root / "gt" / sid).glob("*.png"))
        if not gt_paths:
            raise LoadError(f"no annotations for {img_path}")
        maps = []
        for gp in gt_paths:
            g = _read_png(gp)
            if g.ndim == 3:
                g = g[..., 0]
            if g.shape != rgb.shape[:2]:
                raise LoadError(f"{gp}: annotation size {g.shape} does not match image size {rgb.shape[:2]}")
            maps.append((g != 0).astype(np.uint8))
        out.append(AnnotatedImage(rgb, np.stack(maps), name=sid))
    return out


def write_bsds_style(samples: Sequence[AnnotatedImage], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        sid = s.name or f"{i:05d}"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), "RGB").save(root / "images" / f"{sid}.png")
        gdir = root / "gt" / sid
        gdir.mkdir(parents=True, exist_ok=True)
        for k, a in enumerate(s.annotations):
            Image.fromarray((a * 255).astype(np.uint8), "L").save(gdir / f"{k}.png")


def to_tensor_batch(samples: Sequence[AnnotatedImage], dtype=None):
    """Stack images into an ``(N, 3, H, W)`` tensor."""
    import torch

    arr = np.stack([s.image.transpose(2, 0, 1) for s in samples])
    return torch.from_numpy(arr).to(dtype or torch.float32)
