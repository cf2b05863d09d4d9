"""Synthetic lateral-spine phantoms with exact masks.

A phantom is a column of slightly rotated bright quadrilaterals ("vertebral
bodies") on a smooth dark background with additive Gaussian noise. The mask
marks exactly the pixels whose centres fall inside a quadrilateral, so it is
a trivially correct ground truth for the image.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .imaging import BinaryMask, GrayImage, ParameterError, write_mask, write_png


@dataclass(frozen=True)
class PhantomParams:
    width: int = 64
    height: int = 64
    n_vertebrae: int = 5
    body_height: tuple[float, float] = (0.09, 0.12)   # fraction of image height
    aspect: tuple[float, float] = (1.3, 1.8)           # width / height
    gap: tuple[float, float] = (0.04, 0.06)            # disc space, fraction of height
    max_tilt_deg: float = 8.0
    fracture_prob: float = 0.1
    texture_amplitude: float = 12.0
    noise_sigma: float = 6.0
    background_level: float = 50.0
    vertebra_level: tuple[float, float] = (150.0, 190.0)
    hard_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ParameterError("phantom must be at least 8x8")
        if self.n_vertebrae < 3:
            raise ParameterError("n_vertebrae must be >= 3")
        for name in ("body_height", "aspect", "gap", "vertebra_level"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ParameterError(f"{name} range {lo}..{hi} is invalid")
        if not 0 <= self.fracture_prob <= 1:
            raise ParameterError("fracture_prob must be in [0, 1]")
        if self.texture_amplitude < 0 or self.noise_sigma < 0:
            raise ParameterError("texture_amplitude and noise_sigma must be >= 0")
        if self.vertebra_level[0] <= self.background_level + self.texture_amplitude:
            raise ParameterError("vertebrae must be brighter than the background")


def _quad(w, h, tilt, jitter):
    hw, hh = w / 2, h / 2
    corners = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    corners += jitter * np.array([w, h])
    c, s = math.cos(tilt), math.sin(tilt)
    return corners @ np.array([[c, s], [-s, c]])


def _stack(heights, widths, gaps, tilts, jitter, scale):
    quads, top = [], 0.0
    for i in range(len(heights)):
        q = _quad(widths[i] * scale, heights[i] * scale, tilts[i], jitter[i])
        q[:, 1] += top - q[:, 1].min()
        gap = gaps[i] * scale if i < len(gaps) else 0.0
        top = q[:, 1].max() + max(gap, 1.5)
        quads.append(q)
    return quads


def _inside(quad: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # convex polygon, corners in consistent winding
    inside = np.ones(xs.shape, dtype=bool)
    sign = None
    for i in range(4):
        (x0, y0), (x1, y1) = quad[i], quad[(i + 1) % 4]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        if sign is None:
            sign = np.sign((x1 - x0) * (quad[:, 1].mean() - y0) - (y1 - y0) * (quad[:, 0].mean() - x0))
        inside &= cross * sign >= 0
    return inside


def _background(p: PhantomParams, rng, ys, xs) -> np.ndarray:
    bg = np.full(xs.shape, p.background_level)
    if p.texture_amplitude > 0:
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 2.0, size=2) / np.array([p.width, p.height])
            phase = rng.uniform(0, 2 * np.pi)
            bg += p.texture_amplitude / 3 * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    return bg


def generate(params: PhantomParams) -> tuple[GrayImage, BinaryMask]:
    p = params
    rng = np.random.default_rng(p.seed)
    H, W = p.height, p.width
    margin = max(2.0, 0.06 * H)

    heights = rng.uniform(*p.body_height, size=p.n_vertebrae) * H
    fractured = rng.random(p.n_vertebrae) < p.fracture_prob
    heights = np.where(fractured, heights * (1 - rng.uniform(0.3, 0.6, size=p.n_vertebrae)), heights)
    widths = heights.max() * rng.uniform(*p.aspect, size=p.n_vertebrae)
    gaps = rng.uniform(*p.gap, size=p.n_vertebrae - 1) * H
    tilts = np.radians(rng.uniform(-p.max_tilt_deg, p.max_tilt_deg, size=p.n_vertebrae))

    jitter = rng.uniform(-0.08, 0.08, size=(p.n_vertebrae, 4, 2))
    ys, xs = np.mgrid[0:H, 0:W] + 0.5

    # shrink the whole column uniformly if it would overrun the image
    avail_y, avail_x = H - 2 * margin, W - 2 * margin
    scale = 1.0
    for _ in range(20):
        quads = _stack(heights, widths, gaps, tilts, jitter, scale)
        column = np.concatenate(quads)
        span_y = column[:, 1].max() - column[:, 1].min()
        span_x = column[:, 0].max() - column[:, 0].min()
        if span_y <= avail_y and span_x <= avail_x:
            break
        scale *= 0.97 * min(avail_y / span_y, avail_x / span_x, 1.0)
    if scale < 0.6 or span_y > avail_y or span_x > avail_x:
        raise ParameterError(f"{p.n_vertebrae} vertebrae do not fit a {W}x{H} image")
    free_y = H - 2 * margin - span_y
    free_x = W - 2 * margin - span_x
    oy = margin + rng.uniform(0, free_y) - column[:, 1].min()
    ox = margin + rng.uniform(0, free_x) - column[:, 0].min()
    # drift the column sideways a little, as a curved spine would
    drift = rng.uniform(-0.03, 0.03) * W
    for i, q in enumerate(quads):
        frac = i / (p.n_vertebrae - 1) - 0.5
        q += np.array([ox + drift * frac, oy])
    column = np.concatenate(quads)
    if column[:, 0].min() < 0 or column[:, 0].max() > W:
        raise ParameterError("vertebral column leaves the image")

    img = _background(p, rng, ys, xs)
    mask = np.zeros((H, W), dtype=np.uint8)
    levels = rng.uniform(*p.vertebra_level, size=p.n_vertebrae)
    for i, q in enumerate(quads):
        inside = _inside(q, xs, ys)
        level = levels[i]
        if p.hard_mode and i < max(1, p.n_vertebrae // 3):
            # poorly visualized upper column: contrast pulled toward the background
            lo = p.background_level + p.texture_amplitude
            level = lo + 0.25 * (level - lo) + 1.0
        img[inside] = level
        mask[inside] = 1
    if p.noise_sigma > 0:
        img = img + rng.normal(0.0, p.noise_sigma, size=img.shape)
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return GrayImage(pixels, 8), BinaryMask(mask)


def item_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(n: int, params: PhantomParams = PhantomParams(), seed: int = 0,
                     out_dir: str | Path | None = None):
    """Generate ``n`` phantoms from per-item seeds derived from ``seed``.

    With ``out_dir`` the pairs are written as ``images/phantom_XXXX.png`` and
    ``masks/phantom_XXXX.png`` plus ``manifest.tsv``. Entries are split with
    the default ratios when ``n >= 3``; smaller sets are all tagged train.
    Returns ``(pairs, manifest)``.
    """
    from .trainer import DatasetManifest, ManifestEntry, split_dataset

    if n < 1:
        raise ParameterError("n must be >= 1")
    pairs = [generate(replace(params, seed=s)) for s in item_seeds(seed, n)]
    names = [f"phantom_{i:04d}" for i in range(n)]
    items = [(f"images/{nm}.png", f"masks/{nm}.png") for nm in names]
    if n >= 3:
        manifest = split_dataset(items, seed=seed)
    else:
        manifest = DatasetManifest([ManifestEntry("train", a, b) for a, b in items], seed)
    if out_dir is not None:
        out = Path(out_dir)
        for (img, mask), (ip, mp) in zip(pairs, items):
            write_png(img, out / ip)
            write_mask(mask, out / mp)
        manifest.save(out / "manifest.tsv")
    return pairs, manifest


def params_dict(params: PhantomParams) -> dict:
    return asdict(params)
