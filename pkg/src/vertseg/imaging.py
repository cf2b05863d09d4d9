"""Grayscale image types, CLAHE, bilinear resampling and the mask codec.

Masks on disk follow the labelling convention of the source data: vertebrae
are black (0) and background white (255). In memory a :class:`BinaryMask`
holds 1 for vertebra and 0 for background.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    pixels: np.ndarray  # (height, width) uint8 or uint16
    bit_depth: int = 8

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ParameterError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ParameterError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype.kind not in "ui":
            raise ParameterError(f"image pixels must be integers, got {px.dtype}")
        if px.min() < 0 or px.max() > self.maxval:
            raise ParameterError(f"intensities outside [0, {self.maxval}]")
        dtype = np.uint8 if self.bit_depth == 8 else np.uint16
        object.__setattr__(self, "pixels", np.ascontiguousarray(px, dtype=dtype))

    @property
    def maxval(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return (isinstance(other, GrayImage) and self.bit_depth == other.bit_depth
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    pixels: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ParameterError(f"mask must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype == bool:
            px = px.astype(np.uint8)
        if not np.isin(px, (0, 1)).all():
            raise ParameterError("mask values must be 0 or 1")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px, dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class ClaheParams:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ParameterError("tile counts must be positive")
        if not self.clip_limit >= 1.0:
            raise ParameterError(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.bins < 1:
            raise ParameterError("bins must be positive")


# --- CLAHE -------------------------------------------------------------------

def _tile_luts(tiles: np.ndarray, bins: int, clip_limit: float, maxval: int):
    """Per-tile equalization lookup tables over histogram bins.

    tiles: (ty, tx, n) bin indices. Returns (luts[ty, tx, bins], flat[ty, tx]).
    """
    ty, tx, n = tiles.shape
    hist = np.zeros((ty * tx, bins), dtype=np.float64)
    flat_idx = tiles.reshape(ty * tx, n)
    for t in range(ty * tx):
        hist[t] = np.bincount(flat_idx[t], minlength=bins)
    flat = (hist > 0).sum(axis=1) == 1
    if math.isfinite(clip_limit):
        clip = clip_limit * n / bins
        excess = np.maximum(hist - clip, 0).sum(axis=1, keepdims=True)
        hist = np.minimum(hist, clip) + excess / bins
    cdf = np.cumsum(hist, axis=1)
    luts = np.floor(cdf / cdf[:, -1:] * maxval + 0.5)
    return luts.reshape(ty, tx, bins), flat.reshape(ty, tx)


def _axis_interp(n_pix: int, tile: int, n_tiles: int):
    # pixel centres relative to tile centres
    f = (np.arange(n_pix) + 0.5) / tile - 0.5
    i0 = np.floor(f).astype(int)
    wgt = f - i0
    lo = np.clip(i0, 0, n_tiles - 1)
    hi = np.clip(i0 + 1, 0, n_tiles - 1)
    return lo, hi, wgt


def clahe(image: GrayImage, params: ClaheParams = ClaheParams()) -> GrayImage:
    """Contrast-limited adaptive histogram equalization.

    The image is padded by edge replication to a whole number of tiles. Each
    tile gets a clipped, uniformly redistributed histogram whose CDF becomes
    an integer lookup table; each output pixel blends the four nearest tile
    mappings bilinearly. A tile whose histogram has a single occupied bin maps
    every value to itself.
    """
    h, w = image.height, image.width
    th = math.ceil(h / params.tiles_y)
    tw = math.ceil(w / params.tiles_x)
    if th < 2 or tw < 2:
        raise ParameterError(f"tile size {th}x{tw} is below the 2x2 minimum")
    ph, pw = th * params.tiles_y, tw * params.tiles_x
    px = image.pixels.astype(np.int64)
    padded = np.pad(px, ((0, ph - h), (0, pw - w)), mode="edge")

    bins = params.bins
    maxval = image.maxval
    to_bin = lambda v: (v * bins) // (maxval + 1)  # noqa: E731

    tiles = to_bin(padded).reshape(params.tiles_y, th, params.tiles_x, tw)
    tiles = tiles.transpose(0, 2, 1, 3).reshape(params.tiles_y, params.tiles_x, th * tw)
    luts, flat = _tile_luts(tiles, bins, params.clip_limit, maxval)

    b = to_bin(px)
    y0, y1, wy = _axis_interp(h, th, params.tiles_y)
    x0, x1, wx = _axis_interp(w, tw, params.tiles_x)

    def mapped(ty, tx):
        lut_v = luts[ty[:, None], tx[None, :], b]
        return np.where(flat[ty[:, None], tx[None, :]], px, lut_v)

    wy = wy[:, None]
    wx = wx[None, :]
    top = (1 - wx) * mapped(y0, x0) + wx * mapped(y0, x1)
    bot = (1 - wx) * mapped(y1, x0) + wx * mapped(y1, x1)
    out = np.floor((1 - wy) * top + wy * bot + 0.5)
    out = np.clip(out, 0, maxval)
    return GrayImage(out.astype(np.int64), image.bit_depth)


# --- resampling ----------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    """Integer source indices and weight numerators over denominator 2*n_out.

    Source coordinate for output i is (i + 0.5) * n_in / n_out - 0.5, clamped
    to [0, n_in - 1]; exact rational arithmetic keeps resizing bit-exact
    under mirroring.
    """
    den = 2 * n_out
    num = (2 * np.arange(n_out, dtype=np.int64) + 1) * n_in - n_out
    num = np.clip(num, 0, (n_in - 1) * den)
    i0 = num // den
    r = num - i0 * den
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, r, den


def _bilinear_numerators(px: np.ndarray, out_w: int, out_h: int):
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = px.shape
    y0, y1, ry, dy = _axis_weights(h, out_h)
    x0, x1, rx, dx = _axis_weights(w, out_w)
    p = px.astype(np.int64)
    ry = ry[:, None]
    rx = rx[None, :]
    top = (dx - rx) * p[y0][:, x0] + rx * p[y0][:, x1]
    bot = (dx - rx) * p[y1][:, x0] + rx * p[y1][:, x1]
    return (dy - ry) * top + ry * bot, dy * dx


def resize_bilinear(image: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Pixel-centre aligned bilinear resize, rounding half up to integers."""
    total, den = _bilinear_numerators(image.pixels, out_w, out_h)
    out = (2 * total + den) // (2 * den)
    return GrayImage(out, image.bit_depth)


def resize_mask(mask: BinaryMask, out_w: int, out_h: int) -> BinaryMask:
    """Bilinear resize of a {0,1} mask followed by a >= 0.5 threshold."""
    total, den = _bilinear_numerators(mask.pixels, out_w, out_h)
    return BinaryMask((2 * total >= den).astype(np.uint8))


# --- tensors and masks ---------------------------------------------------

def normalize(image: GrayImage, dtype=np.float32) -> Tensor:
    data = image.pixels.astype(np.float64) / image.maxval
    return Tensor(data[None, None].astype(dtype))


def denormalize(t: Tensor | np.ndarray, bit_depth: int = 8) -> GrayImage:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.squeeze(arr)
    maxval = (1 << bit_depth) - 1
    return GrayImage(np.clip(np.floor(arr.astype(np.float64) * maxval + 0.5), 0, maxval).astype(np.int64),
                     bit_depth)


def decode_mask(image: GrayImage) -> BinaryMask:
    if image.bit_depth != 8:
        raise ParameterError("mask images must be 8-bit")
    return BinaryMask((image.pixels < 128).astype(np.uint8))


def encode_mask(mask: BinaryMask) -> GrayImage:
    return GrayImage(np.where(mask.pixels == 1, 0, 255).astype(np.uint8), 8)


# --- PNG I/O ---------------------------------------------------------------

def read_png(path: str | Path) -> GrayImage:
    with Image.open(path) as im:
        im.load()
        if im.mode == "L":
            return GrayImage(np.asarray(im, dtype=np.uint8), 8)
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im)
            return GrayImage(arr.astype(np.int64), 16)
        if im.mode in ("1", "P"):
            return GrayImage(np.asarray(im.convert("L"), dtype=np.uint8), 8)
    raise ParameterError(f"{path}: unsupported PNG mode {im.mode!r} (grayscale only)")


def write_png(image: GrayImage, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.bit_depth == 8:
        im = Image.fromarray(image.pixels)
    else:
        im = Image.fromarray(image.pixels.astype(np.uint16))
    im.save(path, format="PNG")


def read_mask(path: str | Path) -> BinaryMask:
    return decode_mask(read_png(path))


def write_mask(mask: BinaryMask, path: str | Path) -> None:
    write_png(encode_mask(mask), path)


def flip_horizontal(image: GrayImage) -> GrayImage:
    return GrayImage(image.pixels[:, ::-1], image.bit_depth)
