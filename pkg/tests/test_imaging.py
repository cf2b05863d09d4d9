import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vertseg.imaging import (BinaryMask, ClaheParams, GrayImage, ParameterError, _tile_luts, clahe,
                             decode_mask, denormalize, encode_mask, flip_horizontal, normalize, read_mask,
                             read_png, resize_bilinear, resize_mask, write_mask, write_png)


def global_histeq(px: np.ndarray, maxval: int = 255) -> np.ndarray:
    """Plain global histogram equalization: v -> round(#{p <= v} / N * maxval)."""
    values, counts = np.unique(px, return_counts=True)
    if len(values) == 1:
        return px.copy()
    cum = np.cumsum(counts)
    table = {int(v): math.floor(c * maxval / px.size + 0.5) for v, c in zip(values, cum)}
    return np.vectorize(table.__getitem__)(px)


def bilinear_point(px: np.ndarray, sy: float, sx: float) -> float:
    h, w = px.shape
    sy = min(max(sy, 0.0), h - 1)
    sx = min(max(sx, 0.0), w - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    return ((1 - fy) * ((1 - fx) * px[y0, x0] + fx * px[y0, x1])
            + fy * ((1 - fx) * px[y1, x0] + fx * px[y1, x1]))


def brute_resize(px, out_w, out_h):
    h, w = px.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out[i, j] = bilinear_point(px.astype(float), (i + 0.5) * h / out_h - 0.5, (j + 0.5) * w / out_w - 0.5)
    return out


images8 = arrays(np.uint8, st.tuples(st.integers(4, 40), st.integers(4, 40)))


class TestTypes:
    def test_range_checked(self):
        with pytest.raises(ParameterError):
            GrayImage(np.array([[256]]), 8)
        with pytest.raises(ParameterError):
            GrayImage(np.array([[1.5]]), 8)
        with pytest.raises(ParameterError):
            BinaryMask(np.array([[2]]))

    def test_clahe_params(self):
        with pytest.raises(ParameterError):
            ClaheParams(clip_limit=0.5)
        assert ClaheParams() == ClaheParams(8, 8, 2.0, 256)


class TestClahe:
    @pytest.mark.parametrize("value", [0, 17, 128, 255])
    def test_constant_is_fixed_point(self, value):
        img = GrayImage(np.full((32, 48), value), 8)
        assert clahe(img) == img

    def test_constant_16bit(self):
        img = GrayImage(np.full((20, 20), 40000), 16)
        assert clahe(img, ClaheParams(4, 4)) == img

    @pytest.mark.parametrize("seed", range(10))
    def test_single_tile_matches_global_histeq(self, seed):
        rng = np.random.default_rng(seed)
        px = rng.integers(0, 256, size=rng.integers(5, 60, size=2))
        out = clahe(GrayImage(px, 8), ClaheParams(1, 1, math.inf))
        assert np.array_equal(out.pixels, global_histeq(px))

    def test_degenerate_tiles(self):
        with pytest.raises(ParameterError):
            clahe(GrayImage(np.zeros((8, 8), dtype=np.uint8)), ClaheParams(8, 8))

    def test_non_divisible_size(self):
        px = np.random.default_rng(0).integers(0, 256, size=(37, 53))
        out = clahe(GrayImage(px, 8), ClaheParams(4, 5))
        assert out.pixels.shape == (37, 53)

    def test_improves_contrast(self):
        # low-contrast ramp spreads toward the full range
        px = np.tile(np.arange(100, 132), (32, 1))
        out = clahe(GrayImage(px, 8), ClaheParams(2, 2, 4.0))
        assert np.ptp(out.pixels) > np.ptp(px)

    @settings(max_examples=40, deadline=None)
    @given(images8, st.integers(1, 2), st.floats(1.0, 8.0))
    def test_range_and_per_tile_monotone(self, px, tiles, clip):
        img = GrayImage(px, 8)
        out = clahe(img, ClaheParams(tiles, tiles, clip))
        assert out.pixels.shape == px.shape
        assert out.pixels.dtype == np.uint8
        if tiles == 1:
            # single tile: the whole image shares one mapping
            order = np.argsort(px.reshape(-1), kind="stable")
            assert np.all(np.diff(out.pixels.reshape(-1)[order].astype(int)) >= 0)

    @settings(max_examples=40)
    @given(arrays(np.int64, (3, 2, 30), elements=st.integers(0, 15)), st.floats(1.0, 5.0))
    def test_tile_luts_monotone(self, tiles, clip):
        luts, _ = _tile_luts(tiles, 16, clip, 255)
        assert np.all(np.diff(luts, axis=-1) >= 0)
        assert luts.min() >= 0 and luts.max() <= 255

    def test_16bit_range(self):
        px = np.random.default_rng(3).integers(0, 65536, size=(40, 40))
        out = clahe(GrayImage(px, 16), ClaheParams(4, 4, 2.0, 1024))
        assert out.bit_depth == 16 and out.pixels.max() <= 65535


class TestResize:
    def test_two_by_two_to_one(self):
        assert resize_bilinear(GrayImage(np.array([[0, 100], [200, 100]])), 1, 1).pixels.tolist() == [[100]]

    @given(images8)
    def test_identity(self, px):
        img = GrayImage(px)
        assert resize_bilinear(img, img.width, img.height) == img

    @given(st.integers(0, 255), st.integers(1, 30), st.integers(1, 30))
    def test_constant(self, v, w, h):
        out = resize_bilinear(GrayImage(np.full((7, 5), v)), w, h)
        assert out.pixels.shape == (h, w) and (out.pixels == v).all()

    @settings(max_examples=60)
    @given(images8, st.integers(1, 50), st.integers(1, 50))
    def test_flip_commutes(self, px, w, h):
        img = GrayImage(px)
        assert resize_bilinear(flip_horizontal(img), w, h) == flip_horizontal(resize_bilinear(img, w, h))

    @settings(max_examples=60)
    @given(images8, st.integers(1, 50), st.integers(1, 50))
    def test_matches_brute_force(self, px, w, h):
        got = resize_bilinear(GrayImage(px), w, h).pixels
        ref = brute_resize(px, w, h)
        # exact except where the float oracle sits on a rounding tie
        tie = np.abs(ref - np.floor(ref) - 0.5) < 1e-9
        assert np.array_equal(got[~tie], np.floor(ref[~tie] + 0.5).astype(int))
        assert np.all(np.abs(got - ref) <= 0.5 + 1e-9)

    def test_radiograph_to_network_size(self):
        px = np.random.default_rng(0).integers(0, 65536, size=(3480, 4238))
        out = resize_bilinear(GrayImage(px, 16), 512, 512)
        assert out.pixels.shape == (512, 512) and out.bit_depth == 16


class TestResizeMask:
    @given(st.integers(1, 20), st.integers(1, 20))
    def test_all_ones_and_zeros(self, w, h):
        assert resize_mask(BinaryMask(np.ones((9, 6))), w, h).pixels.all()
        assert not resize_mask(BinaryMask(np.zeros((9, 6))), w, h).pixels.any()

    def test_checkerboard(self):
        cb = (np.indices((4, 4)).sum(axis=0) % 2).astype(np.uint8)
        out = resize_mask(BinaryMask(cb), 2, 2).pixels
        ref = brute_resize(cb, 2, 2)
        # samples fall midway between pixel centres; every value is a 0.5 tie -> 1
        assert np.allclose(ref, 0.5)
        assert np.array_equal(out, (ref >= 0.5).astype(np.uint8))

    @given(arrays(np.uint8, (12, 10), elements=st.integers(0, 1)), st.integers(1, 24), st.integers(1, 24))
    def test_strictly_binary_and_brute_force(self, m, w, h):
        out = resize_mask(BinaryMask(m), w, h).pixels
        assert set(np.unique(out)) <= {0, 1}
        ref = brute_resize(m, w, h)
        clear = np.abs(ref - 0.5) > 1e-9
        assert np.array_equal(out[clear], (ref[clear] > 0.5).astype(np.uint8))


class TestNormalizeAndCodec:
    def test_normalize_endpoints(self):
        t = normalize(GrayImage(np.array([[0, 255]])))
        assert t.shape == (1, 1, 1, 2) and t.data.tolist() == [[[[0.0, 1.0]]]]
        assert normalize(GrayImage(np.array([[65535]]), 16)).data.item() == 1.0

    def test_round_trip_8bit(self):
        px = np.arange(256).reshape(16, 16)
        assert denormalize(normalize(GrayImage(px))).pixels.tolist() == px.tolist()

    def test_decode_black_and_white(self):
        assert decode_mask(GrayImage(np.zeros((3, 3), dtype=np.uint8))).pixels.all()
        assert not decode_mask(GrayImage(np.full((3, 3), 255))).pixels.any()

    def test_decode_threshold(self):
        assert decode_mask(GrayImage(np.array([[127, 128]]))).pixels.tolist() == [[1, 0]]

    @given(arrays(np.uint8, (6, 7), elements=st.sampled_from([0, 255])))
    def test_encode_decode_identity(self, px):
        img = GrayImage(px)
        assert encode_mask(decode_mask(img)) == img

    def test_encode_only_black_white(self):
        m = BinaryMask(np.random.default_rng(0).integers(0, 2, size=(5, 5)))
        assert set(np.unique(encode_mask(m).pixels)) <= {0, 255}

    def test_decode_rejects_16bit(self):
        with pytest.raises(ParameterError):
            decode_mask(GrayImage(np.zeros((2, 2), dtype=np.uint16), 16))


class TestPng:
    @pytest.mark.parametrize("depth", [8, 16])
    def test_round_trip(self, tmp_path, depth):
        px = np.random.default_rng(depth).integers(0, 2 ** depth, size=(13, 17))
        img = GrayImage(px, depth)
        write_png(img, tmp_path / "a.png")
        assert read_png(tmp_path / "a.png") == img

    def test_mask_round_trip(self, tmp_path):
        m = BinaryMask(np.random.default_rng(1).integers(0, 2, size=(9, 11)))
        write_mask(m, tmp_path / "m.png")
        assert read_mask(tmp_path / "m.png") == m
        assert read_png(tmp_path / "m.png").pixels[m.pixels == 1].max() == 0
