import math

import numpy as np
import pytest

from halo.encoding import SinusoidalEncodingConfig
from halo.metrics import psnr
from halo.toy2d import (
    HIGH,
    LOW,
    bilinear_upsample,
    checkerboard,
    corner_mask,
    detailed_image,
    evaluate_field,
    extrapolate_experiment,
    fit_image_field,
    interpolate_experiment,
    pixel_grid,
)


class TestPatterns:
    def test_checkerboard_cells(self):
        cb = checkerboard(64, 8)
        assert cb.shape == (64, 64) and cb[0, 0] == 0 and cb[0, 8] == 1 and cb[8, 8] == 0
        assert cb.mean() == 0.5

    def test_corner_mask_area(self):
        m = corner_mask(64, 1 / 16)
        assert m.sum() == 256 and m[0, 63] and not m[63, 0]

    def test_pixel_grid_corners(self):
        g = pixel_grid(4, 5)
        assert g[0, 0].tolist() == [-1.0, -1.0] and g[-1, -1].tolist() == [1.0, 1.0]
        assert g[0, -1].tolist() == [1.0, -1.0]

    def test_bilinear_identity(self):
        img = detailed_image(16)
        np.testing.assert_allclose(bilinear_upsample(img, 1)[..., 0], img, atol=1e-6)

    def test_bilinear_keeps_samples(self):
        img = detailed_image(16)
        up = bilinear_upsample(img, 4)[..., 0]
        # corner-aligned: the first and last rows/columns coincide with the input
        np.testing.assert_allclose(up[0, 0], img[0, 0], atol=1e-6)
        np.testing.assert_allclose(up[-1, -1], img[-1, -1], atol=1e-6)


class TestFit:
    def test_zero_iterations_is_untrained(self):
        img = detailed_image(64)
        fitted = fit_image_field(img, HIGH, 0, seed=0)
        assert fitted.train_psnr < 15.0

    def test_training_improves(self):
        img = detailed_image(64)
        assert fit_image_field(img, HIGH, 200, seed=0).train_psnr > fit_image_field(img, HIGH, 0, seed=0).train_psnr

    def test_deterministic(self):
        img = detailed_image(32)
        a = fit_image_field(img, LOW, 20, seed=3)
        b = fit_image_field(img, LOW, 20, seed=3)
        assert a.train_psnr == b.train_psnr

    def test_factor_one_is_reconstruction(self):
        img = detailed_image(32)
        fitted = fit_image_field(img, LOW, 20)
        out = interpolate_experiment(fitted, img, factor=1)
        np.testing.assert_array_equal(out["image"], evaluate_field(fitted, 32, 32))

    def test_constant_image_upsamples_flat(self):
        img = np.full((64, 64), 0.4, dtype=np.float32)
        for enc in (LOW, HIGH):
            fitted = fit_image_field(img, enc, 800, seed=0)
            dense = interpolate_experiment(fitted, img, 4)["image"]
            assert np.abs(dense - 0.4).max() < 1e-3

    def test_low_underfits_detailed_image(self):
        img = detailed_image(64)
        assert fit_image_field(img, LOW, 400).train_psnr <= fit_image_field(img, HIGH, 400).train_psnr


class TestExtrapolate:
    def test_empty_mask_sentinel(self):
        pat = checkerboard(16, 4)
        r = extrapolate_experiment(pat, np.zeros_like(pat, dtype=bool), {"low": LOW}, 5)
        assert math.isnan(r["low"]["masked_accuracy"])

    def test_masked_pixels_never_read(self):
        pat = checkerboard(32, 4)
        mask = corner_mask(32, 1 / 16)
        poisoned = pat.copy()
        poisoned[mask] = np.nan
        a = extrapolate_experiment(pat, mask, {"high": HIGH}, 30, seed=1)["high"]
        b = extrapolate_experiment(poisoned, mask, {"high": HIGH}, 30, seed=1)["high"]
        assert a["train_psnr"] == b["train_psnr"]
        np.testing.assert_array_equal(a["prediction"], b["prediction"])

    def test_accuracy_range(self):
        pat = checkerboard(32, 4)
        r = extrapolate_experiment(pat, corner_mask(32, 1 / 16), {"low": LOW}, 10)
        assert 0.0 <= r["low"]["masked_accuracy"] <= 1.0
