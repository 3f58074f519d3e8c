import numpy as np
import pytest

from uwdiff.grids import EPS_T, GridError, ImageGrid, PhysicsPrior
from uwdiff.physics import (
    SynthParams,
    degrade,
    depth_field,
    gaussian_blur,
    gaussian_kernel_1d,
    koschmieder_forward,
    recover,
    smooth_color_field,
    synth_pair,
    transmission_from_depth,
)


def const_grid(value, shape=(8, 8, 3), **kw):
    return ImageGrid(np.full(shape, value, dtype=np.float64), **kw)


def random_prior(rng, shape=(8, 8, 3)):
    t = rng.uniform(EPS_T, 1.0, shape)
    b = rng.uniform(0.0, 1.0, shape)
    return PhysicsPrior(ImageGrid(t), ImageGrid(b))


class TestImageGrid:
    def test_rejects_out_of_range(self):
        with pytest.raises(GridError):
            ImageGrid(np.full((4, 4, 3), 1.5))

    def test_rejects_non_finite(self):
        data = np.zeros((4, 4, 3))
        data[0, 0, 0] = np.nan
        with pytest.raises(GridError):
            ImageGrid(data)

    def test_rejects_bad_channels(self):
        with pytest.raises(GridError):
            ImageGrid(np.zeros((4, 4, 2)))

    def test_signed_range_not_checked(self):
        grid = ImageGrid(np.full((4, 4, 3), 3.0), (-1.0, 1.0))
        assert grid.data.max() == 3.0

    def test_round_trip_signed_unit(self):
        rng = np.random.default_rng(0)
        grid = ImageGrid(rng.uniform(0, 1, (5, 7, 3)))
        back = grid.to_signed().to_unit()
        np.testing.assert_allclose(back.data, grid.data, atol=1e-15)


class TestDegrade:
    def test_full_transmission_is_identity(self):
        rng = np.random.default_rng(1)
        j = ImageGrid(rng.uniform(0, 1, (8, 8, 3)))
        prior = PhysicsPrior(const_grid(1.0), const_grid(0.7))
        np.testing.assert_array_equal(degrade(j, prior).data, j.data)

    def test_zero_transmission_gives_background(self):
        # T = 0 sits below the prior floor; exercise the raw model directly
        j = np.random.default_rng(2).uniform(0, 1, (8, 8, 3))
        b = np.full((8, 8, 3), 0.35)
        out = koschmieder_forward(j, np.zeros_like(j), b)
        np.testing.assert_array_equal(out, b)

    def test_hand_value(self):
        # 0.8 * 0.5 + 0.5 * 0.2 = 0.5
        j = const_grid(0.8)
        prior = PhysicsPrior(const_grid(0.5), const_grid(0.2))
        np.testing.assert_allclose(degrade(j, prior).data, 0.5, atol=1e-15)

    def test_output_stays_in_unit_range(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            j = ImageGrid(rng.uniform(0, 1, (6, 6, 3)))
            out = degrade(j, random_prior(rng, (6, 6, 3)))
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_shape_mismatch(self):
        j = const_grid(0.5, (8, 8, 3))
        prior = PhysicsPrior(const_grid(0.5, (4, 4, 3)), const_grid(0.2, (4, 4, 3)))
        with pytest.raises(GridError):
            degrade(j, prior)


class TestRecover:
    def test_identity_transmission(self):
        rng = np.random.default_rng(4)
        i = ImageGrid(rng.uniform(0, 1, (8, 8, 3)))
        prior = PhysicsPrior(const_grid(1.0), const_grid(0.3))
        np.testing.assert_array_equal(recover(i, prior).data, i.data)

    def test_hand_inverse(self):
        i = const_grid(0.5)
        prior = PhysicsPrior(const_grid(0.5), const_grid(0.2))
        np.testing.assert_allclose(recover(i, prior).data, 0.8, atol=1e-12)

    def test_roundtrip_100_instances(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            j = ImageGrid(rng.uniform(0, 1, (8, 8, 3)))
            prior = random_prior(rng)
            back = recover(degrade(j, prior), prior)
            worst = max(worst, np.abs(back.data - j.data).max())
        assert worst < 1e-6

    def test_floor_enforced_by_prior(self):
        with pytest.raises(GridError):
            PhysicsPrior(const_grid(EPS_T / 2), const_grid(0.2))


class TestGaussianBlur:
    def test_constant_unchanged(self):
        out = gaussian_blur(const_grid(0.42), sigma=1.5, kernel_size=5)
        np.testing.assert_allclose(out.data, 0.42, atol=1e-12)

    def test_impulse_center_weight(self):
        data = np.zeros((9, 9, 1))
        data[4, 4, 0] = 1.0
        out = gaussian_blur(ImageGrid(data), sigma=1.0, kernel_size=5)
        k = gaussian_kernel_1d(1.0, 5)
        assert out.data[4, 4, 0] == pytest.approx(k[2] * k[2], abs=1e-12)

    def test_mean_preserved(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            img = ImageGrid(rng.uniform(0, 1, (12, 17, 3)))
            out = gaussian_blur(img, sigma=2.0, kernel_size=7)
            assert abs(out.data.mean() - img.data.mean()) < 1e-6

    def test_contraction_on_noise(self):
        rng = np.random.default_rng(7)
        base = ImageGrid(rng.uniform(0.2, 0.8, (16, 16, 3)))
        for _ in range(5):
            noise = rng.normal(0, 0.05, base.shape)
            noisy = ImageGrid(
                base.data + noise, base.value_range, check_range=False
            )
            delta = (
                gaussian_blur(noisy, 2.0, 9).data
                - gaussian_blur(base, 2.0, 9).data
            )
            assert np.linalg.norm(delta) <= np.linalg.norm(noise) + 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            gaussian_blur(const_grid(0.5), sigma=1.0, kernel_size=4)


class TestSynthPair:
    def test_zero_depth_is_identity(self):
        j = smooth_color_field(16, 16, 0)
        degraded, prior = synth_pair(j, SynthParams(depth_scale=0.0, seed=1))
        np.testing.assert_array_equal(prior.transmission.data, 1.0)
        np.testing.assert_array_equal(degraded.data, j.data)

    def test_same_seed_bit_identical(self):
        j = smooth_color_field(16, 16, 3)
        params = SynthParams(seed=11)
        a_img, a_prior = synth_pair(j, params)
        b_img, b_prior = synth_pair(j, params)
        np.testing.assert_array_equal(a_img.data, b_img.data)
        np.testing.assert_array_equal(
            a_prior.transmission.data, b_prior.transmission.data
        )

    def test_uniform_depth_attenuation_values(self):
        t = transmission_from_depth(np.ones((4, 4)), (0.8, 0.4, 0.2))
        np.testing.assert_allclose(
            t[0, 0], np.exp([-0.8, -0.4, -0.2]), atol=1e-12
        )

    def test_transmission_monotone_in_depth(self):
        depths = np.linspace(0, 4, 9)[:, None]
        t = transmission_from_depth(
            np.repeat(depths, 3, axis=1), (0.9, 0.5, 0.3)
        )
        flat = np.maximum(t, EPS_T)
        for c in range(3):
            col = flat[:, 0, c]
            assert np.all(np.diff(col) <= 1e-15)

    def test_background_constant_per_channel(self):
        j = smooth_color_field(12, 12, 5)
        _, prior = synth_pair(j, SynthParams(seed=2))
        spread = prior.background.data.max(axis=(0, 1)) - prior.background.data.min(
            axis=(0, 1)
        )
        assert np.all(spread == 0.0)

    def test_depth_field_range(self):
        params = SynthParams(depth_scale=2.5, seed=9)
        d = depth_field(16, 16, params)
        assert d.min() == pytest.approx(0.0, abs=1e-12)
        assert d.max() == pytest.approx(2.5, abs=1e-12)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            SynthParams(attenuation=(0.0, 0.5, 0.5))
        with pytest.raises(ValueError):
            SynthParams(background_range=(0.5, 1.5))
