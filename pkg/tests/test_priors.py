import numpy as np
import pytest
import torch
import torch.nn.functional as F

from uwdiff.grids import EPS_T, ImageGrid, PhysicsPrior
from uwdiff.physics import degrade, gaussian_blur, smooth_color_field
from uwdiff.priors import (
    AttentionBlock,
    ConvPyramidFeatures,
    DynamicConv2d,
    GaussianBlur,
    PriorGenerator,
    estimate_priors,
    grid_to_tensor,
    prior_loss,
    prior_reconstruct,
    tensor_to_grid,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


class TestDynamicConv:
    def test_one_hot_gate_is_single_kernel(self):
        layer = DynamicConv2d(4, 6, num_kernels=3)
        x = torch.randn(2, 4, 8, 8)
        gate = torch.zeros(2, 3)
        gate[:, 1] = 1.0
        out = layer(x, gate=gate)
        ref = F.conv2d(x, layer.weight[1], layer.bias[1], padding=1)
        assert torch.allclose(out, ref, atol=1e-6)

    def test_opposite_kernels_cancel(self):
        layer = DynamicConv2d(4, 4, num_kernels=2)
        with torch.no_grad():
            layer.weight[1].copy_(-layer.weight[0])
            layer.bias.zero_()
        x = torch.randn(1, 4, 8, 8)
        half = torch.full((1, 2), 0.5)
        out = layer(x, gate=half)
        assert out.abs().max() < 1e-6

    def test_gate_weights_sum_to_one(self):
        layer = DynamicConv2d(8, 8, num_kernels=4)
        g = layer.gate_weights(torch.randn(3, 8, 16, 16))
        assert torch.allclose(g.sum(dim=1), torch.ones(3), atol=1e-6)
        assert (g >= 0).all()

    def test_channel_mismatch(self):
        layer = DynamicConv2d(4, 4)
        with pytest.raises(ValueError):
            layer(torch.randn(1, 5, 8, 8))

    def test_needs_two_banks(self):
        with pytest.raises(ValueError):
            DynamicConv2d(4, 4, num_kernels=1)


class TestAttentionBlock:
    def test_output_never_exceeds_input(self):
        block = AttentionBlock(8)
        x = torch.randn(2, 8, 12, 12)
        out = block(x)
        assert (out.abs() <= x.abs() + 1e-6).all()

    def test_saturated_gates_identity(self):
        block = AttentionBlock(8)
        block.channel_gate.forward = lambda x: torch.ones(x.shape[0], 8, 1, 1)
        block.spatial_gate.forward = lambda x: torch.ones(
            x.shape[0], 1, *x.shape[2:]
        )
        x = torch.randn(2, 8, 6, 6)
        assert torch.equal(block(x), x)

    def test_channel_gate_width(self):
        block = AttentionBlock(16)
        g = block.channel_gate(torch.randn(2, 16, 8, 8))
        assert g.shape == (2, 16, 1, 1)


class TestPriorGenerator:
    def test_output_shapes_and_ranges(self):
        net = PriorGenerator(channels=8, num_layers=2)
        img = smooth_color_field(24, 24, 1)
        prior = estimate_priors(img, net)
        assert prior.transmission.shape == (24, 24, 3)
        assert prior.background.shape == (24, 24, 3)
        assert prior.transmission.data.min() >= EPS_T
        assert prior.transmission.data.max() < 1.0

    def test_background_spatially_constant(self):
        net = PriorGenerator(channels=8, num_layers=2)
        prior = estimate_priors(smooth_color_field(16, 16, 2), net)
        spread = np.ptp(prior.background.data, axis=(0, 1))
        assert np.all(spread == 0.0)

    def test_deterministic_inference(self):
        net = PriorGenerator(channels=8, num_layers=2)
        img = smooth_color_field(16, 16, 3)
        a = estimate_priors(img, net)
        b = estimate_priors(img, net)
        np.testing.assert_array_equal(a.transmission.data, b.transmission.data)
        np.testing.assert_array_equal(a.background.data, b.background.data)

    def test_blur_front_end_is_contraction(self):
        blur = GaussianBlur(sigma=2.0, kernel_size=9)
        base = torch.rand(1, 3, 24, 24)
        noise = torch.randn(1, 3, 24, 24) * 0.1
        delta = blur(base + noise) - blur(base)
        assert delta.norm() <= noise.norm() + 1e-6

    def test_torch_blur_matches_numpy(self):
        img = smooth_color_field(20, 20, 4)
        blur = GaussianBlur(sigma=2.0, kernel_size=7)
        ours = blur(grid_to_tensor(img))
        ref = gaussian_blur(img, 2.0, 7)
        np.testing.assert_allclose(
            tensor_to_grid(ours).data, ref.data, atol=1e-5
        )


class TestPriorReconstruct:
    def test_full_transmission_returns_reference(self):
        clean = smooth_color_field(12, 12, 5)
        prior = PhysicsPrior(
            ImageGrid(np.ones((12, 12, 3))), ImageGrid(np.full((12, 12, 3), 0.4))
        )
        np.testing.assert_array_equal(
            prior_reconstruct(clean, prior).data, clean.data
        )

    def test_hand_value(self):
        clean = ImageGrid(np.full((4, 4, 3), 0.6))
        prior = PhysicsPrior(
            ImageGrid(np.full((4, 4, 3), 0.5)), ImageGrid(np.full((4, 4, 3), 0.4))
        )
        np.testing.assert_allclose(prior_reconstruct(clean, prior).data, 0.5)

    def test_delegates_to_degrade_bit_exactly(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            clean = ImageGrid(rng.uniform(0, 1, (6, 6, 3)))
            prior = PhysicsPrior(
                ImageGrid(rng.uniform(EPS_T, 1.0, (6, 6, 3))),
                ImageGrid(rng.uniform(0, 1, (6, 6, 3))),
            )
            np.testing.assert_array_equal(
                prior_reconstruct(clean, prior).data, degrade(clean, prior).data
            )


class TestPriorLoss:
    def test_zero_when_identical(self):
        x = torch.rand(1, 3, 16, 16)
        extractor = ConvPyramidFeatures()
        total, rec, per = prior_loss(x, x.clone(), extractor, 1.0, 0.1)
        assert total.item() == 0.0

    def test_constant_offset_l1(self):
        a = torch.full((1, 3, 16, 16), 0.4)
        b = torch.full((1, 3, 16, 16), 0.5)
        total, rec, per = prior_loss(a, b, None, 1.0, 0.0)
        assert total.item() == pytest.approx(0.1, abs=1e-6)

    def test_zero_weights_zero_loss(self):
        a = torch.rand(1, 3, 16, 16)
        b = torch.rand(1, 3, 16, 16)
        total, _, _ = prior_loss(a, b, ConvPyramidFeatures(), 0.0, 0.0)
        assert total.item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            prior_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 9, 9), None)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        extractor = ConvPyramidFeatures().double()
        target = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        # sample away from the L1 kink: keep a clear gap to the target
        a = (target + 0.2 + 0.1 * torch.rand_like(target)).detach()
        a.requires_grad_(True)
        total, _, _ = prior_loss(a, target, extractor, 1.0, 0.1)
        total.backward()
        rng = np.random.default_rng(4)
        h = 1e-6
        for _ in range(10):
            idx = tuple(rng.integers(0, s) for s in a.shape)
            with torch.no_grad():
                ap = a.clone(); ap[idx] += h
                am = a.clone(); am[idx] -= h
                lp, _, _ = prior_loss(ap, target, extractor, 1.0, 0.1)
                lm, _, _ = prior_loss(am, target, extractor, 1.0, 0.1)
            fd = (lp.item() - lm.item()) / (2 * h)
            grad = a.grad[idx].item()
            assert fd == pytest.approx(grad, rel=1e-3, abs=1e-9)

    def test_perceptual_extractor_fixed_and_frozen(self):
        a = ConvPyramidFeatures()
        b = ConvPyramidFeatures()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
            assert not pa.requires_grad
