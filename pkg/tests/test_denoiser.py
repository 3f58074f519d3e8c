import numpy as np
import pytest
import torch

from uwdiff.denoiser import (
    ConditionBundle,
    DenoiserConfig,
    DenoiserBlock,
    GatedMultiScaleFFN,
    PhysicsGateUnit,
    PriorCrossAttention,
    PriorFusedAttention,
    TimeEmbedding,
    UNetDenoiser,
    count_parameters,
    denoise,
    full_scale_config,
)
from uwdiff.grids import GridError, ImageGrid
from uwdiff.physics import smooth_color_field


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def desk_config(**kw):
    base = dict(
        inner_channel=16, channel_multipliers=(1, 2), image_size=32,
        norm_groups=8,
    )
    base.update(kw)
    return DenoiserConfig(**base)


class TestConfig:
    def test_norm_groups_must_divide(self):
        with pytest.raises(ValueError):
            DenoiserConfig(inner_channel=10, norm_groups=8)

    def test_dropout_range(self):
        with pytest.raises(ValueError):
            DenoiserConfig(dropout=1.0)

    def test_even_ffn_kernel(self):
        with pytest.raises(ValueError):
            DenoiserConfig(ffn_kernel_sizes=(4,))

    def test_empty_multipliers(self):
        with pytest.raises(ValueError):
            DenoiserConfig(channel_multipliers=())


class TestCrossAttention:
    @pytest.mark.parametrize("dim", [8, 16, 32])
    def test_shapes_and_row_sums(self, dim):
        cam = PriorCrossAttention(dim)
        prior = torch.randn(2, dim, 4, 4)
        feats = torch.randn(2, dim, 4, 4)
        out, attn = cam(prior, feats, return_attn=True)
        assert out.shape == feats.shape
        assert torch.allclose(
            attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6
        )
        assert (attn >= 0).all()

    def test_constant_keys_give_positionwise_mean_of_values(self):
        cam = PriorCrossAttention(8)
        with torch.no_grad():
            cam.k.weight.zero_()
            cam.k.bias.zero_()
        prior = torch.randn(1, 8, 4, 4)
        feats = torch.randn(1, 8, 4, 4)
        out = cam(prior, feats)
        values = cam.v(prior).reshape(1, 8, 16)
        expected = values.mean(dim=2, keepdim=True).expand(-1, -1, 16)
        assert torch.allclose(out.reshape(1, 8, 16), expected, atol=1e-6)

    def test_spatial_mismatch(self):
        cam = PriorCrossAttention(8)
        with pytest.raises(ValueError):
            cam(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 8, 8))


class TestFusedAttention:
    def test_zero_value_projection_residual_identity(self):
        attn = PriorFusedAttention(8, 16, 4)
        with torch.no_grad():
            attn.v_feat.pw.weight.zero_()
        x = torch.randn(2, 8, 4, 4)
        out = attn(x, torch.randn(2, 8, 4, 4), torch.randn(2, 16))
        assert torch.equal(out, x)

    def test_rows_sum_to_one(self):
        attn = PriorFusedAttention(8, 16, 4)
        _, mat = attn(
            torch.randn(2, 8, 4, 4), torch.randn(2, 8, 4, 4),
            torch.randn(2, 16), return_attn=True,
        )
        assert torch.allclose(mat.sum(-1), torch.ones_like(mat.sum(-1)),
                              atol=1e-6)

    def test_alpha_rescaling_preserves_argmax(self):
        attn = PriorFusedAttention(8, 16, 4)
        x = torch.randn(1, 8, 4, 4)
        prior = torch.randn(1, 8, 4, 4)
        t_vec = torch.randn(1, 16)
        _, mat_before = attn(x, prior, t_vec, return_attn=True)
        with torch.no_grad():
            attn.log_alpha += np.log(2.0)  # doubles alpha, halves logits
        _, mat_after = attn(x, prior, t_vec, return_attn=True)
        assert torch.equal(mat_before.argmax(-1), mat_after.argmax(-1))

    def test_alpha_positive(self):
        attn = PriorFusedAttention(8, 16, 4)
        with torch.no_grad():
            attn.log_alpha.fill_(-30.0)
        assert torch.exp(attn.log_alpha) > 0


class TestPhysicsGateUnit:
    def test_gate_identities(self):
        x = torch.randn(2, 8, 4, 4)
        bg = torch.randn(2, 8, 4, 4)
        ones, zeros = torch.ones_like(x), torch.zeros_like(x)
        assert torch.equal(PhysicsGateUnit.combine(x, ones, zeros, bg), x)
        assert torch.equal(PhysicsGateUnit.combine(x, zeros, ones, bg), bg)

    def test_scalar_hand_value(self):
        x = torch.full((1, 1, 2, 2), 2.0)
        bg = torch.full((1, 1, 2, 2), 4.0)
        out = PhysicsGateUnit.combine(
            x, torch.full_like(x, 0.5), torch.full_like(x, 0.25), bg
        )
        assert torch.allclose(out, torch.full_like(x, 2.0))

    def test_estimate_contracts(self):
        unit = PhysicsGateUnit(8)
        x = torch.randn(2, 8, 5, 5)
        g1, g2, bg = unit.estimate(x)
        for g in (g1, g2):
            assert g.shape == x.shape
            assert (g > 0).all() and (g < 1).all()
        spread = bg.amax(dim=(2, 3)) - bg.amin(dim=(2, 3))
        assert (spread == 0).all()

    def test_background_permutation_invariant(self):
        unit = PhysicsGateUnit(8)
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = torch.randn(1, 8, 4, 4)
            perm = torch.from_numpy(rng.permutation(16))
            shuffled = x.reshape(1, 8, 16)[:, :, perm].reshape(1, 8, 4, 4)
            _, _, bg_a = unit.estimate(x)
            _, _, bg_b = unit.estimate(shuffled)
            assert torch.allclose(bg_a[..., 0, 0], bg_b[..., 0, 0], atol=1e-6)

    def test_combine_linear_in_inputs_for_fixed_gates(self):
        rng = torch.Generator().manual_seed(3)
        x = torch.randn(1, 4, 3, 3, generator=rng)
        y = torch.randn(1, 4, 3, 3, generator=rng)
        g1 = torch.rand(1, 4, 3, 3, generator=rng)
        zeros = torch.zeros_like(g1)
        bg = torch.zeros_like(x)
        a, b = 0.7, -1.3
        lhs = PhysicsGateUnit.combine(a * x + b * y, g1, zeros, bg)
        rhs = a * PhysicsGateUnit.combine(x, g1, zeros, bg) + b * (
            PhysicsGateUnit.combine(y, g1, zeros, bg)
        )
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestGatedFFN:
    def test_zero_projection_identity(self):
        ffn = GatedMultiScaleFFN(8, 4)
        with torch.no_grad():
            ffn.project.weight.zero_()
            ffn.project.bias.zero_()
        x = torch.randn(2, 8, 5, 5)
        assert torch.equal(ffn(x), x)

    @pytest.mark.parametrize("kernels", [(3,), (3, 5), (3, 5, 7)])
    def test_shape_preserved(self, kernels):
        ffn = GatedMultiScaleFFN(8, 4, kernel_sizes=kernels)
        x = torch.randn(1, 8, 6, 6)
        assert ffn(x).shape == x.shape

    def test_expansion_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        ffn = GatedMultiScaleFFN(4, 2).double()
        x = torch.randn(1, 4, 4, 4, dtype=torch.float64)
        probe = torch.randn(1, 4, 4, 4, dtype=torch.float64)

        def loss_value():
            return (ffn(x) * probe).sum()

        loss_value().backward()
        rng = np.random.default_rng(7)
        weight = ffn.expand.weight
        flat = weight.detach().reshape(-1)
        h = 1e-6
        for _ in range(10):
            idx = int(rng.integers(0, flat.numel()))
            with torch.no_grad():
                flat[idx] += h
                lp = loss_value().item()
                flat[idx] -= 2 * h
                lm = loss_value().item()
                flat[idx] += h
            fd = (lp - lm) / (2 * h)
            grad = weight.grad.reshape(-1)[idx].item()
            assert fd == pytest.approx(grad, rel=1e-3, abs=1e-9)


class TestDenoiserBlock:
    def _block(self, use_attention=True):
        return DenoiserBlock(8, 16, desk_config(), use_attention)

    def test_all_residual_branches_zeroed_is_identity(self):
        block = self._block()
        with torch.no_grad():
            block.mixer.v_feat.pw.weight.zero_()
            block.physics.out_proj.weight.zero_()
            block.physics.out_proj.bias.zero_()
            block.ffn.project.weight.zero_()
            block.ffn.project.bias.zero_()
        x = torch.randn(2, 8, 4, 4)
        out = block(x, torch.randn(2, 8, 4, 4), torch.randn(2, 16))
        assert torch.equal(out, x)

    def test_conv_variant_identity(self):
        block = self._block(use_attention=False)
        with torch.no_grad():
            block.mixer.conv2.weight.zero_()
            block.mixer.conv2.bias.zero_()
            block.physics.out_proj.weight.zero_()
            block.physics.out_proj.bias.zero_()
            block.ffn.project.weight.zero_()
            block.ffn.project.bias.zero_()
        x = torch.randn(2, 8, 4, 4)
        assert torch.equal(block(x, None, torch.randn(2, 16)), x)

    def test_finite_for_large_inputs(self):
        block = self._block()
        x = torch.randn(1, 8, 4, 4) * 10.0
        out = block(x, torch.randn(1, 8, 4, 4) * 10.0, torch.randn(1, 16))
        assert torch.isfinite(out).all()

    def test_input_jacobian_matches_finite_differences(self):
        torch.manual_seed(2)
        block = DenoiserBlock(8, 16, desk_config(), True).double()
        x = torch.randn(1, 8, 4, 4, dtype=torch.float64, requires_grad=True)
        prior = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        t_vec = torch.randn(1, 16, dtype=torch.float64)
        probe = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        direction = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        loss = (block(x, prior, t_vec) * probe).sum()
        loss.backward()
        analytic = (x.grad * direction).sum().item()
        h = 1e-6
        with torch.no_grad():
            lp = (block(x + h * direction, prior, t_vec) * probe).sum().item()
            lm = (block(x - h * direction, prior, t_vec) * probe).sum().item()
        fd = (lp - lm) / (2 * h)
        assert fd == pytest.approx(analytic, rel=1e-3)


class TestTimeEmbedding:
    def test_distinct_timesteps_distinct_embeddings(self):
        emb = TimeEmbedding(16, 64)
        t = torch.arange(1, 257)
        vecs = emb(t)
        dists = torch.cdist(vecs, vecs) + torch.eye(256) * 1e9
        assert dists.min() > 1e-6


class TestUNet:
    @pytest.mark.parametrize("size", [32, 64])
    def test_output_shape(self, size):
        cfg = desk_config(image_size=size)
        net = UNetDenoiser(cfg)
        x = torch.randn(1, 3, size, size)
        cond = torch.randn(1, 3, size, size)
        out = net(x, cond, cond, torch.rand(1, 3, size, size), 7)
        assert out.shape == (1, 3, size, size)

    def test_deterministic_in_eval(self):
        net = UNetDenoiser(desk_config()).eval()
        x = torch.randn(1, 3, 32, 32)
        c = torch.randn(1, 3, 32, 32)
        tm = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            a = net(x, c, c, tm, 3)
            b = net(x, c, c, tm, 3)
        assert torch.equal(a, b)

    def test_misaligned_condition_rejected(self):
        net = UNetDenoiser(desk_config())
        x = torch.randn(1, 3, 32, 32)
        bad = torch.randn(1, 3, 16, 16)
        with pytest.raises(ValueError):
            net(x, bad, x, x, 1)

    def test_indivisible_size_rejected(self):
        net = UNetDenoiser(desk_config(channel_multipliers=(1, 2, 4)))
        x = torch.randn(1, 3, 30, 30)
        with pytest.raises(ValueError):
            net(x, x, x, x, 1)

    def test_grid_level_wrapper(self):
        net = UNetDenoiser(desk_config())
        x_t = smooth_color_field(32, 32, 1).to_signed()
        cond = ConditionBundle(
            condition=smooth_color_field(32, 32, 2).to_signed(),
            background=smooth_color_field(32, 32, 3),
            transmission=smooth_color_field(32, 32, 4),
        )
        out = denoise(x_t, cond, 5, net)
        assert out.shape == x_t.shape

    def test_condition_bundle_alignment(self):
        with pytest.raises(GridError):
            ConditionBundle(
                condition=smooth_color_field(32, 32, 1),
                background=smooth_color_field(16, 16, 2),
                transmission=smooth_color_field(32, 32, 3),
            )


class TestCapacity:
    def test_full_scale_denoiser_near_published_size(self):
        net = UNetDenoiser(full_scale_config())
        count = count_parameters(net)
        assert 0.9 * 41_310_000 <= count <= 1.1 * 41_310_000
