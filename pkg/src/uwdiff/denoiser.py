"""U-shaped noise predictor guided by physics priors.

The input is the channel concat (x_t, background, condition).  Each stage at
or below the attention resolution injects the transmission map through a
cross-attention module whose output feeds the fused-query self-attention of
that stage's blocks; finer stages run convolution-only blocks.  Every block
also applies a feature-space inversion of the scattering model (gated mix of
the features with a pooled background feature) and a gated multi-scale
feed-forward network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import ImageGrid, SIGNED_RANGE, require_same_shape
from .priors import grid_to_tensor, tensor_to_grid


@dataclass(frozen=True)
class DenoiserConfig:
    """Size and layout knobs; defaults are the desk-scale profile."""

    inner_channel: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_resolution: int = 16
    dropout: float = 0.0
    norm_groups: int = 8
    ffn_kernel_sizes: tuple[int, ...] = (3, 5)
    ffn_expansion: float = 2.66
    blocks_per_stage: int = 1
    image_size: int = 64

    def __post_init__(self) -> None:
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be nonempty")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for mult in self.channel_multipliers:
            if (self.inner_channel * mult) % self.norm_groups != 0:
                raise ValueError(
                    f"norm_groups {self.norm_groups} must divide stage width "
                    f"{self.inner_channel * mult}"
                )
        if any(k % 2 == 0 for k in self.ffn_kernel_sizes):
            raise ValueError("ffn kernel sizes must be odd")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.inner_channel * m for m in self.channel_multipliers)

    @property
    def stage_resolutions(self) -> tuple[int, ...]:
        return tuple(
            self.image_size // (2**i) for i in range(len(self.channel_multipliers))
        )


def full_scale_config() -> DenoiserConfig:
    """Published-scale profile (256 px training crops)."""
    return DenoiserConfig(
        inner_channel=48,
        channel_multipliers=(1, 2, 4, 8, 8),
        attention_resolution=16,
        dropout=0.2,
        norm_groups=24,
        blocks_per_stage=2,
        image_size=256,
    )


@dataclass
class ConditionBundle:
    """Conditioning images for one denoiser call, all spatially aligned."""

    condition: ImageGrid
    background: ImageGrid
    transmission: ImageGrid

    def __post_init__(self) -> None:
        require_same_shape(self.condition, self.background, "condition bundle")
        require_same_shape(self.condition, self.transmission, "condition bundle")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos timestep embedding; distinct t stay distinct."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.float32, device=t.device)
        / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.proj = nn.Sequential(
            nn.Linear(base_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.proj(sinusoidal_embedding(t, self.base_dim))


class ConvProj(nn.Module):
    """Pointwise then depthwise projection used by the attention paths."""

    def __init__(self, dim: int):
        super().__init__()
        self.pw = nn.Conv2d(dim, dim, 1, bias=False)
        self.dw = nn.Conv2d(dim, dim, 3, padding=1, groups=dim, bias=False)

    def forward(self, x):
        return self.dw(self.pw(x))


def _tokens(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(1, 2)


def _untokens(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.transpose(1, 2).reshape(b, c, h, w)


class PriorCrossAttention(nn.Module):
    """Cross attention taking queries/values from prior features and keys
    from the image features; rows of the attention matrix sum to one."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Conv2d(dim, dim, 1)
        self.k = nn.Conv2d(dim, dim, 1)
        self.v = nn.Conv2d(dim, dim, 1)
        self.scale = dim**-0.5

    def forward(self, prior_feats, feats, return_attn: bool = False):
        if prior_feats.shape[-2:] != feats.shape[-2:]:
            raise ValueError(
                f"spatial mismatch {prior_feats.shape[-2:]} vs {feats.shape[-2:]}"
            )
        b, c, h, w = feats.shape
        q = _tokens(self.q(prior_feats))
        k = _tokens(self.k(feats))
        v = _tokens(self.v(prior_feats))
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = _untokens(attn @ v, h, w)
        if return_attn:
            return out, attn
        return out


class PriorFusedAttention(nn.Module):
    """Self-attention whose query fuses feature- and prior-derived queries.

    Residual by construction: zeroing the value projection returns the input
    exactly.  The logit scale alpha is learnable and kept positive via exp;
    it starts at sqrt(dim).
    """

    def __init__(self, dim: int, t_dim: int, norm_groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups, dim)
        self.t_proj = nn.Linear(t_dim, dim)
        self.q_feat = ConvProj(dim)
        self.k_feat = ConvProj(dim)
        self.v_feat = ConvProj(dim)
        self.q_prior = ConvProj(dim)
        self.q_fuse = nn.Conv2d(2 * dim, dim, 1)
        self.log_alpha = nn.Parameter(torch.tensor(0.5 * math.log(dim)))

    def forward(self, x, prior_embed, t_vec, return_attn: bool = False):
        b, c, h, w = x.shape
        shifted = self.norm(x) + self.t_proj(t_vec)[:, :, None, None]
        q = self.q_fuse(
            torch.cat([self.q_feat(shifted), self.q_prior(prior_embed)], dim=1)
        )
        k = self.k_feat(shifted)
        v = self.v_feat(shifted)
        alpha = torch.exp(self.log_alpha)
        logits = _tokens(q) @ _tokens(k).transpose(1, 2) / alpha
        attn = torch.softmax(logits, dim=-1)
        out = x + _untokens(attn @ _tokens(v), h, w)
        if return_attn:
            return out, attn
        return out


class PhysicsGateUnit(nn.Module):
    """Feature-space realization of the inverted scattering model.

    estimate() produces two per-position sigmoid gates and a spatially
    constant background feature (global average pool, squashed, replicated);
    combine() mixes them as gate1 * features + gate2 * background.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.gate_conv1 = nn.Conv2d(dim, dim, 1)
        self.gate_conv2 = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.gate_conv3 = nn.Conv2d(dim, 2 * dim, 1)
        self.bg_fc1 = nn.Conv2d(dim, dim, 1)
        self.bg_fc2 = nn.Conv2d(dim, dim, 1)
        self.out_proj = nn.Conv2d(dim, dim, 1)

    def estimate(self, x):
        gates = torch.sigmoid(
            self.gate_conv3(F.relu(self.gate_conv2(self.gate_conv1(x))))
        )
        gate1, gate2 = gates.chunk(2, dim=1)
        pooled = x.mean(dim=(2, 3), keepdim=True)
        bg = torch.sigmoid(self.bg_fc2(F.relu(self.bg_fc1(pooled))))
        return gate1, gate2, bg.expand_as(x)

    @staticmethod
    def combine(x, gate1, gate2, background):
        return gate1 * x + gate2 * background

    def forward(self, x):
        gate1, gate2, background = self.estimate(x)
        return self.out_proj(self.combine(x, gate1, gate2, background))


class GatedMultiScaleFFN(nn.Module):
    """Gated feed-forward with parallel multi-scale depthwise mixing."""

    def __init__(self, dim: int, norm_groups: int,
                 kernel_sizes: tuple[int, ...] = (3, 5),
                 expansion: float = 2.66, dropout: float = 0.0):
        super().__init__()
        hidden = int(dim * expansion)
        self.norm = nn.GroupNorm(norm_groups, dim)
        self.expand = nn.Conv2d(dim, 2 * hidden, 1)
        self.mixers = nn.ModuleList(
            nn.Conv2d(2 * hidden, 2 * hidden, k, padding=k // 2, groups=2 * hidden)
            for k in kernel_sizes
        )
        self.project = nn.Conv2d(hidden, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.expand(self.norm(x))
        h = sum(mix(h) for mix in self.mixers)
        gate, value = h.chunk(2, dim=1)
        return x + self.drop(self.project(F.gelu(gate) * value))


class ConvMixer(nn.Module):
    """Residual conv block used at resolutions too fine for attention."""

    def __init__(self, dim: int, t_dim: int, norm_groups: int, dropout: float):
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups, dim)
        self.t_proj = nn.Linear(t_dim, dim)
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, prior_embed, t_vec):
        h = self.norm(x) + self.t_proj(t_vec)[:, :, None, None]
        return x + self.conv2(self.drop(F.gelu(self.conv1(h))))


class DenoiserBlock(nn.Module):
    """Attention (or conv mixer) -> physics gate (residual) -> gated FFN."""

    def __init__(self, dim: int, t_dim: int, cfg: DenoiserConfig,
                 use_attention: bool):
        super().__init__()
        self.use_attention = use_attention
        if use_attention:
            self.mixer = PriorFusedAttention(dim, t_dim, cfg.norm_groups)
        else:
            self.mixer = ConvMixer(dim, t_dim, cfg.norm_groups, cfg.dropout)
        self.physics = PhysicsGateUnit(dim)
        self.ffn = GatedMultiScaleFFN(
            dim, cfg.norm_groups, cfg.ffn_kernel_sizes, cfg.ffn_expansion,
            cfg.dropout,
        )

    def forward(self, x, prior_embed, t_vec):
        x = self.mixer(x, prior_embed, t_vec)
        x = x + self.physics(x)
        return self.ffn(x)


class _Stage(nn.Module):
    """One resolution level: optional prior cross-attention shared by its
    blocks."""

    def __init__(self, dim: int, t_dim: int, cfg: DenoiserConfig,
                 num_blocks: int, use_attention: bool):
        super().__init__()
        self.use_attention = use_attention
        if use_attention:
            self.prior_proj = nn.Conv2d(3, dim, 1)
            self.cross_attn = PriorCrossAttention(dim)
        self.blocks = nn.ModuleList(
            DenoiserBlock(dim, t_dim, cfg, use_attention)
            for _ in range(num_blocks)
        )

    def forward(self, x, transmission, t_vec):
        prior_embed = None
        if self.use_attention:
            prior = F.adaptive_avg_pool2d(transmission, x.shape[-2:])
            prior_embed = self.cross_attn(self.prior_proj(prior), x)
        for block in self.blocks:
            x = block(x, prior_embed, t_vec)
        return x


class UNetDenoiser(nn.Module):
    """Noise predictor over the 9-channel (x_t, background, condition)
    input."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        chans = cfg.stage_channels
        resolutions = cfg.stage_resolutions
        t_dim = cfg.inner_channel * 4
        self.time_mlp = TimeEmbedding(cfg.inner_channel, t_dim)
        self.stem = nn.Conv2d(9, chans[0], 3, padding=1)

        def attn_at(i: int) -> bool:
            return resolutions[i] <= cfg.attention_resolution

        self.encoder = nn.ModuleList(
            _Stage(chans[i], t_dim, cfg, cfg.blocks_per_stage, attn_at(i))
            for i in range(len(chans))
        )
        self.down = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(len(chans) - 1)
        )
        self.middle = _Stage(
            chans[-1], t_dim, cfg, 2, attn_at(len(chans) - 1)
        )
        self.up = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i], 3, padding=1)
            for i in reversed(range(len(chans) - 1))
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * chans[i], chans[i], 1)
            for i in reversed(range(len(chans) - 1))
        )
        self.decoder = nn.ModuleList(
            _Stage(chans[i], t_dim, cfg, cfg.blocks_per_stage, attn_at(i))
            for i in reversed(range(len(chans) - 1))
        )
        self.head_norm = nn.GroupNorm(cfg.norm_groups, chans[0])
        self.head = nn.Conv2d(chans[0], 3, 3, padding=1)

    def forward(self, x_t, condition, background, transmission, t):
        depth = len(self.cfg.channel_multipliers) - 1
        h, w = x_t.shape[-2:]
        if depth and (h % 2**depth or w % 2**depth):
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{depth} for this layout"
            )
        for other in (condition, background, transmission):
            if other.shape[-2:] != x_t.shape[-2:]:
                raise ValueError("condition images misaligned with noisy input")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t), device=x_t.device)
        t_vec = self.time_mlp(t)
        x = self.stem(torch.cat([x_t, background, condition], dim=1))
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x, transmission, t_vec)
            if i < len(self.down):
                skips.append(x)
                x = self.down[i](x)
        x = self.middle(x, transmission, t_vec)
        for up, fuse, stage in zip(self.up, self.fuse, self.decoder):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = fuse(torch.cat([x, skips.pop()], dim=1))
            x = stage(x, transmission, t_vec)
        return self.head(F.silu(self.head_norm(x)))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def denoise(
    x_t: ImageGrid, cond: ConditionBundle, t: int, net: UNetDenoiser
) -> ImageGrid:
    """Single-image inference wrapper around the torch module."""
    require_same_shape(x_t, cond.condition, "noisy input and condition")
    was_training = net.training
    net.eval()
    with torch.no_grad():
        eps_hat = net(
            grid_to_tensor(x_t),
            grid_to_tensor(cond.condition),
            grid_to_tensor(cond.background),
            grid_to_tensor(cond.transmission),
            t,
        )
    if was_training:
        net.train()
    return tensor_to_grid(eps_hat, SIGNED_RANGE)
