"""Prior-estimation branch: small convolutional nets for transmission and
background light, plus the reconstruction loss that supervises them.

Both sub-networks stack dynamic convolutions (attention-weighted mixtures of
parallel kernel banks) with channel/spatial attention.  The background net
sees a Gaussian-blurred input so it keys on global appearance rather than
texture, and ends in a global spatial average: one light level per channel.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grids import EPS_T, ImageGrid, PhysicsPrior
from .physics import degrade, gaussian_kernel_1d


def grid_to_tensor(grid: ImageGrid) -> torch.Tensor:
    """H x W x C float64 grid -> 1 x C x H x W float32 tensor."""
    return torch.from_numpy(grid.data.astype(np.float32)).permute(2, 0, 1)[None]


def tensor_to_grid(
    tensor: torch.Tensor, value_range=(0.0, 1.0), check_range: bool = False
) -> ImageGrid:
    """1 x C x H x W tensor -> grid (no clipping unless range-checked)."""
    data = tensor.detach().squeeze(0).permute(1, 2, 0).cpu().numpy().astype(np.float64)
    return ImageGrid(data, value_range, check_range=check_range)


def pad_symmetric(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Half-sample symmetric padding (edge pixels mirrored, edge included)."""
    if pad == 0:
        return x
    left = x[..., :pad].flip(-1)
    right = x[..., -pad:].flip(-1)
    x = torch.cat([left, x, right], dim=-1)
    top = x[..., :pad, :].flip(-2)
    bottom = x[..., -pad:, :].flip(-2)
    return torch.cat([top, x, bottom], dim=-2)


class GaussianBlur(nn.Module):
    """Fixed separable Gaussian blur matching the numpy-side kernel."""

    def __init__(self, sigma: float = 5.0, kernel_size: int = 21):
        super().__init__()
        kernel = torch.from_numpy(
            gaussian_kernel_1d(sigma, kernel_size).astype(np.float32)
        )
        self.register_buffer("kernel", kernel)
        self.pad = kernel_size // 2

    def forward(self, x):
        b, c, h, w = x.shape
        k = self.kernel[None, None, None, :].expand(c, 1, 1, -1)
        x = pad_symmetric(x, self.pad)
        x = F.conv2d(x, k, groups=c)
        x = F.conv2d(x, k.transpose(2, 3), groups=c)
        return x


class DynamicConv2d(nn.Module):
    """Conv layer whose kernel is an attention-weighted mix of K banks.

    The gate is a small pooled MLP with a softmax head, so mixture weights
    are nonnegative and sum to one per input sample.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3,
                 num_kernels: int = 4):
        super().__init__()
        if num_kernels < 2:
            raise ValueError("dynamic conv needs at least 2 kernel banks")
        self.num_kernels = num_kernels
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(
            torch.empty(num_kernels, out_ch, in_ch, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(num_kernels, out_ch))
        nn.init.kaiming_normal_(self.weight, nonlinearity="relu")
        hidden = max(in_ch // 2, num_kernels)
        self.gate_fc1 = nn.Linear(in_ch, hidden)
        self.gate_fc2 = nn.Linear(hidden, num_kernels)

    def gate_weights(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        return torch.softmax(self.gate_fc2(F.relu(self.gate_fc1(pooled))), dim=1)

    def forward(self, x, gate: torch.Tensor | None = None):
        b, c, h, w = x.shape
        if x.shape[1] != self.weight.shape[2]:
            raise ValueError(
                f"channel mismatch: input {x.shape[1]} vs bank {self.weight.shape[2]}"
            )
        if gate is None:
            gate = self.gate_weights(x)
        k = self.num_kernels
        # per-sample mixed kernels, applied as one grouped convolution
        mixed_w = torch.einsum("bk,koihw->boihw", gate, self.weight)
        mixed_b = gate @ self.bias
        out_ch = mixed_w.shape[1]
        x = x.reshape(1, b * c, h, w)
        weight = mixed_w.reshape(b * out_ch, c, self.kernel_size, self.kernel_size)
        out = F.conv2d(
            x, weight, mixed_b.reshape(-1), padding=self.kernel_size // 2, groups=b
        )
        return out.reshape(b, out_ch, h, w)


class ChannelGate(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 2)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))


class SpatialGate(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        stacked = torch.cat(
            [x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1
        )
        return torch.sigmoid(self.conv(stacked))


class AttentionBlock(nn.Module):
    """Channel gate followed by spatial gate; both sigmoid, so the output
    never exceeds the input in magnitude."""

    def __init__(self, channels: int):
        super().__init__()
        self.channel_gate = ChannelGate(channels)
        self.spatial_gate = SpatialGate()

    def forward(self, x):
        x = x * self.channel_gate(x)
        return x * self.spatial_gate(x)


class _PriorSubNet(nn.Module):
    def __init__(self, channels: int, num_layers: int, num_kernels: int):
        super().__init__()
        self.stem = nn.Conv2d(3, channels, 3, padding=1)
        self.layers = nn.ModuleList(
            DynamicConv2d(channels, channels, num_kernels=num_kernels)
            for _ in range(num_layers)
        )
        self.attn = nn.ModuleList(
            AttentionBlock(channels) for _ in range(num_layers)
        )
        self.head = nn.Conv2d(channels, 3, 1)

    def features(self, x):
        h = F.gelu(self.stem(x))
        for layer, attn in zip(self.layers, self.attn):
            h = attn(F.gelu(layer(h)))
        return h


class PriorGenerator(nn.Module):
    """Estimates (transmission, background) from a degraded [0, 1] image."""

    def __init__(self, channels: int = 16, num_layers: int = 4,
                 num_kernels: int = 4, blur_sigma: float = 5.0,
                 blur_kernel: int = 21):
        super().__init__()
        self.transmission_net = _PriorSubNet(channels, num_layers, num_kernels)
        self.background_net = _PriorSubNet(channels, num_layers, num_kernels)
        self.blur = GaussianBlur(blur_sigma, blur_kernel)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t_logits = self.transmission_net.head(self.transmission_net.features(x))
        transmission = torch.sigmoid(t_logits).clamp(min=EPS_T)
        blurred = self.blur(x)
        b_logits = self.background_net.head(self.background_net.features(blurred))
        # one level per channel: average the logits spatially, then squash
        background = torch.sigmoid(b_logits.mean(dim=(2, 3), keepdim=True))
        background = background.expand_as(transmission)
        return transmission, background


def estimate_priors(image: ImageGrid, net: PriorGenerator) -> PhysicsPrior:
    """Run the generator on one physical-space image."""
    was_training = net.training
    net.eval()
    with torch.no_grad():
        t, b = net(grid_to_tensor(image))
    if was_training:
        net.train()
    return PhysicsPrior(
        transmission=tensor_to_grid(t, check_range=False),
        background=tensor_to_grid(b, check_range=False),
    )


def prior_reconstruct(clean: ImageGrid, prior: PhysicsPrior) -> ImageGrid:
    """Re-degrade the reference image with the estimated prior (supervision
    target identity); same math as the forward physics model."""
    return degrade(clean, prior)


class ConvPyramidFeatures(nn.Module):
    """Deterministic random-weight feature extractor for the perceptual term.

    Three strided conv stages with a fixed seed; frozen.  Stands in for a
    pretrained backbone so the loss runs with no downloaded assets.
    """

    def __init__(self, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, 16, 32, 64]
        self.convs = nn.ModuleList()
        for cin, cout in zip(chans, chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen)
                    * (2.0 / (cin * 9)) ** 0.5
                )
                conv.bias.zero_()
            self.convs.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        for conv in self.convs:
            x = F.gelu(conv(x))
        return x


class VGGFeatures(nn.Module):
    """Optional pretrained backend: VGG16 conv features up to relu3_3.

    Weights are an external asset; pass a local state-dict path saved from
    torchvision's vgg16 (no downloads happen here).
    """

    _CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256]

    def __init__(self, weights_path: str):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for item in self._CFG:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers.append(nn.Conv2d(cin, item, 3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                cin = item
        self.features = nn.Sequential(*layers)
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        own = self.features.state_dict()
        filtered = {k: v for k, v in state.items() if k in own}
        missing = set(own) - set(filtered)
        if missing:
            raise ValueError(f"weights file missing layers: {sorted(missing)}")
        self.features.load_state_dict(filtered)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.features(x)


def _as_batch_tensor(x) -> torch.Tensor:
    if isinstance(x, ImageGrid):
        return grid_to_tensor(x)
    return x


def prior_loss(
    reconstructed,
    target,
    extractor: nn.Module | None,
    lambda1: float = 1.0,
    lambda2: float = 0.1,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction, perceptual) supervision for the prior branch.

    reconstruction = mean |a - b|; perceptual = RMS distance between
    extractor features.  Accepts grids or batched tensors.
    """
    a = _as_batch_tensor(reconstructed)
    b = _as_batch_tensor(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    rec = (a - b).abs().mean()
    if lambda2 != 0.0 and extractor is not None:
        per = torch.sqrt(((extractor(a) - extractor(b)) ** 2).mean())
    else:
        per = torch.zeros((), dtype=a.dtype, device=a.device)
    total = lambda1 * rec + lambda2 * per
    return total, rec, per
