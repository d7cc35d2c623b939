"""Cascaded CNN reconstruction with interleaved data consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .kspace import IMAGE, ComplexImage, MeasuredKSpace, dc_tensor, ifft2c


class DivergenceError(RuntimeError):
    """Raised when a forward pass produces non-finite activations."""


@dataclass
class ReconConfig:
    n_cascades: int = 2
    convs_per_block: int = 3
    channels: int = 16
    kernel: int = 3
    dc_lambda: float | None = None
    residual: bool = True

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.n_cascades < 1:
            raise ValueError("n_cascades must be >= 1")
        if self.convs_per_block < 2:
            raise ValueError("convs_per_block must be >= 2")
        if self.dc_lambda is not None and self.dc_lambda < 0:
            raise ValueError("dc_lambda must be non-negative")


def recon_param_count(cfg: ReconConfig) -> int:
    """Closed-form parameter count: per cascade, 2->ch, (n-2) x ch->ch, ch->2."""
    k2, ch = cfg.kernel ** 2, cfg.channels
    per_block = (k2 * 2 * ch + ch) + (cfg.convs_per_block - 2) * (k2 * ch * ch + ch) + (k2 * ch * 2 + 2)
    return cfg.n_cascades * per_block


class ConvBlock(nn.Module):
    """Plain conv stack producing a residual update for a 2-channel complex image."""

    def __init__(self, n_convs: int, channels: int, kernel: int):
        super().__init__()
        widths = [2] + [channels] * (n_convs - 1) + [2]
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
            for cin, cout in zip(widths[:-1], widths[1:])
        )

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
        return x


class ReconNet(nn.Module):
    def __init__(self, cfg: ReconConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            ConvBlock(cfg.convs_per_block, cfg.channels, cfg.kernel) for _ in range(cfg.n_cascades)
        )

    def forward(self, k_meas: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
        """Map measured k-space ``(B, 2, H, W)`` and line weights to a 2-channel image."""
        x = ifft2c(k_meas)
        for block in self.blocks:
            update = block(x)
            x = x + update if self.cfg.residual else update
            x = dc_tensor(x, k_meas, weights, self.cfg.dc_lambda)
        if not torch.isfinite(x).all():
            raise DivergenceError("non-finite activations in the reconstruction cascade")
        return x

    def shape_manifest(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}


def _fan_in_init(module: nn.Module, gen: torch.Generator) -> None:
    # He-uniform weights, Uniform(+-sqrt(6 / fan_in)), keep ReLU activations from
    # shrinking layer by layer; biases get the smaller Uniform(+-sqrt(1 / fan_in)).
    def uniform(shape, bound):
        return torch.rand(shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound)

    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(uniform(m.weight.shape, math.sqrt(6.0 / fan_in)))
                m.bias.copy_(uniform(m.bias.shape, math.sqrt(1.0 / fan_in)))


def recon_init(cfg: ReconConfig, seed: int, dtype=torch.float32) -> ReconNet:
    net = ReconNet(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    _fan_in_init(net, gen)
    return net


def recon_forward(net: ReconNet, m: MeasuredKSpace) -> ComplexImage:
    """Reconstruct a complex image from a single (optionally batched) measurement."""
    k = m.kspace.data
    expected_in = net.blocks[0].convs[0].weight.dtype
    if k.dtype != expected_in:
        k = k.to(expected_in)
    return ComplexImage(net(k, m.line_weights().to(k.dtype)), IMAGE)
