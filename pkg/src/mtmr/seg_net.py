"""U-Net-shaped segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .recon_net import DivergenceError, _fan_in_init


@dataclass
class SegConfig:
    depth: int = 3
    base_channels: int = 16
    n_classes: int = 2
    kernel: int = 3

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def level_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]


def seg_param_count(cfg: SegConfig) -> int:
    k2 = cfg.kernel ** 2
    ch = cfg.level_channels()

    def conv(cin, cout, ksq=k2):
        return ksq * cin * cout + cout

    total = 0
    cin = 1
    for c in ch[:-1]:
        total += conv(cin, c) + conv(c, c)
        cin = c
    total += conv(ch[-2], ch[-1]) + conv(ch[-1], ch[-1])
    for lvl in range(cfg.depth):
        c, c_up = ch[lvl], ch[lvl + 1]
        total += conv(c_up, c) + conv(2 * c, c) + conv(c, c)
    total += conv(ch[0], cfg.n_classes, 1)
    return total


class DoubleConv(nn.Module):
    def __init__(self, cin, cout, kernel):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv2d(cout, cout, kernel, padding=kernel // 2)

    def forward(self, x):
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))


class UpBlock(nn.Module):
    """Nearest-neighbour upsample + conv, concatenate the skip, then two convs."""

    def __init__(self, cin, cout, kernel):
        super().__init__()
        self.up_conv = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
        self.merge = DoubleConv(2 * cout, cout, kernel)

    def forward(self, x, skip):
        x = torch.relu(self.up_conv(F.interpolate(x, scale_factor=2, mode="nearest")))
        if x.shape != skip.shape:
            raise ValueError(f"skip shape {tuple(skip.shape)} != decoder shape {tuple(x.shape)}")
        return self.merge(torch.cat([x, skip], dim=1))


class SegNet(nn.Module):
    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.level_channels()
        self.down = nn.ModuleList(
            DoubleConv(cin, cout, cfg.kernel) for cin, cout in zip([1] + ch[:-2], ch[:-1])
        )
        self.bottom = DoubleConv(ch[-2], ch[-1], cfg.kernel)
        self.up = nn.ModuleList(UpBlock(ch[i + 1], ch[i], cfg.kernel) for i in reversed(range(cfg.depth)))
        self.head = nn.Conv2d(ch[0], cfg.n_classes, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, C, H, W)`` for a magnitude image batch ``(B, H, W)``."""
        factor = 2 ** self.cfg.depth
        if img.shape[-1] % factor or img.shape[-2] % factor:
            raise ValueError(f"input shape {tuple(img.shape[-2:])} not divisible by {factor}")
        x = img.unsqueeze(1)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = block(x, skip)
        logits = self.head(x)
        if not torch.isfinite(logits).all():
            raise DivergenceError("non-finite activations in the segmentation network")
        return logits

    def shape_manifest(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}


def seg_init(cfg: SegConfig, seed: int, dtype=torch.float32) -> SegNet:
    net = SegNet(cfg).to(dtype)
    _fan_in_init(net, torch.Generator().manual_seed(int(seed)))
    return net


def seg_forward(net: SegNet, img: torch.Tensor) -> torch.Tensor:
    """Per-class probabilities ``(B, C, H, W)``; a 2D input gives ``(C, H, W)``."""
    img = torch.as_tensor(img, dtype=net.head.weight.dtype)
    squeeze = img.ndim == 2
    probs = torch.softmax(net(img[None] if squeeze else img), dim=1)
    return probs[0] if squeeze else probs


def binarize(probs) -> np.ndarray:
    """Per-pixel argmax over the class axis (axis -3); ties go to the lower index."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    # np.argmax returns the first maximal index, which gives the tie rule.
    return np.argmax(probs, axis=-3).astype(np.int64)
