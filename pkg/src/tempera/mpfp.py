"""Multi-pass feature pyramid: one set of 2D weights, run ``n`` times at decreasing depth.

Level ``l`` holds ``base * 2**l`` channels at ``1/2**l`` resolution. Pass
``k`` (1-based) descends ``n - k + 1`` levels and climbs back, reusing the
same downsample (A), upsample (B) and skip (C) blocks as every other pass.
The ``n`` full-resolution outputs are concatenated and merged by a final
convolution.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from .errors import ConfigError, ShapeError


class PyramidConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    levels: int = Field(3, ge=1)
    base_channels: int = Field(16, ge=1)
    kernel: int = Field(3, ge=1)
    pool: int = Field(2, ge=2)
    in_channels: int = Field(1, ge=1)
    se_reduction: int = Field(4, ge=1)

    @field_validator("kernel")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("kernel must be odd")
        return v

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


class BlockA(nn.Module):
    """Two convolutions, pad to a multiple of the pool factor, max-pool."""

    def __init__(self, cin, cout, k, pool):
        super().__init__()
        self.conv1 = _conv(cin, cout, k)
        self.conv2 = _conv(cout, cout, k)
        self.pool = pool

    def forward(self, x):
        x = F.selu(self.conv2(F.selu(self.conv1(x))))
        h, w = x.shape[-2:]
        p = self.pool
        x = F.pad(x, (0, -w % p, 0, -h % p))
        return F.max_pool2d(x, p)


class BlockB(nn.Module):
    """Two convolutions, bilinear upsampling, crop back to the lateral extents."""

    def __init__(self, cin, cout, k, pool):
        super().__init__()
        self.conv1 = _conv(cin, cout, k)
        self.conv2 = _conv(cout, cout, k)
        self.pool = pool

    def forward(self, x, size):
        x = F.selu(self.conv2(F.selu(self.conv1(x))))
        x = F.interpolate(x, scale_factor=self.pool, mode="bilinear", align_corners=False)
        return x[..., : size[0], : size[1]]


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x):
        s = x.mean(dim=(-2, -1))
        return torch.sigmoid(self.fc2(F.selu(self.fc1(s))))

    def forward(self, x):
        return x * self.gates(x)[..., None, None]


class BlockC(nn.Module):
    """Lateral convolution summed with the upsampled path, then channel gating."""

    def __init__(self, channels, k, reduction):
        super().__init__()
        self.lateral = _conv(channels, channels, k)
        self.se = SqueezeExcite(channels, reduction)

    def forward(self, lateral, upsampled):
        if lateral.shape != upsampled.shape:
            raise ShapeError(f"skip inputs differ: {tuple(lateral.shape)} vs {tuple(upsampled.shape)}")
        return self.se(F.selu(self.lateral(lateral)) + upsampled)


class MultiPassPyramid(nn.Module):
    """Shared 2D extractor; input ``(slices, in_channels, H, W)``, output ``(slices, base, H, W)``."""

    def __init__(self, config: PyramidConfig | None = None):
        super().__init__()
        self.config = cfg = config or PyramidConfig()
        k, p, n = cfg.kernel, cfg.pool, cfg.levels
        self.adapter = _conv(cfg.in_channels, cfg.base_channels, k)
        self.down = nn.ModuleList(BlockA(cfg.channels(l), cfg.channels(l + 1), k, p) for l in range(n))
        self.up = nn.ModuleList(BlockB(cfg.channels(l + 1), cfg.channels(l), k, p) for l in range(n))
        self.skip = nn.ModuleList(BlockC(cfg.channels(l), k, cfg.se_reduction) for l in range(n))
        self.merge = _conv(n * cfg.base_channels, cfg.base_channels, k)

    def block_a(self, x, level: int):
        p = self.config.pool
        if min(x.shape[-2:]) < p:
            raise ShapeError(f"level {level}: extents {tuple(x.shape[-2:])} smaller than pool factor {p}")
        return self.down[level](x)

    def block_b(self, x, level: int, size):
        return self.up[level](x, size)

    def block_c(self, lateral, upsampled, level: int):
        return self.skip[level](lateral, upsampled)

    @staticmethod
    def depth(levels: int, k: int) -> int:
        return levels - k + 1

    def _pass(self, x0, k):
        n = self.config.levels
        if not 1 <= k <= n:
            raise ConfigError(f"pass index {k} outside 1..{n}")
        laterals = [x0]
        x = x0
        for level in range(self.depth(n, k)):
            x = self.block_a(x, level)
            laterals.append(x)
        for level in reversed(range(self.depth(n, k))):
            up = self.block_b(x, level, laterals[level].shape[-2:])
            x = self.block_c(laterals[level], up, level)
        return x

    def pyramid_forward(self, image, k: int):
        """Output of pass ``k`` alone."""
        return self._pass(F.selu(self.adapter(image)), k)

    def passes(self, image):
        x0 = F.selu(self.adapter(image))
        return [self._pass(x0, k) for k in range(1, self.config.levels + 1)]

    def forward(self, image):
        return F.selu(self.merge(torch.cat(self.passes(image), dim=1)))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
