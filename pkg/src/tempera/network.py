"""Full two-view network: shared pyramid, 3D SA branch, 2D LA branch fused with GST output."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .errors import ShapeError
from .gst import GstLayer
from .mpfp import MultiPassPyramid, PyramidConfig
from .volume import SegmentationMask, VolumeGrid


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pyramid: PyramidConfig = PyramidConfig()
    branch_channels: int = Field(32, ge=1)

    @classmethod
    def miniature(cls) -> "NetworkConfig":
        return cls(pyramid=PyramidConfig(levels=2, base_channels=4), branch_channels=4)


@dataclass
class CaseForward:
    sa_probability: torch.Tensor  # (H, W, S)
    la_probability: torch.Tensor  # (H, W, 1)
    intermediate: dict = field(default_factory=dict)


class TemperaNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = cfg = config or NetworkConfig()
        c, b = cfg.pyramid.base_channels, cfg.branch_channels
        self.pyramid = MultiPassPyramid(cfg.pyramid)
        self.sa_conv1 = nn.Conv3d(c, b, 3, padding=1)
        self.sa_conv2 = nn.Conv3d(b, b, 3, padding=1)
        self.sa_head = nn.Conv3d(b, 1, 1)
        self.la_conv1 = nn.Conv2d(c, b, 3, padding=1)
        # the transformed SA prediction joins as one extra channel before the last LA block
        self.la_conv2 = nn.Conv2d(b + 1, b, 3, padding=1)
        self.la_head = nn.Conv2d(b, 1, 1)

    def forward(self, sa: torch.Tensor, la: torch.Tensor, gst: GstLayer, fuse: bool = True) -> CaseForward:
        """``sa`` is (H, W, S) and ``la`` is (H, W, 1), both on the standardized grids."""
        if sa.dim() != 3 or la.dim() != 3 or la.shape[-1] != 1:
            raise ShapeError(f"network input: expected SA (H,W,S) and LA (H,W,1), got {tuple(sa.shape)} and {tuple(la.shape)}")
        if tuple(sa.shape) != gst.ctx.source_shape or tuple(la.shape) != gst.ctx.target_shape:
            raise ShapeError(f"gst stage: context maps {gst.ctx.source_shape}->{gst.ctx.target_shape}, "
                             f"inputs are {tuple(sa.shape)} and {tuple(la.shape)}")
        sa_slices = sa.permute(2, 0, 1)[:, None]
        la_slice = la.permute(2, 0, 1)[:, None]
        if sa_slices.shape[-2:] == la_slice.shape[-2:]:
            feats = self.pyramid(torch.cat([sa_slices, la_slice]))
            sa_feat, la_feat = feats[:-1], feats[-1:]
        else:
            sa_feat, la_feat = self.pyramid(sa_slices), self.pyramid(la_slice)

        # (S, C, H, W) -> (1, C, S, H, W)
        v = sa_feat.permute(1, 0, 2, 3)[None]
        v = F.selu(self.sa_conv2(F.selu(self.sa_conv1(v))))
        sa_prob = torch.sigmoid(self.sa_head(v))[0, 0].permute(1, 2, 0)

        projected = gst(sa_prob)
        if not fuse:
            projected = torch.zeros_like(projected)
        u = F.selu(self.la_conv1(la_feat))
        u = torch.cat([u, projected.permute(2, 0, 1)[None]], dim=1)
        u = F.selu(self.la_conv2(u))
        la_prob = torch.sigmoid(self.la_head(u))[0].permute(1, 2, 0)
        return CaseForward(sa_prob, la_prob, {"sa_features": sa_feat, "la_features": la_feat, "projected": projected})


def lecun_normal_(module: nn.Module, generator: torch.Generator) -> None:
    """Kernels ~ N(0, 1/fan_in), biases exactly 0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=m.weight.dtype) / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()


def init_weights(config: NetworkConfig | None = None, seed: int = 0, dtype=torch.float32) -> TemperaNet:
    net = TemperaNet(config).to(dtype)
    lecun_normal_(net, torch.Generator().manual_seed(seed))
    return net


def _tensor(grid: VolumeGrid, dtype) -> torch.Tensor:
    return torch.from_numpy(np.array(grid.voxels, dtype=np.float64)).to(dtype)


def run_case(net: TemperaNet, sa: VolumeGrid, la: VolumeGrid, gst: GstLayer, fuse: bool = True) -> CaseForward:
    dtype = next(net.parameters()).dtype
    return net(_tensor(sa, dtype), _tensor(la, dtype), gst, fuse=fuse)


@torch.no_grad()
def predict(net: TemperaNet, sa: VolumeGrid, la: VolumeGrid, gst: GstLayer, threshold: float = 0.5):
    """Thresholded masks on the standardized SA and LA grids."""
    out = run_case(net, sa, la, gst)
    sa_mask = (out.sa_probability >= threshold).numpy().astype(np.uint8)
    la_mask = (out.la_probability >= threshold).numpy().astype(np.uint8)
    return SegmentationMask.from_geometry(sa_mask, sa.geometry), SegmentationMask.from_geometry(la_mask, la.geometry)


def weight_fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
