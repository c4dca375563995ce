"""Lightweight 3D adapter: anisotropic ConvNeXt blocks at 1/2 and 1/4 in-plane scale."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import numerics as nx


@dataclass(frozen=True)
class AdapterConfig:
    in_channels: int = 2
    c_half: int = 16
    c_quarter: int = 32
    blocks_per_stage: int = 2
    expansion: int = 4
    stride: tuple[int, int, int] = (1, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "stride", tuple(self.stride))
        if self.stride[0] != 1:
            raise ValueError("adapter strides must preserve depth")
        if min(self.in_channels, self.c_half, self.c_quarter, self.expansion) < 1:
            raise ValueError(f"invalid adapter config {self}")
        if self.blocks_per_stage < 0:
            raise ValueError("blocks_per_stage must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stride"] = list(self.stride)
        return d


def lecun_normal(shape, fan_in: int, gen: torch.Generator) -> torch.Tensor:
    std = 1.0 / math.sqrt(fan_in)
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


class ConvNeXtBlock(nn.Module):
    """x + PW2(GELU(PW1(LN(DW_3x7x7(x) + DW_3x1x1(x)))))."""

    def __init__(self, channels: int, gen: torch.Generator, expansion: int = 4):
        super().__init__()
        hidden = expansion * channels
        self.dw_spatial = nn.Parameter(lecun_normal((channels, 3, 7, 7), 3 * 49, gen))
        self.dw_spatial_b = nn.Parameter(torch.zeros(channels))
        self.dw_depth = nn.Parameter(lecun_normal((channels, 3, 1, 1), 3, gen))
        self.dw_depth_b = nn.Parameter(torch.zeros(channels))
        self.ln_g = nn.Parameter(torch.ones(channels))
        self.ln_b = nn.Parameter(torch.zeros(channels))
        self.pw1 = nn.Parameter(lecun_normal((hidden, channels), channels, gen))
        self.pw1_b = nn.Parameter(torch.zeros(hidden))
        self.pw2 = nn.Parameter(lecun_normal((channels, hidden), hidden, gen) * 0.1)
        self.pw2_b = nn.Parameter(torch.zeros(channels))

    def depthwise(self, x: torch.Tensor) -> torch.Tensor:
        return nx.dw_conv3d(x, self.dw_spatial, self.dw_spatial_b) + nx.dw_conv3d(
            x, self.dw_depth, self.dw_depth_b
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = nx.layer_norm(self.depthwise(x), self.ln_g, self.ln_b, axis=1)
        h = nx.pw_conv(nx.gelu(nx.pw_conv(h, self.pw1, self.pw1_b)), self.pw2, self.pw2_b)
        return h + x


def convnext_block(x: torch.Tensor, block: ConvNeXtBlock) -> torch.Tensor:
    if x.shape[1] != block.ln_g.shape[0]:
        raise ValueError(f"block expects {block.ln_g.shape[0]} channels, got {x.shape[1]}")
    return block(x)


class Adapter3D(nn.Module):
    """Strided stem -> stage 1 (1/2 scale) -> strided conv -> stage 2 (1/4 scale)."""

    def __init__(self, cfg: AdapterConfig = AdapterConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        c0, c1, c2 = cfg.in_channels, cfg.c_half, cfg.c_quarter
        self.stem = nn.Parameter(lecun_normal((c1, c0, 3, 3, 3), 27 * c0, gen))
        self.stem_b = nn.Parameter(torch.zeros(c1))
        self.stage1 = nn.ModuleList(
            ConvNeXtBlock(c1, gen, cfg.expansion) for _ in range(cfg.blocks_per_stage)
        )
        self.down = nn.Parameter(lecun_normal((c2, c1, 3, 3, 3), 27 * c1, gen))
        self.down_b = nn.Parameter(torch.zeros(c2))
        self.stage2 = nn.ModuleList(
            ConvNeXtBlock(c2, gen, cfg.expansion) for _ in range(cfg.blocks_per_stage)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C_in, D, H, W) -> (f_half, f_quarter)."""
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"adapter expects (B, {self.cfg.in_channels}, D, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"H={h}, W={w} must be divisible by 4")
        f = nx.conv3d(x, self.stem, self.stem_b, stride=self.cfg.stride)
        for blk in self.stage1:
            f = blk(f)
        f_half = f
        f = nx.conv3d(f, self.down, self.down_b, stride=self.cfg.stride)
        for blk in self.stage2:
            f = blk(f)
        return f_half, f


def adapter_forward(x: torch.Tensor, adapter: Adapter3D) -> tuple[torch.Tensor, torch.Tensor]:
    return adapter(x)
