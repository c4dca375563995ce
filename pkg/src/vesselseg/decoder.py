"""Decoder from fused 1/4 and 1/2 scale features to full-resolution logits."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .adapter3d import lecun_normal


# vessels are a few percent of voxels; start the head near that prior
PRIOR_LOGIT = -4.0


class ConvBlock(nn.Module):
    """3x3x3 conv -> channel LayerNorm -> GELU."""

    def __init__(self, c_in: int, c_out: int, gen: torch.Generator):
        super().__init__()
        self.w = nn.Parameter(lecun_normal((c_out, c_in, 3, 3, 3), 27 * c_in, gen))
        self.b = nn.Parameter(torch.zeros(c_out))
        self.ln_g = nn.Parameter(torch.ones(c_out))
        self.ln_b = nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.gelu(nx.layer_norm(nx.conv3d(x, self.w, self.b), self.ln_g, self.ln_b, axis=1))


class Decoder(nn.Module):
    def __init__(self, c_half: int = 16, c_quarter: int = 32, c_full: int = 8, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.c_half, self.c_quarter = c_half, c_quarter
        self.up_block = ConvBlock(c_quarter + c_half, c_half, gen)
        self.reduce = nn.Parameter(lecun_normal((c_full, c_half), c_half, gen))
        self.reduce_b = nn.Parameter(torch.zeros(c_full))
        self.full_block = ConvBlock(c_full, c_full, gen)
        self.head = nn.Parameter(lecun_normal((1, c_full), c_full, gen))
        self.head_b = nn.Parameter(torch.full((1,), PRIOR_LOGIT))

    def forward(self, fused_quarter: torch.Tensor, fused_half: torch.Tensor) -> torch.Tensor:
        b, cq, d, hq, wq = fused_quarter.shape
        if cq != self.c_quarter or fused_half.shape[1] != self.c_half:
            raise ValueError(
                f"decoder channels: got {cq}/{fused_half.shape[1]}, expected {self.c_quarter}/{self.c_half}"
            )
        if tuple(fused_half.shape[2:]) != (d, 2 * hq, 2 * wq) or fused_half.shape[0] != b:
            raise ValueError(
                f"fused_half {tuple(fused_half.shape)} not aligned with fused_quarter {tuple(fused_quarter.shape)}"
            )
        x = nx.upsample_trilinear(fused_quarter, (d, 2 * hq, 2 * wq))
        x = self.up_block(torch.cat((x, fused_half), dim=1))
        # narrow the channels before the full-resolution stage
        x = nx.upsample_trilinear(nx.pw_conv(x, self.reduce, self.reduce_b), (d, 4 * hq, 4 * wq))
        x = self.full_block(x)
        return nx.pw_conv(x, self.head, self.head_b)


def decode(fused_quarter: torch.Tensor, fused_half: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    return decoder(fused_quarter, fused_half)


def predict_mask(logits, threshold: float = 0.5) -> np.ndarray:
    """Binarize logits: 1 where sigmoid(logit) > threshold (strict)."""
    z = torch.as_tensor(logits, dtype=torch.float64)
    return (torch.sigmoid(z) > threshold).to(torch.uint8).numpy()
