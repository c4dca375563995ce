"""Shared axial aggregator and gated multi-scale fusion.

Token tensors here are laid out (B, D, N, E): batch, slice, in-plane token,
embedding. One attention block (slice pass with RoPE over depth, then an
in-slice pass) is shared by every backbone level.
"""

from __future__ import annotations

import torch
from torch import nn

from . import numerics as nx
from .adapter3d import lecun_normal
from .backbone import _trunc_normal


class AxialAttention(nn.Module):
    """Pre-LN self-attention with residual. ``axis`` picks the sequence axis of (B, D, N, E)."""

    def __init__(self, dim: int, heads: int, gen: torch.Generator, rope: bool):
        super().__init__()
        self.heads = heads
        self.rope = rope
        self.ln_g = nn.Parameter(torch.ones(dim))
        self.ln_b = nn.Parameter(torch.zeros(dim))
        self.wq = nn.Parameter(_trunc_normal((dim, dim), gen))
        self.wk = nn.Parameter(_trunc_normal((dim, dim), gen))
        self.wv = nn.Parameter(lecun_normal((dim, dim), dim, gen))
        self.wo = nn.Parameter(lecun_normal((dim, dim), dim, gen))

    def attend(self, seq: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
        """Residual attention over axis -2 of ``seq`` (..., S, E)."""
        h = nx.layer_norm(seq, self.ln_g, self.ln_b, axis=-1)
        return seq + nx.mhsa(h, self.heads, self.wq, self.wk, self.wv, self.wo, positions)


class SharedAxialBlock(nn.Module):
    def __init__(self, dim: int, heads: int, gen: torch.Generator):
        super().__init__()
        self.slice_attn = AxialAttention(dim, heads, gen, rope=True)
        self.global_attn = AxialAttention(dim, heads, gen, rope=False)


def slice_attention(tokens: torch.Tensor, block: SharedAxialBlock, offset: int = 0) -> torch.Tensor:
    """Attention along depth for every in-plane token index; RoPE positions are slice indices."""
    if tokens.dim() != 4:
        raise ValueError(f"tokens must be (B, D, N, E), got {tuple(tokens.shape)}")
    depth = tokens.shape[1]
    positions = torch.arange(depth) + offset
    cols = tokens.transpose(1, 2)  # (B, N, D, E)
    return block.slice_attn.attend(cols, positions).transpose(1, 2)


def global_attention(tokens: torch.Tensor, block: SharedAxialBlock) -> torch.Tensor:
    """Attention among the in-plane tokens of each slice; no positional encoding."""
    if tokens.dim() != 4:
        raise ValueError(f"tokens must be (B, D, N, E), got {tuple(tokens.shape)}")
    return block.global_attn.attend(tokens)


class GatedFusion(nn.Module):
    """Project semantic tokens to feature maps and gate in the adapter's features at 1/4 and 1/2."""

    def __init__(self, dim: int, c_half: int, c_quarter: int, gen: torch.Generator, gated: bool = True):
        super().__init__()
        self.gated = gated
        self.proj_q = nn.Parameter(lecun_normal((c_quarter, dim), dim, gen))
        self.proj_q_b = nn.Parameter(torch.zeros(c_quarter))
        self.proj_h = nn.Parameter(lecun_normal((c_half, c_quarter), c_quarter, gen))
        self.proj_h_b = nn.Parameter(torch.zeros(c_half))
        if gated:
            self.gate_q = nn.Parameter(lecun_normal((c_quarter, 2 * c_quarter), 2 * c_quarter, gen))
            self.gate_q_b = nn.Parameter(torch.zeros(c_quarter))
            self.gate_h = nn.Parameter(lecun_normal((c_half, 2 * c_half), 2 * c_half, gen))
            self.gate_h_b = nn.Parameter(torch.zeros(c_half))


def gate(up: torch.Tensor, spat: torch.Tensor | None, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """up + sigmoid(W_gate * [up, spat]) * spat."""
    if spat is None:
        return up
    if up.shape != spat.shape:
        raise ValueError(f"gate inputs misaligned: {tuple(up.shape)} vs {tuple(spat.shape)}")
    g = nx.sigmoid(nx.pw_conv(torch.cat((up, spat), dim=1), w, b))
    return up + g * spat


def gated_fusion(
    fused: torch.Tensor,
    grid: tuple[int, int],
    spat: tuple[torch.Tensor, torch.Tensor] | None,
    fusion: GatedFusion,
    out_hw: tuple[int, int],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Fused (B, D, N, E) tokens -> (F_quarter, F_half) feature maps.

    ``out_hw`` is the full-resolution (H, W); ``spat`` is (f_half, f_quarter)
    from the adapter, or None when the adapter is ablated.
    """
    b, d, n, e = fused.shape
    gh, gw = grid
    if gh * gw != n:
        raise ValueError(f"token grid {grid} does not match {n} tokens")
    h, w = out_hw
    fmap = fused.permute(0, 3, 1, 2).reshape(b, e, d, gh, gw)
    # pointwise projection commutes with the (weights-sum-to-one) upsample; project first
    up_q = nx.upsample_trilinear(nx.pw_conv(fmap, fusion.proj_q, fusion.proj_q_b), (d, h // 4, w // 4))
    f_half, f_quarter = spat if spat is not None else (None, None)
    if f_quarter is not None and not fusion.gated:
        raise ValueError("fusion built without gates cannot take adapter features")
    out_q = gate(up_q, f_quarter, getattr(fusion, "gate_q", None), getattr(fusion, "gate_q_b", None))
    up_h = nx.upsample_trilinear(nx.pw_conv(out_q, fusion.proj_h, fusion.proj_h_b), (d, h // 2, w // 2))
    out_h = gate(up_h, f_half, getattr(fusion, "gate_h", None), getattr(fusion, "gate_h_b", None))
    return out_q, out_h


class SharedAxialAggregator(nn.Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        taps: tuple[int, ...],
        c_half: int,
        c_quarter: int,
        seed: int = 0,
        gated: bool = True,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.taps = tuple(sorted(taps))
        self.level_ln = nn.ParameterDict()
        for t in self.taps:
            self.level_ln[f"g{t}"] = nn.Parameter(torch.ones(dim))
            self.level_ln[f"b{t}"] = nn.Parameter(torch.zeros(dim))
        self.block = SharedAxialBlock(dim, heads, gen)
        self.fusion = GatedFusion(dim, c_half, c_quarter, gen, gated=gated)

    def level(self, tokens: torch.Tensor, tap: int, offset: int = 0) -> torch.Tensor:
        x = nx.layer_norm(tokens, self.level_ln[f"g{tap}"], self.level_ln[f"b{tap}"], axis=-1)
        x = slice_attention(x, self.block, offset)
        return global_attention(x, self.block)

    def aggregate_levels(self, taps: dict[int, torch.Tensor], offset: int = 0) -> torch.Tensor:
        """Mean over levels of the shared slice-then-global attention output."""
        if set(taps) != set(self.taps):
            raise ValueError(f"expected taps {self.taps}, got {sorted(taps)}")
        shapes = {tuple(t.shape) for t in taps.values()}
        if len(shapes) != 1:
            raise ValueError(f"inconsistent tap shapes {sorted(shapes)}")
        acc = None
        for t in self.taps:
            h = self.level(taps[t], t, offset)
            acc = h if acc is None else acc + h
        return acc / len(self.taps)

    def forward(self, taps, grid, spat, out_hw):
        return gated_fusion(self.aggregate_levels(taps), grid, spat, self.fusion, out_hw)


def aggregate_levels(taps: dict[int, torch.Tensor], agg: SharedAxialAggregator) -> torch.Tensor:
    return agg.aggregate_levels(taps)
