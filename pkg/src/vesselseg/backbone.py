"""Frozen 2D ViT standing in for a pretrained foundation backbone.

Slices are processed independently. Randomly initialized weights replace
pretrained ones; real weights can be loaded through ``load_external_weights``
as long as the tensor names and shapes agree with :class:`ViTConfig`.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .weightfile import load_tensors, save_tensors

DEFAULT_TAPS = (2, 5, 8, 11)


@dataclass(frozen=True)
class ViTConfig:
    patch: int = 16
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 12
    mlp_ratio: int = 4
    pos_grid: tuple[int, int] = (4, 4)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pos_grid", tuple(self.pos_grid))
        if self.blocks < max(DEFAULT_TAPS) + 1:
            raise ValueError(f"need at least {max(DEFAULT_TAPS) + 1} blocks for the feature taps")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.patch < 1 or self.mlp_ratio < 1 or min(self.pos_grid) < 1:
            raise ValueError(f"invalid backbone config {self}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_grid"] = list(self.pos_grid)
        return d


def parameter_count(cfg: ViTConfig) -> int:
    """Closed-form backbone parameter count."""
    e, p = cfg.embed_dim, cfg.patch
    hidden = cfg.mlp_ratio * e
    embed = 3 * p * p * e + e + cfg.pos_grid[0] * cfg.pos_grid[1] * e
    per_block = 2 * (2 * e) + 4 * (e * e + e) + (e * hidden + hidden) + (hidden * e + e)
    return embed + cfg.blocks * per_block


def _trunc_normal(shape, gen: torch.Generator, std: float = 0.02) -> torch.Tensor:
    t = torch.empty(shape)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


class ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int, gen: torch.Generator):
        super().__init__()
        self.heads = heads
        self.ln1_g = nn.Parameter(torch.ones(dim))
        self.ln1_b = nn.Parameter(torch.zeros(dim))
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, nn.Parameter(_trunc_normal((dim, dim), gen)))
            setattr(self, "b" + name[1], nn.Parameter(torch.zeros(dim)))
        self.ln2_g = nn.Parameter(torch.ones(dim))
        self.ln2_b = nn.Parameter(torch.zeros(dim))
        self.fc1_w = nn.Parameter(_trunc_normal((hidden, dim), gen))
        self.fc1_b = nn.Parameter(torch.zeros(hidden))
        self.fc2_w = nn.Parameter(_trunc_normal((dim, hidden), gen))
        self.fc2_b = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = nx.layer_norm(x, self.ln1_g, self.ln1_b, axis=-1)
        x = x + nx.mhsa(
            h, self.heads, self.wq, self.wk, self.wv, self.wo,
            biases=(self.bq, self.bk, self.bv, self.bo),
        )
        h = nx.layer_norm(x, self.ln2_g, self.ln2_b, axis=-1)
        h = nx.gelu(h @ self.fc1_w.T + self.fc1_b) @ self.fc2_w.T + self.fc2_b
        return x + h


class FrozenBackbone(nn.Module):
    """Patch embedding plus pre-LN transformer blocks; every parameter is frozen."""

    def __init__(self, cfg: ViTConfig = ViTConfig()):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        e, p = cfg.embed_dim, cfg.patch
        self.patch_w = nn.Parameter(_trunc_normal((e, 3 * p * p), gen))
        self.patch_b = nn.Parameter(torch.zeros(e))
        self.pos = nn.Parameter(_trunc_normal((*cfg.pos_grid, e), gen))
        self.blocks = nn.ModuleList(
            ViTBlock(e, cfg.heads, cfg.mlp_ratio * e, gen) for _ in range(cfg.blocks)
        )
        self.freeze()

    def freeze(self) -> None:
        for prm in self.parameters():
            prm.requires_grad_(False)

    def grid(self, height: int, width: int) -> tuple[int, int]:
        p = self.cfg.patch
        if height % p or width % p:
            raise ValueError(f"H={height}, W={width} must be divisible by patch size {p}")
        return height // p, width // p

    def positional(self, gh: int, gw: int) -> torch.Tensor:
        pos = self.pos
        if (gh, gw) != tuple(pos.shape[:2]):
            pos = F.interpolate(
                pos.permute(2, 0, 1).unsqueeze(0), size=(gh, gw),
                mode="bilinear", align_corners=True,
            )[0].permute(1, 2, 0)
        return pos.reshape(gh * gw, -1)

    def patch_embed(self, slices: torch.Tensor) -> torch.Tensor:
        """(S, 3, H, W) pseudo-colour slices -> (S, N, E) tokens."""
        s, c, h, w = slices.shape
        if c != 3:
            raise ValueError(f"expected 3-channel slices, got {c}")
        gh, gw = self.grid(h, w)
        p = self.cfg.patch
        patches = (
            slices.reshape(s, 3, gh, p, gw, p)
            .permute(0, 2, 4, 1, 3, 5)
            .reshape(s, gh * gw, 3 * p * p)
        )
        return patches @ self.patch_w.T + self.patch_b + self.positional(gh, gw)

    def forward_taps(self, tokens: torch.Tensor, taps=DEFAULT_TAPS) -> dict[int, torch.Tensor]:
        """Run the blocks on (S, N, E) tokens and return post-block outputs at ``taps``."""
        taps = sorted(set(int(t) for t in taps))
        if not taps or taps[0] < 0 or taps[-1] >= len(self.blocks):
            raise ValueError(f"taps {taps} out of range [0, {len(self.blocks)})")
        out = {}
        x = tokens
        for i, block in enumerate(self.blocks[: taps[-1] + 1]):
            x = block(x)
            if i in taps:
                out[i] = x
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, prm in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(prm.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save_weights(self, path: str | Path) -> None:
        save_tensors(path, dict(self.state_dict()))


def init_backbone(cfg: ViTConfig = ViTConfig()) -> FrozenBackbone:
    return FrozenBackbone(cfg)


def load_external_weights(path: str | Path, cfg: ViTConfig = ViTConfig()) -> FrozenBackbone:
    """Build a backbone for ``cfg`` and overwrite its weights from a weight file."""
    model = FrozenBackbone(cfg)
    tensors = load_tensors(path)
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ValueError(f"weight file {path} lacks tensor {missing[0]!r}")
    for name, ref in expected.items():
        if tuple(tensors[name].shape) != tuple(ref.shape):
            raise ValueError(
                f"tensor {name!r}: file shape {tuple(tensors[name].shape)} != expected {tuple(ref.shape)}"
            )
    model.load_state_dict({k: tensors[k].to(expected[k].dtype) for k in expected})
    model.freeze()
    return model
