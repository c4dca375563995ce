"""Full segmenter: frozen backbone + aggregator (semantic path), adapter (spatial path), decoder."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .adapter3d import Adapter3D, AdapterConfig
from .aggregator import SharedAxialAggregator
from .backbone import DEFAULT_TAPS, FrozenBackbone, ViTConfig
from .decoder import Decoder
from .zchannel import depth_planes, pseudo_color


@dataclass(frozen=True)
class AblationFlags:
    use_aggregator: bool = True
    use_adapter: bool = True
    taps_last_only: bool = False
    use_z_channel: bool = True

    def __post_init__(self):
        if not (self.use_aggregator or self.use_adapter):
            raise ValueError("at least one of use_aggregator / use_adapter must be enabled")

    @property
    def taps(self) -> tuple[int, ...]:
        return (DEFAULT_TAPS[-1],) if self.taps_last_only else DEFAULT_TAPS

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    decoder_channels: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "vit": self.vit.to_dict(),
            "adapter": self.adapter.to_dict(),
            "decoder_channels": self.decoder_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {"vit", "adapter", "decoder_channels", "seed"}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(
            vit=ViTConfig(**d.get("vit", {})),
            adapter=AdapterConfig(**d.get("adapter", {})),
            decoder_channels=d.get("decoder_channels", 8),
            seed=d.get("seed", 0),
        )


class VesselSegmenter(nn.Module):
    """Maps normalized intensity (B, 1, D, H, W) to logits (B, 1, D, H, W)."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), flags: AblationFlags = AblationFlags()):
        super().__init__()
        self.cfg, self.flags = cfg, flags
        a = cfg.adapter
        self.backbone = FrozenBackbone(cfg.vit)
        self.adapter = Adapter3D(a, seed=cfg.seed + 1) if flags.use_adapter else None
        self.aggregator = (
            SharedAxialAggregator(
                cfg.vit.embed_dim, cfg.vit.heads, flags.taps, a.c_half, a.c_quarter,
                seed=cfg.seed + 2, gated=flags.use_adapter,
            )
            if flags.use_aggregator
            else None
        )
        self.decoder = Decoder(a.c_half, a.c_quarter, cfg.decoder_channels, seed=cfg.seed + 3)

    def inputs(self, intensity: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(intensity, z map); without the Z channel the map is a copy of the intensity."""
        b, _, d, h, w = intensity.shape
        if self.flags.use_z_channel:
            return intensity, depth_planes(b, d, h, w, dtype=intensity.dtype)
        return intensity, intensity.clone()

    def semantic_taps(self, intensity, zmap) -> tuple[dict[int, torch.Tensor], tuple[int, int]]:
        b, _, d, h, w = intensity.shape
        grid = self.backbone.grid(h, w)
        with torch.no_grad():
            tokens = self.backbone.patch_embed(pseudo_color(intensity, zmap))
            taps = self.backbone.forward_taps(tokens, self.flags.taps)
        return {k: v.reshape(b, d, *v.shape[1:]) for k, v in taps.items()}, grid

    def forward(self, intensity: torch.Tensor) -> torch.Tensor:
        if intensity.dim() != 5 or intensity.shape[1] != 1:
            raise ValueError(f"expected (B, 1, D, H, W) intensity, got {tuple(intensity.shape)}")
        h, w = intensity.shape[-2:]
        intensity, zmap = self.inputs(intensity)
        spat = self.adapter(torch.cat((intensity, zmap), dim=1)) if self.adapter is not None else None
        if self.aggregator is not None:
            taps, grid = self.semantic_taps(intensity, zmap)
            fused_q, fused_h = self.aggregator(taps, grid, spat, (h, w))
        else:
            fused_h, fused_q = spat
        return self.decoder(fused_q, fused_h)

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def trainable_parameters(self):
        return [p for _, p in self.trainable_named_parameters()]

    def frozen_count(self) -> int:
        return sum(p.numel() for p in self.backbone.parameters())

    def trainable_count(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def trainable_checksum(self) -> str:
        h = hashlib.sha256()
        for n, p in self.trainable_named_parameters():
            h.update(n.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()
