"""Slice-wise pseudo-colour transform feeding the 2D backbone.

Each slice becomes a 3-channel image (I, I, z) with z the crop-relative depth
of the slice, then gets the usual ImageNet per-channel standardization.
The transform has no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class PseudoColorStack:
    data: np.ndarray  # (D, 3, H, W)
    note: dict = field(default_factory=lambda: {"mean": IMAGENET_MEAN, "std": IMAGENET_STD})


def depth_map(depth: int) -> np.ndarray:
    """Relative depth d/(D-1) per slice; a single slice maps to 0."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if depth == 1:
        return np.zeros(1)
    return np.arange(depth, dtype=np.float64) / (depth - 1)


def depth_planes(batch: int, depth: int, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Z map broadcast to a (B, 1, D, H, W) tensor."""
    z = torch.as_tensor(depth_map(depth), dtype=dtype)
    return z.view(1, 1, depth, 1, 1).expand(batch, 1, depth, height, width).contiguous()


def pseudo_color(intensity: torch.Tensor, zmap: torch.Tensor) -> torch.Tensor:
    """(B, 1, D, H, W) intensity and z map -> (B*D, 3, H, W) standardized slices."""
    b, _, d, h, w = intensity.shape
    stacked = torch.cat((intensity, intensity, zmap), dim=1)  # (B, 3, D, H, W)
    mean = torch.tensor(IMAGENET_MEAN, dtype=intensity.dtype).view(1, 3, 1, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=intensity.dtype).view(1, 3, 1, 1, 1)
    stacked = (stacked - mean) / std
    return stacked.permute(0, 2, 1, 3, 4).reshape(b * d, 3, h, w)


def to_pseudo_color(intensity: np.ndarray) -> PseudoColorStack:
    """Normalized (D, H, W) intensity in [0, 1] -> PseudoColorStack of shape (D, 3, H, W)."""
    intensity = np.asarray(intensity, dtype=np.float64)
    if intensity.ndim != 3:
        raise ValueError(f"expected a (D, H, W) volume, got shape {intensity.shape}")
    if intensity.size and (intensity.min() < 0.0 or intensity.max() > 1.0):
        raise ValueError("intensity must lie in [0, 1]; normalize first")
    d, h, w = intensity.shape
    t = torch.from_numpy(intensity).view(1, 1, d, h, w)
    z = depth_planes(1, d, h, w, dtype=torch.float64)
    return PseudoColorStack(pseudo_color(t, z).numpy())


def recover_intensity(stack: PseudoColorStack) -> np.ndarray:
    """Invert channel 0 back to the normalized intensity."""
    return stack.data[:, 0] * IMAGENET_STD[0] + IMAGENET_MEAN[0]
