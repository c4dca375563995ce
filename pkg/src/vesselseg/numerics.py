"""Differentiable tensor kernels on (B, C, D, H, W) tensors.

Every function here is written against plain ``torch`` tensors so that
reverse-mode gradients come from autograd. ``grad_check`` compares those
gradients with central finite differences and is the conformance test for
each kernel.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

LN_EPS = 1e-6
ROPE_BASE = 10000.0


def _check_rank5(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 5:
        raise ValueError(f"{name} must be rank 5 (B, C, D, H, W), got shape {tuple(x.shape)}")


def dw_conv3d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Depthwise 3D correlation with zero padding; output shape equals input shape.

    ``kernel`` has shape (C, kd, kh, kw) with odd kernel extents.
    """
    _check_rank5(x)
    if kernel.dim() != 4:
        raise ValueError(f"depthwise kernel must be (C, kd, kh, kw), got {tuple(kernel.shape)}")
    channels = x.shape[1]
    if kernel.shape[0] != channels:
        raise ValueError(f"kernel has {kernel.shape[0]} channels, input has {channels}")
    kd, kh, kw = kernel.shape[1:]
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {(kd, kh, kw)}")
    if bias is not None and bias.shape != (channels,):
        raise ValueError(f"bias must have shape ({channels},), got {tuple(bias.shape)}")
    return _depth_decomposed(x, kernel.unsqueeze(1), bias, (1, 1), groups=channels)


def conv3d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: tuple[int, int, int] = (1, 1, 1),
) -> torch.Tensor:
    """Dense 3D correlation, zero padding of half the (odd) kernel extent."""
    _check_rank5(x)
    if weight.dim() != 5 or weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"weight {tuple(weight.shape)} incompatible with input channels {x.shape[1]}"
        )
    if stride[0] != 1:
        raise ValueError("depth stride must be 1")
    return _depth_decomposed(x, weight, bias, stride[1:])


def _depth_decomposed(x, weight, bias, stride, groups=1):
    # 3D correlation as a sum of 2D correlations over depth taps; zero padding.
    b, c, d, h, w = x.shape
    kd, kh, kw = weight.shape[2:]
    r = kd // 2
    xp = F.pad(x, (0, 0, 0, 0, r, r)) if r else x
    if groups == c and kh == 1 and kw == 1 and stride == (1, 1):
        # pure depth kernel: weighted sum of depth-shifted copies
        out = None
        for k in range(kd):
            term = xp[:, :, k:k + d] * weight[:, 0, k].reshape(1, c, 1, 1, 1)
            out = term if out is None else out + term
    else:
        slices = xp.transpose(1, 2)  # (B, D + 2r, C, H, W)
        out = None
        for k in range(kd):
            sl = slices[:, k:k + d].reshape(b * d, c, h, w)
            if groups > 1:
                # grouped conv2d backward is much faster in channels-last layout on CPU
                sl = sl.contiguous(memory_format=torch.channels_last)
            term = F.conv2d(sl, weight[:, :, k], None, stride=stride,
                            padding=(kh // 2, kw // 2), groups=groups)
            out = term if out is None else out + term
        out = out.contiguous().reshape(b, d, *out.shape[1:]).transpose(1, 2)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1, 1)
    return out


def pw_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """1x1x1 convolution: per-voxel linear map across channels. ``weight`` is (C_out, C_in)."""
    _check_rank5(x)
    if weight.dim() != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"pointwise weight {tuple(weight.shape)} incompatible with input channels {x.shape[1]}"
        )
    out = torch.einsum("oc,bcdhw->bodhw", weight, x)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1, 1)
    return out


def layer_norm(
    x: torch.Tensor,
    gain: torch.Tensor,
    offset: torch.Tensor,
    axis: int = 1,
    eps: float = LN_EPS,
) -> torch.Tensor:
    """Normalize over ``axis`` (biased variance), then apply a per-feature affine."""
    n = x.shape[axis]
    if gain.shape != (n,) or offset.shape != (n,):
        raise ValueError(f"gain/offset must have length {n}")
    mean = x.mean(dim=axis, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=axis, keepdim=True)
    normed = centered / torch.sqrt(var + eps)
    shape = [1] * x.dim()
    shape[axis] = n
    return normed * gain.view(shape) + offset.view(shape)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return F.gelu(x, approximate="tanh")


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def rope_angles(positions: torch.Tensor, head_dim: int, dtype=None) -> torch.Tensor:
    """Rotation angles (S, head_dim/2) for integer or real ``positions`` of shape (S,)."""
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {head_dim}")
    dtype = dtype or torch.get_default_dtype()
    j = torch.arange(head_dim // 2, dtype=dtype)
    freqs = ROPE_BASE ** (-2.0 * j / head_dim)
    return positions.to(dtype).unsqueeze(-1) * freqs


def apply_rope(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved pairs (2j, 2j+1) of the last axis of ``x`` (..., S, d)."""
    ang = rope_angles(positions, x.shape[-1], dtype=x.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    return torch.stack((rot_even, rot_odd), dim=-1).flatten(-2)


def _split_heads(t: torch.Tensor, heads: int) -> torch.Tensor:
    *lead, s, e = t.shape
    return t.reshape(*lead, s, heads, e // heads).transpose(-2, -3)


def _merge_heads(t: torch.Tensor) -> torch.Tensor:
    *lead, h, s, d = t.shape
    return t.transpose(-2, -3).reshape(*lead, s, h * d)


def _project(t, w, b):
    out = t @ w.transpose(0, 1)
    return out if b is None else out + b


def attention_logits(
    tokens: torch.Tensor,
    heads: int,
    wq: torch.Tensor,
    wk: torch.Tensor,
    positions: torch.Tensor | None = None,
    bq: torch.Tensor | None = None,
    bk: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled query-key scores, shape (..., heads, S, S)."""
    dim = tokens.shape[-1]
    if dim % heads:
        raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
    q = _split_heads(_project(tokens, wq, bq), heads)
    k = _split_heads(_project(tokens, wk, bk), heads)
    if positions is not None:
        q = apply_rope(q, positions)
        k = apply_rope(k, positions)
    return q @ k.transpose(-1, -2) / math.sqrt(dim // heads)


def mhsa(
    tokens: torch.Tensor,
    heads: int,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    positions: torch.Tensor | None = None,
    biases: Sequence[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """Multi-head self-attention over the second-to-last axis of ``tokens`` (..., S, E).

    With ``positions`` given, rotary embedding is applied to queries and keys
    of every head before scoring. ``biases`` is an optional (bq, bk, bv, bo).
    """
    bq, bk, bv, bo = biases if biases is not None else (None, None, None, None)
    logits = attention_logits(tokens, heads, wq, wk, positions, bq, bk)
    v = _split_heads(_project(tokens, wv, bv), heads)
    mixed = _merge_heads(softmax(logits, dim=-1) @ v)
    return _project(mixed, wo, bo)


def upsample_trilinear(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Align-corners trilinear resize of the three trailing axes to ``size``."""
    _check_rank5(x)
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 1:
        raise ValueError(f"target size must be three positive ints, got {size}")
    if size == tuple(x.shape[2:]):
        return x
    if size[0] == x.shape[2]:
        # depth untouched: align-corners trilinear reduces to bilinear per slice
        b, c, d = x.shape[:3]
        flat = x.transpose(1, 2).reshape(b * d, c, *x.shape[3:])
        out = F.interpolate(flat, size=size[1:], mode="bilinear", align_corners=True)
        return out.reshape(b, d, c, *size[1:]).transpose(1, 2)
    return F.interpolate(x, size=size, mode="trilinear", align_corners=True)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` is a closure returning a scalar that reads ``params`` (leaf tensors
    with ``requires_grad``). With ``max_coords`` set, that many coordinates
    per tensor are drawn at random instead of checking every coordinate.
    """
    value = f()
    if not torch.isfinite(value).all():
        raise FloatingPointError("grad_check: objective is not finite at params")
    analytic = torch.autograd.grad(value, list(params), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        g_flat = np.zeros(p.numel()) if g is None else g.detach().reshape(-1).cpu().double().numpy()
        flat = p.data.view(-1)
        coords = np.arange(p.numel())
        if max_coords is not None and p.numel() > max_coords:
            coords = rng.choice(p.numel(), size=max_coords, replace=False)
        for i in coords:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = f().item()
                flat[i] = orig - eps
                f_minus = f().item()
                flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError("grad_check: objective not finite under perturbation")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_ad = float(g_flat[i])
            err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
            worst = max(worst, err)
    return worst
